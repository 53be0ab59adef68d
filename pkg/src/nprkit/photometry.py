"""Luminance statistics, brightness-based day/night classification and a
deterministic parametric day-to-night renderer.
"""

import enum
import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from nprkit.errors import DataError

# Rec.709 luma weights
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_BRIGHTNESS_THRESHOLD = 0.25

_LIGHT_COLOR = np.array([255.0, 190.0, 110.0])  # sodium-vapour orange


class DayNight(str, enum.Enum):
    DAY = "Day"
    NIGHT = "Night"


def _as_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {image.shape}")
    return image


def luma(image):
    """Per-pixel Rec.709 luma scaled to [0, 1]."""
    image = _as_rgb(image).astype(np.float64)
    return (image @ LUMA_WEIGHTS) / 255.0


def mean_luminance(image):
    image = _as_rgb(image)
    if image.shape[0] * image.shape[1] == 0:
        raise DataError("cannot take the mean luminance of an empty image")
    return float(luma(image).mean())


def classify_by_brightness(lum, threshold=DEFAULT_BRIGHTNESS_THRESHOLD):
    """Night iff ``lum < threshold``; the boundary value counts as Day."""
    if not (0.0 <= lum <= 1.0 and 0.0 <= threshold <= 1.0):
        raise DataError(f"luminance {lum} and threshold {threshold} must lie in [0, 1]")
    return DayNight.NIGHT if lum < threshold else DayNight.DAY


@dataclass(frozen=True)
class NightParams:
    exposure_gain: float = 0.35
    gamma: float = 1.6
    wb_shift: tuple = (0.85, 0.9, 1.15)
    vignette_strength: float = 0.35
    noise_sigma: float = 0.02
    light_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.exposure_gain <= 1.0:
            raise DataError("exposure_gain must lie in (0, 1]")
        if not self.gamma > 0:
            raise DataError("gamma must be positive")
        if len(self.wb_shift) != 3 or any(not w >= 0 for w in self.wb_shift):
            raise DataError("wb_shift must be three non-negative multipliers")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise DataError("vignette_strength must lie in [0, 1]")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise DataError("noise_sigma must lie in [0, 0.2]")
        if self.light_count < 0:
            raise DataError("light_count must be >= 0")
        object.__setattr__(self, "wb_shift", tuple(float(w) for w in self.wb_shift))

    @classmethod
    def identity(cls, seed=0):
        return cls(1.0, 1.0, (1.0, 1.0, 1.0), 0.0, 0.0, 0, seed)

    def to_json(self):
        d = asdict(self)
        d["wb_shift"] = list(self.wb_shift)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        unknown = sorted(set(obj) - {f.name for f in fields(cls)})
        if unknown:
            raise DataError(f"unknown night parameters: {', '.join(unknown)}")
        if "wb_shift" in obj:
            obj["wb_shift"] = tuple(obj["wb_shift"])
        return cls(**obj)


def _image_key(image):
    digest = hashlib.blake2b(image.tobytes(), digest_size=8)
    digest.update(np.array(image.shape, dtype=np.int64).tobytes())
    return int.from_bytes(digest.digest(), "little")


def _stream(params, image, purpose):
    # Counter-based generator keyed on (seed, image content, purpose): each
    # image draws from its own stream regardless of processing order.
    key = [params.seed & 0xFFFFFFFFFFFFFFFF, _image_key(image)]
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64) + purpose))


def night_transform(image, params=NightParams()):
    """Render a night-styled copy of an 8-bit RGB image.

    Stages run in a fixed order, each clamped to [0, 255]: exposure, gamma,
    white balance, vignette, additive light blobs, sensor noise. Output is
    rounded half-to-even back to uint8.
    """
    image = _as_rgb(image)
    if image.dtype != np.uint8:
        raise DataError("night_transform expects a uint8 image")
    h, w = image.shape[:2]
    x = image.astype(np.float64)

    x = np.clip(x * params.exposure_gain, 0.0, 255.0)
    x = np.clip(255.0 * (x / 255.0) ** params.gamma, 0.0, 255.0)
    x = np.clip(x * np.asarray(params.wb_shift), 0.0, 255.0)

    if params.vignette_strength > 0 and h > 0 and w > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r2 = ((yy - (h - 1) / 2) / max(h / 2, 1)) ** 2 + ((xx - (w - 1) / 2) / max(w / 2, 1)) ** 2
        x = np.clip(x * (1.0 - params.vignette_strength * np.minimum(r2 / 2.0, 1.0))[..., None],
                    0.0, 255.0)

    if params.light_count > 0 and h > 0 and w > 0:
        rng = _stream(params, image, 1)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        glow = np.zeros((h, w))
        for _ in range(params.light_count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(0.03, 0.08) * min(h, w) + 0.5
            glow += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        x = np.clip(x + np.minimum(glow, 1.0)[..., None] * _LIGHT_COLOR, 0.0, 255.0)

    if params.noise_sigma > 0:
        rng = _stream(params, image, 2)
        x = np.clip(x + rng.normal(0.0, params.noise_sigma * 255.0, size=x.shape), 0.0, 255.0)

    return np.rint(x).astype(np.uint8)


def luma_histogram(images, bins=32):
    """Pooled luma histogram of an image set, normalized to sum 1."""
    counts = np.zeros(bins)
    for im in images:
        counts += np.histogram(luma(im), bins=bins, range=(0.0, 1.0))[0]
    total = counts.sum()
    if total == 0:
        raise DataError("image set has no pixels")
    return counts / total


@dataclass(frozen=True)
class RealismGap:
    to_night: float
    to_day: float


def adversarial_realism_gap(day_set, night_set, rendered_set, bins=32):
    """L1 distance between pooled luma histograms of the rendered set and
    each real set. 0 means identical statistics, 2 means disjoint support.
    """
    for name, s in (("day", day_set), ("night", night_set), ("rendered", rendered_set)):
        if len(s) == 0:
            raise DataError(f"{name} set is empty")
    h_day = luma_histogram(day_set, bins)
    h_night = luma_histogram(night_set, bins)
    h_rend = luma_histogram(rendered_set, bins)
    return RealismGap(float(np.abs(h_rend - h_night).sum()), float(np.abs(h_rend - h_day).sum()))
