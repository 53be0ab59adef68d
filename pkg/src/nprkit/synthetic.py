"""Procedural street-scene corpora with known places and known conditions.

Each place is a random facade layout; views of a place differ by a small
camera shift, exposure jitter and sensor noise. Night views are rendered
with :func:`nprkit.photometry.night_transform` under randomized parameters.
Places sit on a grid far wider than the 25 m evaluation threshold, so the
only correct database image for a query is its own place's.
"""

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from nprkit import geo
from nprkit.corpus import Condition, Corpus, Role, make_record, save_corpus, save_image
from nprkit.photometry import NightParams, night_transform

CANVAS = 40
VIEW = 32
# Tokyo, zone 54N
ORIGIN_LATLON = (35.6762, 139.6503)
DEFAULT_DATE = datetime(2014, 9, 24, tzinfo=timezone.utc)


def render_scene(rng, size=CANVAS):
    """A street facade: sky, a row of buildings with window grids, a road."""
    img = np.empty((size, size, 3))
    horizon = int(rng.integers(size // 5, size // 2))
    sky_top, sky_bot = rng.uniform(120, 255, 3), rng.uniform(150, 255, 3)
    t = np.linspace(0, 1, size)[:, None, None]
    img[:] = sky_top * (1 - t) + sky_bot * t
    road_y = int(rng.integers(size * 3 // 4, size - 2))
    x = 0
    while x < size:
        w = int(rng.integers(5, 15))
        top = int(rng.integers(2, horizon + 4))
        facade = rng.uniform(20, 230, 3)
        img[top:road_y, x:x + w] = facade
        win = facade * rng.uniform(0.2, 0.6) if rng.random() < 0.5 else np.minimum(facade * 1.6 + 40, 255)
        pitch_y, pitch_x = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        for yy in range(top + 1, road_y - 1, pitch_y):
            for xx in range(x + 1, min(x + w, size) - 1, pitch_x):
                img[yy:yy + max(1, pitch_y - 2), xx:xx + max(1, pitch_x - 2)] = win
        x += w + int(rng.integers(0, 3))
    img[road_y:] = rng.uniform(50, 120) * np.ones(3)
    lane = int(rng.integers(0, size))
    img[road_y + 1:, max(0, lane - 1):lane + 1] = 230
    return img


def view_of(scene, rng, shift=2, exposure=0.12, noise=4.0):
    """A camera view: jittered crop, exposure change and sensor noise."""
    c = (CANVAS - VIEW) // 2
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    crop = scene[c + dy:c + dy + VIEW, c + dx:c + dx + VIEW]
    out = crop * rng.uniform(1 - exposure, 1 + exposure) + rng.normal(0, noise, crop.shape)
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def random_night_params(rng):
    return NightParams(
        exposure_gain=float(rng.uniform(0.35, 0.6)),
        gamma=float(rng.uniform(1.2, 1.7)),
        wb_shift=tuple(float(v) for v in rng.uniform([0.8, 0.8, 0.95], [1.0, 1.0, 1.3])),
        vignette_strength=float(rng.uniform(0.1, 0.5)),
        noise_sigma=float(rng.uniform(0.005, 0.02)),
        light_count=int(rng.integers(1, 4)),
        seed=int(rng.integers(0, 2**31)),
    )


def place_position(k, spacing_m=40.0, columns=50, origin=ORIGIN_LATLON):
    e0, n0, zone, northern = geo.latlon_to_utm(*origin)
    # centre of a 10 m cell, so view jitter never crosses a cell edge
    e = (e0 // 10) * 10 + 5 + (k % columns) * spacing_m
    n = (n0 // 10) * 10 + 5 + (k // columns) * spacing_m
    return e, n, zone, northern


@dataclass
class SyntheticSet:
    corpus: Corpus
    images: dict  # id -> uint8 image
    truth: dict = field(default_factory=dict)  # query id -> Day/Night by construction
    night_of: dict = field(default_factory=dict)  # day id -> rendered night copy id

    def write(self, root):
        """Write images as PNG plus ``metadata.jsonl`` under ``root``."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for rid, im in sorted(self.images.items()):
            save_image(root / "images" / f"{rid}.png", im)
        save_corpus(self.corpus, root / "metadata.jsonl")
        with open(root / "truth.json", "w", encoding="utf-8") as fh:
            json.dump({k: v.value for k, v in sorted(self.truth.items())}, fh, indent=1, sort_keys=True)
        return root / "metadata.jsonl"


def _record(rid, k, role, rng, heading, *, condition=Condition.UNKNOWN, when=None,
            jitter_m=2.0, spacing_m=40.0):
    e, n, zone, northern = place_position(k, spacing_m)
    e += float(rng.uniform(-jitter_m, jitter_m))
    n += float(rng.uniform(-jitter_m, jitter_m))
    lat, lon = geo.utm_to_latlon(e, n, zone, northern)
    return make_record(rid, f"images/{rid}.png", lat, lon, role,
                       heading_deg=heading, timestamp_utc=when, condition=condition,
                       utm_east=e, utm_north=n, utm_zone=f"{zone}{'N' if northern else 'S'}")


def _local_time(hour, lon=ORIGIN_LATLON[1], day=DEFAULT_DATE):
    return day + timedelta(hours=hour - lon / 15.0)


def evaluation_set(n_places=500, seed=0, night_queries=True, day_queries=True,
                   sunset_queries=0, drop_timestamps=0.0):
    """One database image per place plus day and night queries.

    Day queries are timestamped around local noon and night queries around
    22:00 local time. ``drop_timestamps`` removes the timestamp from that
    fraction of queries so routing must fall back to brightness.
    """
    rng = np.random.default_rng(seed)
    records, images, truth = [], {}, {}
    for k in range(n_places):
        prng = np.random.default_rng([seed, k])
        scene = render_scene(prng)
        heading = float(prng.uniform(0, 360))
        rid = f"db{k:04d}"
        records.append(_record(rid, k, Role.DATABASE, prng, heading))
        images[rid] = view_of(scene, prng)
        kinds = []
        if day_queries:
            kinds.append(("d", Condition.DAY, 12.0 + prng.uniform(-2, 2)))
        if night_queries:
            kinds.append(("n", Condition.NIGHT, 22.0 + prng.uniform(-1, 1)))
        for suffix, cond, hour in kinds:
            qid = f"q{k:04d}{suffix}"
            when = None if rng.random() < drop_timestamps else _local_time(hour)
            records.append(_record(qid, k, Role.QUERY, prng, heading, condition=cond, when=when))
            view = view_of(scene, prng)
            images[qid] = night_transform(view, random_night_params(prng)) if cond is Condition.NIGHT else view
            truth[qid] = cond
    for j in range(sunset_queries):
        k = j % n_places
        prng = np.random.default_rng([seed, k, 7])
        scene = render_scene(np.random.default_rng([seed, k]))
        qid = f"q{k:04d}s{j}"
        hour = 17.6 + prng.uniform(-0.6, 0.6)  # straddles sunset (~17:36 local)
        records.append(_record(qid, k, Role.QUERY, prng, 0.0, condition=Condition.SUNSET,
                               when=_local_time(hour)))
        images[qid] = view_of(scene, prng, exposure=0.3)
        truth[qid] = Condition.SUNSET
    return SyntheticSet(Corpus(tuple(records), "synthetic-eval"), images, truth)


def training_set(n_places=500, views=3, seed=1, render_night=True, place_offset=10_000):
    """Database-only multi-view corpus for fitting projection heads.

    Places are disjoint from :func:`evaluation_set` (different seeds and a
    separate grid). With ``render_night`` each view also gets a night copy
    (id suffix ``~night``) listed in ``night_of``; copies are left out of
    the corpus so geographic partitioning and mining see day images only.
    """
    records, images, night_of = [], {}, {}
    for k in range(n_places):
        prng = np.random.default_rng([seed, k])
        scene = render_scene(prng)
        heading = float(prng.uniform(0, 360))
        for v in range(views):
            rid = f"t{k:04d}v{v}"
            role = Role.QUERY if v == views - 1 else Role.DATABASE
            records.append(_record(rid, place_offset + k, role, prng, heading))
            images[rid] = view_of(scene, prng)
            if render_night:
                nid = f"{rid}~night"
                images[nid] = night_transform(images[rid], random_night_params(prng))
                night_of[rid] = nid
    return SyntheticSet(Corpus(tuple(records), "synthetic-train"), images, {}, night_of)
