"""Geodesy, UTM projection, geographic class partitioning and triplet mining."""

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from nprkit._parallel import ordered_map
from nprkit.errors import GeoError, UnsupportedLatitudeError

EARTH_RADIUS_M = 6_371_008.8

# WGS84
_A = 6_378_137.0
_F = 1 / 298.257223563
_K0 = 0.9996
_FALSE_EASTING = 500_000.0
_FALSE_NORTHING_SOUTH = 10_000_000.0

# Krueger series coefficients (4th order in the third flattening n).
_N = _F / (2 - _F)
_RECT_A = _A / (1 + _N) * (1 + _N**2 / 4 + _N**4 / 64)
_ALPHA = (
    _N / 2 - 2 * _N**2 / 3 + 5 * _N**3 / 16 + 41 * _N**4 / 180,
    13 * _N**2 / 48 - 3 * _N**3 / 5 + 557 * _N**4 / 1440,
    61 * _N**3 / 240 - 103 * _N**4 / 140,
    49561 * _N**4 / 161280,
)
_BETA = (
    _N / 2 - 2 * _N**2 / 3 + 37 * _N**3 / 96 - _N**4 / 360,
    _N**2 / 48 + _N**3 / 15 - 437 * _N**4 / 1440,
    17 * _N**3 / 480 - 37 * _N**4 / 840,
    4397 * _N**4 / 161280,
)
_DELTA = (
    2 * _N - 2 * _N**2 / 3 - 2 * _N**3 + 116 * _N**4 / 45,
    7 * _N**2 / 3 - 8 * _N**3 / 5 - 227 * _N**4 / 45,
    56 * _N**3 / 15 - 136 * _N**4 / 35,
    4279 * _N**4 / 630,
)
_CONF = 2 * math.sqrt(_N) / (1 + _N)


def haversine_m(a, b):
    """Great-circle distance in meters between two ``(lat, lon)`` pairs in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def _haversine_vec(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def utm_zone_for(lat, lon):
    """Standard UTM zone number, including the Norway and Svalbard exceptions."""
    lon = ((lon + 180.0) % 360.0) - 180.0
    zone = int((lon + 180.0) // 6) + 1
    if 56 <= lat < 64 and 3 <= lon < 12:
        return 32
    if 72 <= lat <= 84 and lon >= 0:
        if lon < 9:
            return 31
        if lon < 21:
            return 33
        if lon < 33:
            return 35
        if lon < 42:
            return 37
    return min(zone, 60)


def central_meridian(zone):
    return (zone - 1) * 6 - 180 + 3


def latlon_to_utm(lat, lon, zone=None):
    """Project WGS84 ``lat, lon`` to UTM.

    Returns ``(east, north, zone, northern)``. ``zone`` may be forced, which
    is how points near a zone edge are kept in a neighbour's grid.
    """
    if not -80.0 <= lat <= 84.0:
        raise UnsupportedLatitudeError(f"latitude {lat} outside UTM range [-80, 84]")
    if zone is None:
        zone = utm_zone_for(lat, lon)
    elif not 1 <= zone <= 60:
        raise GeoError(f"UTM zone {zone} out of range 1..60")
    phi = math.radians(lat)
    dlam = math.radians(((lon - central_meridian(zone) + 180.0) % 360.0) - 180.0)

    s = math.sin(phi)
    t = math.sinh(math.atanh(s) - _CONF * math.atanh(_CONF * s))
    xi_p = math.atan2(t, math.cos(dlam))
    eta_p = math.atanh(math.sin(dlam) / math.sqrt(1 + t * t))
    xi, eta = xi_p, eta_p
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += a * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)

    northern = lat >= 0
    east = _FALSE_EASTING + _K0 * _RECT_A * eta
    north = _K0 * _RECT_A * xi + (0.0 if northern else _FALSE_NORTHING_SOUTH)
    return east, north, zone, northern


def utm_to_latlon(east, north, zone, northern):
    """Inverse of :func:`latlon_to_utm`."""
    if not 1 <= zone <= 60:
        raise GeoError(f"UTM zone {zone} out of range 1..60")
    y = north if northern else north - _FALSE_NORTHING_SOUTH
    xi = y / (_K0 * _RECT_A)
    eta = (east - _FALSE_EASTING) / (_K0 * _RECT_A)
    xi_p, eta_p = xi, eta
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= b * math.cos(2 * j * xi) * math.sinh(2 * j * eta)
    chi = math.asin(math.sin(xi_p) / math.cosh(eta_p))
    phi = chi
    for j, d in enumerate(_DELTA, start=1):
        phi += d * math.sin(2 * j * chi)
    lam = math.radians(central_meridian(zone)) + math.atan2(math.sinh(eta_p), math.cos(xi_p))
    lon = ((math.degrees(lam) + 180.0) % 360.0) - 180.0
    return math.degrees(phi), lon


def ground_distance_m(a, b):
    """Ground-truth distance between two records.

    Planar UTM distance when both records sit in the same zone and
    hemisphere, haversine otherwise.
    """
    if a.utm_zone is not None and a.utm_zone == b.utm_zone and a.utm_northern == b.utm_northern:
        return math.hypot(a.utm_east - b.utm_east, a.utm_north - b.utm_north)
    return haversine_m((a.lat, a.lon), (b.lat, b.lon))


class _PoolGeometry:
    """Column arrays for vectorized distances from one record to many."""

    def __init__(self, records):
        self.ids = [r.id for r in records]
        self.lat = np.array([r.lat for r in records], dtype=np.float64)
        self.lon = np.array([r.lon for r in records], dtype=np.float64)
        self.east = np.array([np.nan if r.utm_east is None else r.utm_east for r in records])
        self.north = np.array([np.nan if r.utm_north is None else r.utm_north for r in records])
        self.zone = np.array([-1 if r.utm_zone is None else r.utm_zone * (1 if r.utm_northern else -1)
                              for r in records], dtype=np.int64)

    def distances_from(self, rec):
        d = _haversine_vec(rec.lat, rec.lon, self.lat, self.lon)
        if rec.utm_zone is not None:
            key = rec.utm_zone * (1 if rec.utm_northern else -1)
            same = self.zone == key
            if same.any():
                d[same] = np.hypot(self.east[same] - rec.utm_east, self.north[same] - rec.utm_north)
        return d


@dataclass(frozen=True)
class GeoClass:
    cell_east_idx: int
    cell_north_idx: int
    heading_bin: int
    member_ids: tuple = field(default_factory=tuple)

    @property
    def key(self):
        return (self.cell_east_idx, self.cell_north_idx, self.heading_bin)

    def to_json(self):
        return {
            "cell_east_idx": self.cell_east_idx,
            "cell_north_idx": self.cell_north_idx,
            "heading_bin": self.heading_bin,
            "member_ids": list(self.member_ids),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["cell_east_idx"]), int(obj["cell_north_idx"]),
                   int(obj["heading_bin"]), tuple(obj["member_ids"]))


def partition_classes(corpus, cell_size_m=10.0, heading_bins=12):
    """Split database records into square UTM cells times heading bins.

    Classes come back sorted by ``(east_idx, north_idx, heading_bin)`` with
    member ids sorted, so the output is a deterministic function of the input
    set. A corpus spanning several UTM zones is rejected.
    """
    if not cell_size_m > 0:
        raise GeoError("cell_size_m must be positive")
    if heading_bins < 1:
        raise GeoError("heading_bins must be >= 1")
    bin_width = 360.0 / heading_bins
    groups = {}
    zones = set()
    for rec in corpus.database():
        if rec.utm_east is None or rec.utm_north is None:
            raise GeoError(f"record {rec.id!r} has no UTM coordinates")
        zones.add((rec.utm_zone, rec.utm_northern))
        if rec.heading_deg is None:
            if heading_bins > 1:
                raise GeoError(f"record {rec.id!r} has no heading but heading_bins={heading_bins}")
            hbin = 0
        else:
            hbin = min(int(math.floor(rec.heading_deg / bin_width)), heading_bins - 1)
        key = (int(math.floor(rec.utm_east / cell_size_m)),
               int(math.floor(rec.utm_north / cell_size_m)),
               hbin)
        groups.setdefault(key, []).append(rec.id)
    if len(zones) > 1:
        raise GeoError(f"corpus spans several UTM zones {sorted(zones)}; stitching is unsupported")
    return [GeoClass(*key, tuple(sorted(ids))) for key, ids in sorted(groups.items())]


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    positive_id: str
    negative_id: str

    def to_json(self):
        return {"anchor_id": self.anchor_id, "positive_id": self.positive_id,
                "negative_id": self.negative_id}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["anchor_id"], obj["positive_id"], obj["negative_id"])


@dataclass
class MiningResult:
    triplets: list
    skipped: list  # anchor ids with no positive (or no negative) in range


def _anchor_rng(seed, anchor_id):
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(anchor_id.encode("utf-8"))])


def sample_pairs(n_pos, n_neg, per_anchor, rng):
    """Draw up to ``per_anchor`` distinct (positive, negative) index pairs.

    Pairs are indexed in row-major order over the positive x negative
    product and returned sorted by that index.
    """
    total = n_pos * n_neg
    k = min(per_anchor, total)
    flat = np.sort(rng.choice(total, size=k, replace=False))
    return [(int(i // n_neg), int(i % n_neg)) for i in flat]


def mine_triplets(corpus, r_pos=10.0, r_neg=25.0, per_anchor=10, seed=42):
    """GPS-based triplets: query anchors, database positives and negatives.

    Positives lie within ``r_pos`` of the anchor, negatives strictly beyond
    ``r_neg``. Each anchor draws from its own seeded stream and pools are
    id-sorted, so the result does not depend on record order or on how many
    workers run.
    """
    if not r_pos < r_neg:
        raise GeoError(f"r_pos ({r_pos}) must be smaller than r_neg ({r_neg})")
    if per_anchor < 1:
        raise GeoError("per_anchor must be >= 1")
    db = sorted(corpus.database(), key=lambda r: r.id)
    if not db:
        raise GeoError("empty database pool")
    pool = _PoolGeometry(db)
    anchors = sorted(corpus.queries(), key=lambda r: r.id)

    def mine_one(anchor):
        d = pool.distances_from(anchor)
        pos = np.flatnonzero(d <= r_pos)
        neg = np.flatnonzero(d > r_neg)
        if len(pos) == 0 or len(neg) == 0:
            return None
        pairs = sample_pairs(len(pos), len(neg), per_anchor, _anchor_rng(seed, anchor.id))
        return [Triplet(anchor.id, pool.ids[pos[i]], pool.ids[neg[j]]) for i, j in pairs]

    triplets, skipped = [], []
    for anchor, mined in zip(anchors, ordered_map(mine_one, anchors)):
        if mined is None:
            skipped.append(anchor.id)
        else:
            triplets.extend(mined)
    return MiningResult(triplets, skipped)


def write_jsonl(path, items):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), sort_keys=True) + "\n")


def read_triplets(path):
    with open(path, encoding="utf-8") as fh:
        return [Triplet.from_json(json.loads(line)) for line in fh if line.strip()]


def read_classes(path):
    with open(path, encoding="utf-8") as fh:
        return [GeoClass.from_json(json.loads(line)) for line in fh if line.strip()]
