"""Image records, corpora and the JSONL metadata format.

One JSON object per line. Required keys are ``id``, ``path``, ``lat``,
``lon`` and ``role``; ``heading_deg``, ``timestamp_utc``, ``condition``,
``utm_east``, ``utm_north`` and ``utm_zone`` are optional. Missing UTM
fields are computed from lat/lon at load time.
"""

import enum
import json
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from nprkit import geo
from nprkit.errors import CorpusError, UnsupportedLatitudeError


class Condition(str, enum.Enum):
    DAY = "Day"
    SUNSET = "Sunset"
    NIGHT = "Night"
    UNKNOWN = "Unknown"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown condition {value!r}")


class Role(str, enum.Enum):
    DATABASE = "Database"
    QUERY = "Query"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown role {value!r}")


def parse_instant(text):
    """Parse an RFC 3339 timestamp into an aware UTC datetime.

    Naive timestamps are taken to be UTC already.
    """
    if isinstance(text, datetime):
        dt = text
    else:
        s = str(text).strip()
        if s.endswith(("Z", "z")):
            s = s[:-1] + "+00:00"
        dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_instant(dt):
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    lat: float
    lon: float
    role: Role
    image_root: Path = Path(".")
    heading_deg: float | None = None
    timestamp_utc: datetime | None = None
    condition: Condition = Condition.UNKNOWN
    utm_east: float | None = None
    utm_north: float | None = None
    utm_zone: int | None = None
    utm_northern: bool | None = None

    @property
    def image_path(self):
        p = Path(self.path)
        return p if p.is_absolute() else Path(self.image_root) / p

    def to_json(self):
        obj = {"id": self.id, "path": self.path, "lat": self.lat, "lon": self.lon,
               "role": self.role.value}
        if self.heading_deg is not None:
            obj["heading_deg"] = self.heading_deg
        if self.timestamp_utc is not None:
            obj["timestamp_utc"] = format_instant(self.timestamp_utc)
        if self.condition is not Condition.UNKNOWN:
            obj["condition"] = self.condition.value
        if self.utm_zone is not None:
            obj["utm_east"] = self.utm_east
            obj["utm_north"] = self.utm_north
            obj["utm_zone"] = f"{self.utm_zone}{'N' if self.utm_northern else 'S'}"
        return obj


def make_record(id, path, lat, lon, role, image_root=Path("."), heading_deg=None,
                timestamp_utc=None, condition=Condition.UNKNOWN,
                utm_east=None, utm_north=None, utm_zone=None):
    """Validate and normalize one record, filling in UTM when absent.

    ``utm_zone`` accepts an integer (hemisphere taken from latitude) or a
    string such as ``"54N"``. Raises ``ValueError`` naming the bad field.
    """
    if not isinstance(id, str) or not id:
        raise ValueError("id: must be a non-empty string")
    if not isinstance(path, str) or not path:
        raise ValueError("path: must be a non-empty string")
    lat, lon = float(lat), float(lon)
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"lat: {lat} out of range [-90, 90]")
    if not -180.0 <= lon < 180.0:
        raise ValueError(f"lon: {lon} out of range [-180, 180)")
    try:
        role = Role.parse(role)
    except ValueError as exc:
        raise ValueError(f"role: {exc}") from None
    if heading_deg is not None:
        heading_deg = float(heading_deg)
        if not math.isfinite(heading_deg):
            raise ValueError("heading_deg: not finite")
        heading_deg = heading_deg % 360.0
    if timestamp_utc is not None:
        try:
            timestamp_utc = parse_instant(timestamp_utc)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"timestamp_utc: {exc}") from None
    try:
        condition = Condition.parse(condition) if condition is not None else Condition.UNKNOWN
    except ValueError as exc:
        raise ValueError(f"condition: {exc}") from None

    northern = None
    if utm_zone is not None:
        if isinstance(utm_zone, str) and utm_zone[-1:].upper() in ("N", "S"):
            northern = utm_zone[-1].upper() == "N"
            utm_zone = utm_zone[:-1]
        try:
            utm_zone = int(utm_zone)
        except ValueError:
            raise ValueError(f"utm_zone: cannot parse {utm_zone!r}") from None
        if not 1 <= utm_zone <= 60:
            raise ValueError(f"utm_zone: {utm_zone} out of range 1..60")
        if northern is None:
            northern = lat >= 0
    if utm_east is None and utm_north is None:
        try:
            utm_east, utm_north, utm_zone, northern = geo.latlon_to_utm(lat, lon, utm_zone)
        except UnsupportedLatitudeError:
            utm_zone = northern = None
    elif utm_east is None or utm_north is None or utm_zone is None:
        raise ValueError("utm_east/utm_north/utm_zone: must be given together")
    else:
        utm_east, utm_north = float(utm_east), float(utm_north)
        back = geo.utm_to_latlon(utm_east, utm_north, utm_zone, northern)
        err = geo.haversine_m((lat, lon), back)
        if err > 1.0:
            raise ValueError(f"utm_east/utm_north: disagree with lat/lon by {err:.2f} m")

    return ImageRecord(id=id, path=path, lat=lat, lon=lon, role=role,
                       image_root=Path(image_root), heading_deg=heading_deg,
                       timestamp_utc=timestamp_utc, condition=condition,
                       utm_east=utm_east, utm_north=utm_north, utm_zone=utm_zone,
                       utm_northern=northern)


_REQUIRED = ("id", "path", "lat", "lon", "role")
_OPTIONAL = ("heading_deg", "timestamp_utc", "condition", "utm_east", "utm_north", "utm_zone")


@dataclass(frozen=True)
class Corpus:
    records: tuple
    name: str = "corpus"

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise CorpusError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    @cached_property
    def by_id(self):
        return {r.id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, record_id):
        return self.by_id[record_id]

    def __contains__(self, record_id):
        return record_id in self.by_id

    def database(self):
        return [r for r in self.records if r.role is Role.DATABASE]

    def queries(self):
        return [r for r in self.records if r.role is Role.QUERY]

    def subset(self, ids, name=None):
        keep = set(ids)
        return Corpus(tuple(r for r in self.records if r.id in keep), name or self.name)


def load_corpus(metadata_path, image_root):
    """Read a JSONL metadata file; image bytes are not touched."""
    metadata_path, image_root = Path(metadata_path), Path(image_root)
    if not metadata_path.is_file():
        raise CorpusError(f"metadata file {metadata_path} does not exist")
    if not image_root.is_dir():
        raise CorpusError(f"image root {image_root} does not exist")
    records, first_line = [], {}
    with open(metadata_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            for key in _REQUIRED:
                if key not in obj:
                    raise CorpusError(f"line {lineno}: missing required field {key!r}")
            kwargs = {k: obj[k] for k in _REQUIRED + _OPTIONAL if obj.get(k) is not None}
            try:
                rec = make_record(image_root=image_root, **kwargs)
            except ValueError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            if rec.id in first_line:
                raise CorpusError(f"line {lineno}: duplicate id {rec.id!r} "
                                  f"(first seen on line {first_line[rec.id]})")
            first_line[rec.id] = lineno
            records.append(rec)
    return Corpus(tuple(records), metadata_path.stem)


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def split_by_condition(corpus, labeler=None):
    """Bucket query ids by condition.

    ``labeler`` maps a record to a :class:`Condition` and defaults to the
    stored label. Every bucket is present, possibly empty.
    """
    if labeler is None:
        labeler = lambda r: r.condition  # noqa: E731
    buckets = {c: [] for c in Condition}
    for r in corpus.queries():
        buckets[Condition.parse(labeler(r))].append(r.id)
    return buckets


def load_image(path):
    """Decode an image file to an ``H x W x 3`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def with_condition(record, condition):
    return replace(record, condition=Condition.parse(condition))
