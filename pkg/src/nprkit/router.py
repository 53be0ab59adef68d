"""Divide-and-conquer routing: send each query to the day or the night
pipeline, then merge the per-pipeline results and reports.
"""

import csv
import threading
from dataclasses import dataclass, field

from nprkit import solar
from nprkit._parallel import ordered_map
from nprkit.errors import DataError, RoutingError
from nprkit.photometry import DEFAULT_BRIGHTNESS_THRESHOLD, DayNight, classify_by_brightness, mean_luminance
from nprkit.retrieval import RetrievalError, knn, report_from_hits

RULE_BRIGHTNESS = "brightness"
RULE_SOLAR = "solar-time"


@dataclass(frozen=True)
class BrightnessMode:
    threshold: float = DEFAULT_BRIGHTNESS_THRESHOLD


@dataclass(frozen=True)
class SolarTimeMode:
    solar_cfg: solar.SolarConfig = field(default_factory=solar.SolarConfig)


@dataclass(frozen=True)
class HybridMode:
    """Sun position when the query carries a timestamp, brightness otherwise."""
    solar_cfg: solar.SolarConfig = field(default_factory=solar.SolarConfig)
    threshold: float = DEFAULT_BRIGHTNESS_THRESHOLD


@dataclass(frozen=True)
class RouteConfig:
    mode: object = field(default_factory=HybridMode)
    day_pipeline_id: str = "day"
    night_pipeline_id: str = "night"


@dataclass(frozen=True)
class RouteDecision:
    label: DayNight
    rule: str
    value: float  # mean luminance or solar elevation in degrees, per rule
    note: str = ""


@dataclass(frozen=True)
class RouteTag:
    query_id: str
    route: str  # pipeline id
    label: DayNight
    rule: str
    value: float


def _by_brightness(image, threshold):
    if callable(image):
        image = image()
    lum = mean_luminance(image)
    label = classify_by_brightness(lum, threshold)
    return RouteDecision(label, RULE_BRIGHTNESS, lum, f"mean luminance {lum:.4f} vs {threshold}")


def _by_solar_time(record, cfg):
    night = solar.is_night(record, cfg)
    elev = solar.solar_elevation_deg(record.lat, record.lon, record.timestamp_utc)
    label = DayNight.NIGHT if night else DayNight.DAY
    return RouteDecision(label, RULE_SOLAR, elev, f"sun elevation {elev:.2f} deg")


def classify_query(record, image, cfg):
    """Decide Day or Night for one query.

    ``image`` may be an array, a zero-argument loader, or ``None``. Raises
    :class:`RoutingError` when the configured rule cannot be applied.
    """
    mode = cfg.mode if isinstance(cfg, RouteConfig) else cfg
    if isinstance(mode, BrightnessMode):
        if image is None:
            raise RoutingError(f"query {record.id!r}: brightness routing needs the image")
        return _by_brightness(image, mode.threshold)
    if isinstance(mode, SolarTimeMode):
        if record.timestamp_utc is None:
            raise RoutingError(f"query {record.id!r}: solar-time routing needs a timestamp")
        return _by_solar_time(record, mode.solar_cfg)
    if isinstance(mode, HybridMode):
        if record.timestamp_utc is not None:
            return _by_solar_time(record, mode.solar_cfg)
        if image is not None:
            return _by_brightness(image, mode.threshold)
        raise RoutingError(f"query {record.id!r}: no timestamp and no image to route on")
    raise RoutingError(f"unknown routing mode {mode!r}")


class Pipeline:
    """A registered embedding + index pair.

    ``embed`` maps a query record to its vector; the common case of
    precomputed query embeddings is covered by :meth:`from_embeddings`.
    """

    def __init__(self, index, embed):
        self.index = index
        self.embed = embed

    @classmethod
    def from_embeddings(cls, index, query_embeddings):
        def lookup(record):
            try:
                return query_embeddings[record.id]
            except KeyError:
                raise RetrievalError(f"no embedding for query {record.id!r}") from None
        return cls(index, lookup)

    def search_one(self, record, k):
        return knn(self.index, self.embed(record), k, query_id=record.id)


@dataclass
class RoutedBatch:
    results: list  # RetrievalResult, query-id order
    tags: dict  # query id -> RouteTag
    errors: dict  # query id -> message


class Router:
    """Dispatches queries to pipelines. Decisions are cached per query id."""

    def __init__(self, pipelines, cfg=RouteConfig()):
        for pid in (cfg.day_pipeline_id, cfg.night_pipeline_id):
            if pid not in pipelines:
                raise RoutingError(f"pipeline {pid!r} is not registered")
        self.pipelines = dict(pipelines)
        self.cfg = cfg
        self._cache = {}
        self._lock = threading.Lock()

    def classify(self, record, image=None):
        with self._lock:
            hit = self._cache.get(record.id)
        if hit is not None:
            return hit
        decision = classify_query(record, image, self.cfg)
        with self._lock:
            self._cache.setdefault(record.id, decision)
        return decision

    def pipeline_for(self, decision):
        return (self.cfg.night_pipeline_id if decision.label is DayNight.NIGHT
                else self.cfg.day_pipeline_id)

    def route_and_search(self, queries, k, image_loader=None):
        """Answer each query with exactly one pipeline.

        ``image_loader(record)`` is called only when a brightness rule
        fires. A query that cannot be routed or searched is reported in
        ``errors`` and the rest of the batch continues.
        """
        queries = sorted(queries, key=lambda r: r.id)

        def one(rec):
            image = (lambda: image_loader(rec)) if image_loader is not None else None
            try:
                decision = self.classify(rec, image)
                pid = self.pipeline_for(decision)
                result = self.pipelines[pid].search_one(rec, k)
            except (DataError, OSError) as exc:
                return rec.id, None, None, str(exc)
            return rec.id, result, RouteTag(rec.id, pid, decision.label, decision.rule, decision.value), None

        results, tags, errors = [], {}, {}
        for qid, result, tag, err in ordered_map(one, queries):
            if err is not None:
                errors[qid] = err
            else:
                results.append(result)
                tags[qid] = tag
        return RoutedBatch(results, tags, errors)


def route_and_search(queries, router, k, image_loader=None):
    return router.route_and_search(queries, k, image_loader)


def dc_report(day_report, night_report, route_tags):
    """Recombine two full reports according to per-query routes.

    Queries routed Day take their outcome from ``day_report``, queries
    routed Night from ``night_report``; buckets are recomputed over the
    union. ``route_tags`` is a mapping or a sequence of :class:`RouteTag`.
    """
    tags = list(route_tags.values()) if isinstance(route_tags, dict) else list(route_tags)
    seen = set()
    for t in tags:
        if t.query_id in seen:
            raise RoutingError(f"query {t.query_id!r} is tagged more than once")
        seen.add(t.query_id)
    if day_report.threshold_m != night_report.threshold_m:
        raise RoutingError("day and night reports use different distance thresholds")
    first_hit, bucket, provenance = {}, {}, {}
    for t in tags:
        src = night_report if t.label is DayNight.NIGHT else day_report
        if t.query_id not in src.first_hit:
            raise RoutingError(f"query {t.query_id!r} routed {t.label.value} is missing from that report")
        first_hit[t.query_id] = src.first_hit[t.query_id]
        bucket[t.query_id] = src.query_bucket.get(t.query_id)
        provenance[t.query_id] = t.route
    n_values = tuple(sorted(set(day_report.n_values) & set(night_report.n_values)))
    return report_from_hits(first_hit, bucket, n_values, day_report.threshold_m,
                            provenance=provenance)


def write_route_tags(path, tags):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "route", "rule", "luminance_or_sun_elevation"])
        for qid in sorted(tags):
            t = tags[qid]
            w.writerow([t.query_id, t.route, t.rule, repr(float(t.value))])
