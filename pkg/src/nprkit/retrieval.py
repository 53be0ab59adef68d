"""Exact cosine retrieval and the recall@N evaluation protocol."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from nprkit import solar
from nprkit._parallel import ordered_map
from nprkit.corpus import Condition
from nprkit.errors import RetrievalError
from nprkit.geo import ground_distance_m

DEFAULT_N_VALUES = (1, 5, 10, 20)
DEFAULT_THRESHOLD_M = 25.0
UNIT_NORM_TOL = 1e-5
# Each query is scored with its own matrix-vector product, so its scores
# never depend on which other queries share a batch or on the worker count.
_CHUNK = 64

BUCKETS = ("All", "Day", "Sunset", "Night")
SUNSET_BEFORE = "Sunset/before"
SUNSET_AFTER = "Sunset/after"


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple
    matrix: np.ndarray  # count x dim, float32, unit rows

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.ids)


def build_index(embeddings):
    """Index ``{id: unit vector}`` with rows in ascending id order."""
    if isinstance(embeddings, dict):
        items = list(embeddings.items())
    else:
        items = list(embeddings)
    if not items:
        raise RetrievalError("cannot build an index from no embeddings")
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise RetrievalError(f"duplicate id {dup!r}")
    dims = {np.asarray(v).shape for _, v in items}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise RetrievalError(f"embeddings have mixed shapes {sorted(dims)}")
    items.sort(key=lambda kv: kv[0])
    matrix = np.stack([np.asarray(v, dtype=np.float32) for _, v in items])
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if len(bad):
        raise RetrievalError(f"embedding {items[bad[0]][0]!r} is not unit norm ({norms[bad[0]]:.6g})")
    return RetrievalIndex(tuple(i for i, _ in items), matrix)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple  # ((db_id, cosine), ...) best first
    truncated: bool = False

    def to_json(self):
        return {"query_id": self.query_id,
                "ranked": [[i, s] for i, s in self.ranked],
                "truncated": self.truncated}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["query_id"], tuple((i, float(s)) for i, s in obj["ranked"]),
                   bool(obj.get("truncated", False)))


def _top_k(scores, k):
    """Indices of the k best scores, ties broken by lower index (= lower id)."""
    n = len(scores)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def _rank_one(index, qid, q, k):
    scores = index.matrix @ q
    top = _top_k(scores, min(k, len(index)))
    return RetrievalResult(qid, tuple((index.ids[j], float(scores[j])) for j in top),
                           truncated=k > len(index))


def knn(index, query, k, query_id=""):
    """Exact top-k by cosine similarity.

    When ``k`` exceeds the database size the full ranking comes back with
    ``truncated`` set.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (index.dim,):
        raise RetrievalError(f"query has shape {q.shape}, index dimension is {index.dim}")
    return _rank_one(index, query_id, q, k)


def search(index, queries, k):
    """Batch :func:`knn` over ``{query_id: vector}``; results in query-id order."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    qids = sorted(queries)
    for q in qids:
        if np.shape(queries[q]) != (index.dim,):
            raise RetrievalError(f"query {q!r} has shape {np.shape(queries[q])}, "
                                 f"index dimension is {index.dim}")
    chunks = [qids[i:i + _CHUNK] for i in range(0, len(qids), _CHUNK)]

    def run(chunk):
        return [_rank_one(index, q, np.asarray(queries[q], dtype=np.float32), k) for q in chunk]

    return [r for part in ordered_map(run, chunks) for r in part]


# --- evaluation ---

@dataclass
class BucketStats:
    count: int
    recall: dict  # N -> fraction, NaN when count == 0


@dataclass
class EvalReport:
    """Recall@N per condition bucket.

    ``first_hit`` keeps each query's 1-based rank of the first correct
    database image (``None`` if none retrieved), so any bucket can be
    recomputed from it.
    """
    n_values: tuple
    threshold_m: float
    buckets: dict  # bucket name -> BucketStats
    first_hit: dict = field(default_factory=dict)
    query_bucket: dict = field(default_factory=dict)  # query id -> bucket name
    provenance: dict = field(default_factory=dict)  # query id -> free-form tag

    def recall(self, bucket, n):
        return self.buckets[bucket].recall[n]

    def macro_average(self, n):
        """Unweighted mean of the Day, Sunset and Night recalls that have queries."""
        vals = [self.buckets[b].recall[n] for b in ("Day", "Sunset", "Night")
                if b in self.buckets and self.buckets[b].count > 0]
        return float(np.mean(vals)) if vals else math.nan


def _stats(first_hits, n_values):
    count = len(first_hits)
    recall = {}
    for n in n_values:
        hits = sum(1 for r in first_hits if r is not None and r <= n)
        recall[n] = hits / count if count else math.nan
    return BucketStats(count, recall)


def first_hit_rank(result, records, threshold_m):
    """1-based rank of the first database image within ``threshold_m`` of the query."""
    try:
        q = records[result.query_id]
    except KeyError:
        raise RetrievalError(f"unknown query id {result.query_id!r}") from None
    for rank, (db_id, _) in enumerate(result.ranked, start=1):
        try:
            d = records[db_id]
        except KeyError:
            raise RetrievalError(f"unknown database id {db_id!r}") from None
        if ground_distance_m(q, d) <= threshold_m:
            return rank
    return None


def _bucket_of(condition):
    c = Condition.parse(condition)
    return c.value if c is not Condition.UNKNOWN else None


def report_from_hits(first_hit, query_bucket, n_values, threshold_m, extra_buckets=None,
                     provenance=None):
    n_values = tuple(sorted(set(int(n) for n in n_values)))
    buckets = {"All": _stats(list(first_hit.values()), n_values)}
    for b in BUCKETS[1:]:
        buckets[b] = _stats([first_hit[q] for q in first_hit if query_bucket.get(q) == b], n_values)
    for name, qids in (extra_buckets or {}).items():
        buckets[name] = _stats([first_hit[q] for q in qids], n_values)
    return EvalReport(n_values, threshold_m, buckets, dict(first_hit), dict(query_bucket),
                      dict(provenance or {}))


def recall_at_n(results, records, n_values=DEFAULT_N_VALUES, threshold_m=DEFAULT_THRESHOLD_M):
    """Fraction of queries with a correct database image in the top N.

    ``records`` is a :class:`~nprkit.corpus.Corpus` (or any id -> record
    mapping). Queries are bucketed by their stored condition; Unknown
    queries only count toward All.
    """
    first_hit, query_bucket = {}, {}
    for res in results:
        if res.query_id in first_hit:
            raise RetrievalError(f"query {res.query_id!r} appears twice")
        first_hit[res.query_id] = first_hit_rank(res, records, threshold_m)
        query_bucket[res.query_id] = _bucket_of(records[res.query_id].condition)
    return report_from_hits(first_hit, query_bucket, n_values, threshold_m)


def sunset_split_eval(results, records, solar_cfg=solar.SolarConfig(),
                      n_values=DEFAULT_N_VALUES, threshold_m=DEFAULT_THRESHOLD_M):
    """Evaluate with Sunset queries split at local sunset, then merged.

    Sunset queries timestamped before ``sunset + offset`` go to
    ``Sunset/before``, the rest to ``Sunset/after``. The Sunset bucket is the
    query-count-weighted mean of the two.
    """
    report = recall_at_n(results, records, n_values, threshold_m)
    sunset_ids = [q for q, b in report.query_bucket.items() if b == "Sunset"]
    missing = sorted(q for q in sunset_ids if records[q].timestamp_utc is None)
    if missing:
        raise RetrievalError(f"sunset queries without timestamps: {', '.join(missing)}")
    after = [q for q in sunset_ids if solar.is_night(records[q], solar_cfg)]
    after_set = set(after)
    before = [q for q in sunset_ids if q not in after_set]
    split = report_from_hits(report.first_hit, report.query_bucket, report.n_values, threshold_m,
                             extra_buckets={SUNSET_BEFORE: before, SUNSET_AFTER: after})
    sb, sa = split.buckets[SUNSET_BEFORE], split.buckets[SUNSET_AFTER]
    merged = {}
    for n in split.n_values:
        parts = [(s.count, s.recall[n]) for s in (sb, sa) if s.count]
        total = sum(c for c, _ in parts)
        merged[n] = sum(c * r for c, r in parts) / total if total else math.nan
    split.buckets["Sunset"] = BucketStats(sb.count + sa.count, merged)
    return split


# --- serialization ---

def write_results(path, results):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_results(path):
    with open(path, encoding="utf-8") as fh:
        return [RetrievalResult.from_json(json.loads(line)) for line in fh if line.strip()]


def _fmt(x):
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_report_csv(path, report):
    """Columns ``bucket, N, recall, count``; empty recall for empty buckets."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "N", "recall", "count"])
        for name, stats in report.buckets.items():
            for n in report.n_values:
                w.writerow([name, n, _fmt(stats.recall[n]), stats.count])
        for n in report.n_values:
            w.writerow(["MacroAvg", n, _fmt(report.macro_average(n)), ""])


def read_report_csv(path):
    """Parse a report CSV into ``{bucket: {N: recall}}`` plus counts."""
    table, counts = {}, {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            n = int(row["N"])
            table.setdefault(row["bucket"], {})[n] = float(row["recall"]) if row["recall"] else math.nan
            if row["count"]:
                counts[row["bucket"]] = int(row["count"])
    return table, counts


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def recall_curve_svg(series, title="Recall@N", width=480, height=320):
    """Render recall-vs-N polylines. ``series`` maps a label to ``{N: recall}``."""
    pad_l, pad_r, pad_t, pad_b = 50, 130, 30, 40
    ns = sorted({n for curve in series.values() for n in curve})
    if not ns:
        ns = [1]
    x_lo, x_hi = math.log(min(ns)), math.log(max(ns))
    span = x_hi - x_lo or 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(n):
        return pad_l + (math.log(n) - x_lo) / span * pw

    def py(r):
        return pad_t + (1.0 - r) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for r in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<line x1="{pad_l}" y1="{py(r):.1f}" x2="{pad_l + pw}" y2="{py(r):.1f}" '
                   f'stroke="#ddd"/><text x="{pad_l - 6}" y="{py(r) + 4:.1f}" '
                   f'text-anchor="end">{r:.2f}</text>')
    for n in ns:
        out.append(f'<text x="{px(n):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{n}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">N</text>')
    for k, (label, curve) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = [(n, r) for n, r in sorted(curve.items()) if not math.isnan(r)]
        if pts:
            path = " ".join(f"{px(n):.1f},{py(r):.1f}" for n, r in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = pad_t + 14 + 16 * k
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly - 4}" x2="{pad_l + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{pad_l + pw + 32}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
