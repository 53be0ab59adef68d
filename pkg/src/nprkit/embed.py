"""Image embeddings: a handcrafted baseline descriptor, the NPRE interchange
format, and a linear projection head trained with the metric losses.

NPRE layout (little-endian)::

    b"NPRE" | version u8 = 1 | dim u32 | count u32
    count x ( id_len u16 | id utf-8 bytes | dim x float32 )
"""

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from nprkit import NPRE_VERSION
from nprkit._parallel import ordered_map
from nprkit.errors import (
    DataError,
    NpreFormatError,
    NpreMagicError,
    NpreTruncatedError,
    NpreValueError,
    TrainingError,
)
from nprkit.geo import GeoClass, Triplet
from nprkit.losses import LmclConfig, lmcl_loss, triplet_loss
from nprkit.photometry import luma

DESCRIPTOR_DIM = 320
_TINY = 8
_HIST_BINS = 16
_GRID = 4
_ORIENT_BINS = 13
_EPS = 1e-12

NPRE_MAGIC = b"NPRE"
_HEADER = struct.Struct("<4sBII")


def normalize(v, axis=-1):
    v = np.asarray(v)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, _EPS)


def _cell_edges(n, parts):
    return np.linspace(0, n, parts + 1).round().astype(int)


def _cell_means(a, parts):
    h, w = a.shape
    ye, xe = _cell_edges(h, parts), _cell_edges(w, parts)
    out = np.empty((parts, parts))
    for i in range(parts):
        for j in range(parts):
            cell = a[ye[i]:max(ye[i + 1], ye[i] + 1), xe[j]:max(xe[j + 1], xe[j] + 1)]
            out[i, j] = cell.mean()
    return out


def baseline_descriptor(image):
    """Fixed 320-d descriptor of an RGB image.

    Concatenates an 8x8 grayscale tiny image (64), 16-bin histograms of each
    colour channel (48) and magnitude-weighted unsigned gradient orientation
    histograms over a 4x4 grid with 13 bins (208). Each block is L2
    normalized before concatenation and the whole vector is unit length.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 2 or image.shape[1] < 2:
        raise DataError(f"expected an RGB image of at least 2x2, got shape {image.shape}")
    gray = luma(image)
    h, w = gray.shape

    tiny = _cell_means(gray, _TINY).ravel()

    hist = np.concatenate([
        np.bincount(image[..., c].ravel().astype(np.int64) * _HIST_BINS // 256, minlength=_HIST_BINS)
        for c in range(3)
    ]).astype(np.float64) / (h * w)

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    obin = np.minimum((ang / np.pi * _ORIENT_BINS).astype(np.int64), _ORIENT_BINS - 1)
    ye, xe = _cell_edges(h, _GRID), _cell_edges(w, _GRID)
    cell_y = np.searchsorted(ye, np.arange(h), side="right") - 1
    cell_x = np.searchsorted(xe, np.arange(w), side="right") - 1
    flat = (cell_y[:, None] * _GRID + cell_x[None, :]) * _ORIENT_BINS + obin
    orient = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=_GRID * _GRID * _ORIENT_BINS)

    blocks = [normalize(b) for b in (tiny, hist, orient)]
    return normalize(np.concatenate(blocks)).astype(np.float32)


def describe_images(images):
    """Baseline descriptors for ``{id: image}`` (or ``{id: loader}``) in parallel."""
    ids = sorted(images)

    def one(i):
        im = images[i]
        return baseline_descriptor(im() if callable(im) else im)

    return dict(zip(ids, ordered_map(one, ids)))


# --- NPRE interchange format ---

def write_embeddings(path, embeddings):
    """Write ``{id: vector}`` as NPRE, ids sorted."""
    ids = sorted(embeddings)
    if not ids:
        raise NpreFormatError("nothing to write")
    dim = int(np.asarray(embeddings[ids[0]]).shape[-1])
    if dim == 0:
        raise NpreFormatError("embedding dimension must be positive")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(NPRE_MAGIC, NPRE_VERSION, dim, len(ids)))
        for i in ids:
            v = np.asarray(embeddings[i], dtype="<f4")
            if v.shape != (dim,):
                raise NpreFormatError(f"vector {i!r} has shape {v.shape}, expected ({dim},)")
            raw = i.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise NpreFormatError(f"id {i[:32]!r}... longer than 65535 bytes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(v.tobytes())


def read_embeddings(path, normalize_vectors=True):
    """Read an NPRE file into ``{id: float32 vector}``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != NPRE_MAGIC:
        raise NpreMagicError(f"{path}: not an NPRE file (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise NpreTruncatedError(f"{path}: header truncated", len(data))
    _, version, dim, count = _HEADER.unpack_from(data, 0)
    if version != NPRE_VERSION:
        raise NpreFormatError(f"{path}: unsupported NPRE version {version}")
    if dim == 0:
        raise NpreFormatError(f"{path}: header dimension is 0")
    out = {}
    off = _HEADER.size
    vec_bytes = 4 * dim
    for k in range(count):
        if off + 2 > len(data):
            raise NpreTruncatedError(f"{path}: record {k} id length truncated", off)
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + n > len(data):
            raise NpreTruncatedError(f"{path}: record {k} id truncated", off)
        try:
            rid = data[off:off + n].decode("utf-8")
        except UnicodeDecodeError:
            raise NpreFormatError(f"{path}: record {k} id is not valid UTF-8") from None
        off += n
        if off + vec_bytes > len(data):
            raise NpreTruncatedError(f"{path}: record {k} ({rid!r}) vector truncated", off)
        v = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise NpreValueError(f"{path}: record {k} ({rid!r}) has non-finite values")
        if rid in out:
            raise NpreFormatError(f"{path}: duplicate id {rid!r}")
        if normalize_vectors:
            nrm = float(np.linalg.norm(v.astype(np.float64)))
            if nrm == 0.0:
                raise NpreValueError(f"{path}: record {k} ({rid!r}) is a zero vector")
            v = (v.astype(np.float64) / nrm).astype(np.float32)
        out[rid] = v
        off += vec_bytes
    if off != len(data):
        raise NpreFormatError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return out


import_embeddings = read_embeddings


# --- projection head training ---

@dataclass
class ProjectionHead:
    weights: np.ndarray  # out_dim x in_dim

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1]

    def embed(self, descriptors):
        """``normalize(W d)`` for a stack (or one) of descriptors, as float32."""
        z = np.asarray(descriptors, dtype=np.float64) @ self.weights.T
        return normalize(z).astype(np.float32)

    def embed_map(self, descriptors):
        ids = sorted(descriptors)
        if not ids:
            return {}
        out = self.embed(np.stack([descriptors[i] for i in ids]))
        return dict(zip(ids, out))

    def save(self, path):
        with open(path, "wb") as fh:
            np.save(fh, self.weights, allow_pickle=False)

    @classmethod
    def load(cls, path):
        w = np.load(path, allow_pickle=False)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise DataError(f"{path}: not a valid projection head")
        return cls(w.astype(np.float64))


@dataclass(frozen=True)
class TripletObjective:
    margin: float = 0.1


@dataclass(frozen=True)
class LmclObjective:
    s: float = 30.0
    m: float = 0.35


class NegativeStrategy(str, enum.Enum):
    RANDOM = "random"
    HARDEST_IN_BATCH = "hardest-in-batch"


class AnchorMode(str, enum.Enum):
    """How night-rendered copies enter triplet supervision."""
    REPLACE = "replace"
    AUGMENT = "augment"


FINE_TUNE_LR = 1e-6
FRESH_TRAIN_LR = 1e-2


@dataclass(frozen=True)
class TrainConfig:
    loss: object = field(default_factory=TripletObjective)
    learning_rate: float = FRESH_TRAIN_LR
    epochs: int = 10
    batch_size: int = 32
    seed: int = 42
    negative_strategy: NegativeStrategy = NegativeStrategy.RANDOM
    out_dim: int = 64
    clip_norm: float = 10.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise TrainingError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.out_dim < 1:
            raise TrainingError("epochs, batch_size and out_dim must be positive")
        if not isinstance(self.loss, (TripletObjective, LmclObjective)):
            raise TrainingError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    head: ProjectionHead
    history: list
    class_weights: np.ndarray | None = None


def initial_head(in_dim, out_dim, seed):
    """Random orthonormal rows (a random projection that preserves angles on average)."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(in_dim, out_dim), out_dim))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))
    return ProjectionHead(q[:in_dim, :out_dim].T.copy())


def _forward(W, D):
    z = D @ W.T
    nz = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), _EPS)
    return z / nz, nz


def _back_through_normalization(e, nz, g):
    # d normalize(z) / dz applied to g
    return (g - np.sum(g * e, axis=1, keepdims=True) * e) / nz


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def _train_triplet(desc, triplets, cfg, W, rng):
    ids = sorted({i for t in triplets for i in (t.anchor_id, t.positive_id, t.negative_id)})
    row = {i: k for k, i in enumerate(ids)}
    D = np.stack([np.asarray(desc[i], dtype=np.float64) for i in ids])
    A = np.array([row[t.anchor_id] for t in triplets])
    P = np.array([row[t.positive_id] for t in triplets])
    N = np.array([row[t.negative_id] for t in triplets])
    mined_negs = {}
    for a, n in zip(A, N):
        mined_negs.setdefault(int(a), set()).add(int(n))
    mined_negs = {a: np.array(sorted(s)) for a, s in mined_negs.items()}

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            a, p, n = A[sel], P[sel], N[sel]
            if cfg.negative_strategy is NegativeStrategy.HARDEST_IN_BATCH:
                cands = [mined_negs[int(ak)] for ak in a]
                pool, inv_pool = np.unique(np.concatenate([a, *cands]), return_inverse=True)
                ep, _ = _forward(W, D[pool])
                n = n.copy()
                off = len(a)
                for k, c in enumerate(cands):
                    ec = ep[inv_pool[off:off + len(c)]]
                    off += len(c)
                    n[k] = c[int(np.argmin(np.sum((ec - ep[inv_pool[k]]) ** 2, axis=1)))]
            used = np.concatenate([a, p, n])
            uniq, inv = np.unique(used, return_inverse=True)
            E, nz = _forward(W, D[uniq])
            gE = np.zeros_like(E)
            m = len(sel)
            ia, ip, inn = inv[:m], inv[m:2 * m], inv[2 * m:]
            batch_loss = 0.0
            for k in range(m):
                lv = triplet_loss(E[ia[k]], E[ip[k]], E[inn[k]], cfg.loss.margin)
                batch_loss += lv.value
                gE[ia[k]] += lv.gradients["fq"] / m
                gE[ip[k]] += lv.gradients["fp"] / m
                gE[inn[k]] += lv.gradients["fn"] / m
            _check_finite(batch_loss, epoch, b)
            total += batch_loss
            gZ = _back_through_normalization(E, nz, gE)
            (gW,) = _clip([gZ.T @ D[uniq]], cfg.clip_norm)
            W = W - cfg.learning_rate * gW
        history.append(total / len(triplets))
    return W, history, None


def _train_lmcl(desc, classes, cfg, W, rng):
    ids, labels = [], []
    for c, gc in enumerate(classes):
        for i in gc.member_ids:
            ids.append(i)
            labels.append(c)
    D = np.stack([np.asarray(desc[i], dtype=np.float64) for i in ids])
    labels = np.array(labels)
    C = normalize(rng.standard_normal((len(classes), W.shape[0])))
    lcfg = LmclConfig(cfg.loss.s, cfg.loss.m)

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            E, nz = _forward(W, D[sel])
            lv = lmcl_loss(E, labels[sel], C, lcfg)
            _check_finite(lv.value, epoch, b)
            total += lv.value * len(sel)
            gZ = _back_through_normalization(E, nz, lv.gradients["embeddings"])
            gW, gC = _clip([gZ.T @ D[sel], lv.gradients["weights"]], cfg.clip_norm)
            W = W - cfg.learning_rate * gW
            C = normalize(C - cfg.learning_rate * gC)
        history.append(total / len(ids))
    return W, history, C


def train_projection(descriptors, supervision, cfg=TrainConfig(), init=None):
    """Fit a linear head ``W`` so that ``normalize(W d)`` separates places.

    ``supervision`` is either a list of :class:`Triplet` (triplet objective)
    or a list of :class:`GeoClass` (LMCL objective). Plain SGD with global
    gradient-norm clipping; shuffling and initialization come from
    ``cfg.seed``, so identical inputs give bitwise-identical weights.
    ``init`` starts from an existing head instead (fine-tuning).
    """
    supervision = list(supervision)
    if not supervision:
        raise TrainingError("empty supervision")
    wants_triplets = isinstance(cfg.loss, TripletObjective)
    kind = Triplet if wants_triplets else GeoClass
    if not all(isinstance(s, kind) for s in supervision):
        raise TrainingError(f"{type(cfg.loss).__name__} needs a list of {kind.__name__}")
    needed = ({i for t in supervision for i in (t.anchor_id, t.positive_id, t.negative_id)}
              if wants_triplets else {i for c in supervision for i in c.member_ids})
    missing = sorted(needed - set(descriptors))
    if missing:
        raise TrainingError(f"{len(missing)} supervision ids lack descriptors, e.g. {missing[:3]}")
    in_dim = len(next(iter(descriptors.values())))

    rng = np.random.default_rng(cfg.seed)
    if init is None:
        W = initial_head(in_dim, cfg.out_dim, cfg.seed).weights
    else:
        if init.in_dim != in_dim:
            raise TrainingError(f"init head expects {init.in_dim}-d input, descriptors are {in_dim}-d")
        W = init.weights.copy()

    fit = _train_triplet if wants_triplets else _train_lmcl
    W, history, C = fit(descriptors, supervision, cfg, W, rng)
    if not np.all(np.isfinite(W)):
        raise TrainingError("weights became non-finite")
    return TrainResult(ProjectionHead(W), history, C)


def night_triplets(triplets, night_ids, mode=AnchorMode.AUGMENT):
    """Swap (or add) night-rendered anchors into triplet supervision.

    ``night_ids`` maps a day record id to the id of its rendered copy;
    anchors without a copy are kept as they are.
    """
    mode = AnchorMode(mode)
    out = [] if mode is AnchorMode.REPLACE else list(triplets)
    for t in triplets:
        nid = night_ids.get(t.anchor_id)
        if nid is not None:
            out.append(Triplet(nid, t.positive_id, t.negative_id))
        elif mode is AnchorMode.REPLACE:
            out.append(t)
    return out


def night_classes(classes, night_ids, mode=AnchorMode.AUGMENT):
    """Put each member's night-rendered copy in its class, labels unchanged.

    ``augment`` keeps the day members alongside the copies; ``replace``
    keeps only the copies (members without one stay as they are).
    """
    mode = AnchorMode(mode)
    out = []
    for c in classes:
        if mode is AnchorMode.REPLACE:
            members = tuple(night_ids.get(i, i) for i in c.member_ids)
        else:
            members = c.member_ids + tuple(night_ids[i] for i in c.member_ids if i in night_ids)
        out.append(GeoClass(c.cell_east_idx, c.cell_north_idx, c.heading_bin, tuple(sorted(members))))
    return out
