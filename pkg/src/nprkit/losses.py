"""Loss kernels with analytic gradients.

Every kernel returns a :class:`LossValue` whose ``gradients`` map the input
names to arrays of the same shape. All arithmetic is float64 and every
reduction runs in a fixed order, so results are bit-stable for fixed input.

Kernels whose inputs are cosine similarities of unit vectors (LMCL, patch
NCE) return the gradient of the loss composed with L2 normalization of
each input row, evaluated at the given unit vectors. That is the component
tangent to the unit sphere, which is what a caller chaining through its own
normalization needs, and it is what a finite-difference check of the
normalized loss measures.
"""

from dataclasses import dataclass

import numpy as np

from nprkit.errors import LossInputError

UNIT_NORM_TOL = 1e-5


@dataclass
class LossValue:
    value: float
    gradients: dict


@dataclass(frozen=True)
class LmclConfig:
    s: float = 30.0
    m: float = 0.35

    def __post_init__(self):
        if not self.s > 0:
            raise LossInputError("LMCL scale s must be positive")
        if not 0.0 <= self.m < 1.0:
            raise LossInputError("LMCL margin m must lie in [0, 1)")


def _check_unit_rows(x, name):
    norms = np.linalg.norm(x, axis=-1)
    bad = np.flatnonzero(np.abs(norms.reshape(-1) - 1.0) > UNIT_NORM_TOL)
    if len(bad):
        raise LossInputError(f"{name} row {int(bad[0])} has norm {norms.reshape(-1)[bad[0]]:.6g}, "
                             "expected unit length")


def _tangent(x, g):
    """Project row gradients ``g`` onto the tangent space at unit rows ``x``."""
    return g - np.sum(g * x, axis=-1, keepdims=True) * x


def _softmax_nll(logits, target):
    """Row-wise ``-log softmax(logits)[target]`` and the softmax itself."""
    shift = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=-1, keepdims=True)
    nll = (np.log(z) + shift)[..., 0] - np.take_along_axis(logits, target[..., None], axis=-1)[..., 0]
    return nll, e / z


def triplet_loss(fq, fp, fn_, margin):
    """Hinge on squared distances: ``max(|q-p|^2 - |q-n|^2 + margin, 0)``.

    The subgradient at the hinge kink is taken as 0.
    """
    fq, fp, fn_ = (np.asarray(v, dtype=np.float64) for v in (fq, fp, fn_))
    if not fq.shape == fp.shape == fn_.shape or fq.ndim != 1:
        raise LossInputError(f"dimension mismatch: {fq.shape}, {fp.shape}, {fn_.shape}")
    if margin < 0:
        raise LossInputError("margin must be non-negative")
    dp, dn = fq - fp, fq - fn_
    v = float(dp @ dp) - float(dn @ dn) + margin
    if v > 0:
        grads = {"fq": 2.0 * (fn_ - fp), "fp": -2.0 * dp, "fn": 2.0 * dn}
        return LossValue(v, grads)
    zero = np.zeros_like(fq)
    return LossValue(0.0, {"fq": zero, "fp": zero.copy(), "fn": zero.copy()})


def lmcl_loss(embeddings, labels, weights, cfg=LmclConfig()):
    """Large margin cosine loss averaged over the batch.

    ``embeddings`` is N x d, ``weights`` C x d; both need unit rows.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise LossInputError(f"shape mismatch: embeddings {x.shape}, weights {w.shape}")
    if labels.shape != (x.shape[0],):
        raise LossInputError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= w.shape[0]):
        bad = labels[(labels < 0) | (labels >= w.shape[0])][0]
        raise LossInputError(f"label {int(bad)} out of range for {w.shape[0]} classes")
    _check_unit_rows(x, "embeddings")
    _check_unit_rows(w, "weights")
    n = x.shape[0]
    if n == 0:
        raise LossInputError("empty batch")

    cos = x @ w.T
    rows = np.arange(n)
    logits = cfg.s * cos
    logits[rows, labels] -= cfg.s * cfg.m
    nll, dlogits = _softmax_nll(logits, labels)
    dlogits[rows, labels] -= 1.0
    dcos = cfg.s * dlogits / n
    gx = dcos @ w
    gw = dcos.T @ x
    value = float(np.sum(nll)) / n
    return LossValue(value, {"embeddings": _tangent(x, gx), "weights": _tangent(w, gw)})


def adversarial_loss(d_real, d_fake):
    """``mean(log D(y)) + mean(log(1 - D(G(x))))`` over discriminator scores."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    if d_real.size == 0 or d_fake.size == 0:
        raise LossInputError("score arrays must be non-empty")
    for name, d in (("d_real", d_real), ("d_fake", d_fake)):
        if not np.all((d > 0.0) & (d < 1.0)):
            raise LossInputError(f"{name} scores must lie strictly inside (0, 1)")
    value = float(np.mean(np.log(d_real)) + np.mean(np.log1p(-d_fake)))
    grads = {
        "d_real": 1.0 / (d_real.size * d_real),
        "d_fake": -1.0 / (d_fake.size * (1.0 - d_fake)),
    }
    return LossValue(value, grads)


def patch_nce_loss(query_feat, positive_feat, negative_feats, temperature=0.07):
    """Cross-entropy of picking the positive among positive + negatives,
    with logits ``cosine / temperature``.
    """
    q = np.asarray(query_feat, dtype=np.float64)
    k_pos = np.asarray(positive_feat, dtype=np.float64)
    k_neg = np.asarray(negative_feats, dtype=np.float64)
    if k_neg.size == 0:
        raise LossInputError("patch NCE needs at least one negative")
    if k_neg.ndim == 1:
        k_neg = k_neg[None, :]
    if q.ndim != 1 or k_pos.shape != q.shape or k_neg.shape[1:] != q.shape:
        raise LossInputError(f"dimension mismatch: query {q.shape}, positive {k_pos.shape}, "
                             f"negatives {k_neg.shape}")
    if not temperature > 0:
        raise LossInputError("temperature must be positive")
    _check_unit_rows(q[None, :], "query_feat")
    _check_unit_rows(k_pos[None, :], "positive_feat")
    _check_unit_rows(k_neg, "negative_feats")

    keys = np.vstack([k_pos[None, :], k_neg])
    logits = keys @ q / temperature
    nll, dlogits = _softmax_nll(logits, np.array(0))
    dlogits[0] -= 1.0
    dlogits /= temperature
    gq = dlogits @ keys
    gkeys = dlogits[:, None] * q[None, :]
    return LossValue(float(nll), {
        "query": _tangent(q, gq),
        "positive": _tangent(k_pos, gkeys[0]),
        "negatives": _tangent(k_neg, gkeys[1:]).reshape(np.shape(negative_feats)),
    })
