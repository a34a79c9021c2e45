"""Scalar training objectives.

All functions accept plain arrays or tensors; tensor inputs produce tensor
outputs that can be differentiated.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import ProtocolError, UsageError

PROB_EPS = 1e-12
CONTRASTIVE_MODES = ("BF", "ATT", "BA")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    gamma4: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in asdict(self).values()):
            raise UsageError("loss weights must be finite")
        if self.tau <= 0:
            raise UsageError(f"temperature must be positive, got {self.tau}")


def _result(out, *inputs):
    return out if any(isinstance(i, Tensor) for i in inputs) else float(out.value)


def hyp_bce(p1, q):
    """Binary cross entropy on the bonafide probability; averaged over a batch."""
    p = ad.clamp(ad.as_tensor(p1), PROB_EPS, 1.0 - PROB_EPS)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q != 0) & (q != 1)):
        raise UsageError("labels must be 0 (attack) or 1 (bonafide)")
    per = -(q * ad.log(p) + (1.0 - q) * ad.log(1.0 - p))
    return _result(ad.mean(per), p1)


def _pairwise(distance, a, b):
    return distance(ad.expand_dims(a, -2), ad.expand_dims(b, -3))


def _anchor_term(anchors, negatives, tau, distance):
    """(1/N) sum_{i != j} -log(e^{-d_ij/t} / (e^{-d_ij/t} + sum_t e^{-d_it/t}))."""
    n = anchors.shape[0]
    d_pos = _pairwise(distance, anchors, anchors) * (1.0 / tau)  # (N, N)
    d_neg = _pairwise(distance, anchors, negatives) * (1.0 / tau)  # (N, M)
    # -log(e^-p / (e^-p + sum e^-n)) == logsumexp([0, p - n_1, ..., p - n_M])
    gaps = ad.expand_dims(d_pos, -1) - ad.expand_dims(d_neg, -2)  # (N, N, M)
    zeros = Tensor(np.zeros((n, n, 1)))
    per_pair = ad.logsumexp(ad.concat([zeros, gaps], axis=-1), axis=-1)
    off_diag = 1.0 - np.eye(n)
    return ad.tsum(per_pair * off_diag) * (1.0 / n)


def contrastive_loss(bonafide, attack, mode: str = "BF", tau: float = 1.0, c=None, distance=None):
    """Temperature-scaled contrastive loss between bonafide and attack embeddings.

    ``BF`` pulls bonafide pairs together against all attacks, ``ATT`` does the
    same for attack pairs against all bonafide, ``BA`` is their sum. The pair
    sums are divided by the class counts N and M (not by the pair counts).
    ``distance`` defaults to the hyperbolic distance at curvature ``c``.
    """
    if mode not in CONTRASTIVE_MODES:
        raise UsageError(f"unknown contrastive mode {mode!r}")
    if tau <= 0:
        raise UsageError("temperature must be positive")
    if distance is None:
        if c is None:
            raise UsageError("curvature required for the hyperbolic distance")
        curv = geo.as_curvature(c)
        distance = lambda x, y: geo.hyp_distance(x, y, c=curv)  # noqa: E731
    plain = not (isinstance(bonafide, Tensor) or isinstance(attack, Tensor))
    bona = ad.as_tensor(_coords(bonafide))
    att = ad.as_tensor(_coords(attack))
    n, m = _count(bona), _count(att)
    if mode in ("BF", "BA") and (n < 2 or m < 1):
        raise ProtocolError(f"mode {mode} needs >=2 bonafide and >=1 attack (got {n}, {m})")
    if mode in ("ATT", "BA") and (m < 2 or n < 1):
        raise ProtocolError(f"mode {mode} needs >=2 attack and >=1 bonafide (got {m}, {n})")
    total = None
    if mode in ("BF", "BA"):
        total = _anchor_term(bona, att, tau, distance)
    if mode in ("ATT", "BA"):
        term = _anchor_term(att, bona, tau, distance)
        total = term if total is None else total + term
    return float(total.value) if plain else total


def _coords(points):
    if isinstance(points, Tensor):
        return points
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], geo.PoincarePoint):
        return np.stack([p.coords for p in points])
    return np.asarray(points, dtype=np.float64)


def _count(t: Tensor) -> int:
    return 0 if t.value.size == 0 else t.shape[0]


def distance_loss(f_sha, f1, f2):
    """Shared-feature consistency: (1/B)(1/dim) (||F_sha - F1||^2 + ||F_sha - F2||^2)."""
    shapes = {ad.value_of(f).shape for f in (f_sha, f1, f2)}
    if len(shapes) != 1:
        raise UsageError(f"shape mismatch: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2:
        raise UsageError("expected (batch, dim) arrays")
    b, dim = shape
    s = ad.as_tensor(f_sha)
    d1 = s - f1
    d2 = s - f2
    out = (ad.tsum(d1 * d1) + ad.tsum(d2 * d2)) * (1.0 / (b * dim))
    return _result(out, f_sha, f1, f2)


def unimodal_total_loss(bce, contrastive_bf, w: LossWeights):
    return w.lambda1 * bce + w.lambda2 * contrastive_bf


def multimodal_total_loss(dis, decom_bce, decom_bf, fus_bf, fus_bce, w: LossWeights):
    return w.gamma1 * dis + w.gamma2 * decom_bce + w.gamma3 * decom_bf + w.gamma4 * fus_bf + fus_bce
