"""Gyrovector kernels on the curvature-c Poincare ball.

Every function works on batches: the last axis is the vector axis and any
leading axes broadcast. Inputs may be numpy arrays, :class:`Tensor` objects
(to take part in differentiation) or :class:`PoincarePoint` values. Plain
array inputs give plain array outputs.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NORM_FLOOR, Tensor
from .errors import DegenerateInputError, DomainError, UsageError

ATANH_MAX = 1.0 - 1e-7
DENOM_FLOOR = 1e-15


@dataclass(frozen=True)
class Curvature:
    c: float
    max_norm_eps: float = 1e-3

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise UsageError(f"curvature must be positive, got {self.c}")
        if not 0 < self.max_norm_eps < 1:
            raise UsageError(f"max_norm_eps must lie in (0, 1), got {self.max_norm_eps}")

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.c)

    @property
    def radius(self) -> float:
        """Effective radius after the stability margin."""
        return self.bound(0.0)

    def bound(self, alpha: float) -> float:
        return (1.0 - max(alpha, self.max_norm_eps)) / self.sqrt_c


def as_curvature(c) -> Curvature:
    return c if isinstance(c, Curvature) else Curvature(float(c))


@dataclass(frozen=True)
class PoincarePoint:
    coords: np.ndarray
    curvature: Curvature

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if not np.all(np.isfinite(coords)):
            raise DomainError("point coordinates must be finite")
        if np.any(self.curvature.c * np.sum(coords**2, axis=-1) >= 1.0):
            raise DomainError("point lies outside the Poincare ball")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]

    def __neg__(self):
        return PoincarePoint(-self.coords, self.curvature)


@dataclass(frozen=True)
class TangentVector:
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if not np.all(np.isfinite(coords)):
            raise DomainError("tangent vector must be finite")
        object.__setattr__(self, "coords", coords)


def _unwrap(args, c):
    """Pull raw arrays and a shared curvature out of mixed inputs."""
    curv = None
    raw = []
    for a in args:
        if isinstance(a, PoincarePoint):
            if curv is not None and curv != a.curvature:
                raise UsageError("points live on different curvatures")
            curv = a.curvature
            raw.append(a.coords)
        elif isinstance(a, TangentVector):
            raw.append(a.coords)
        else:
            raw.append(a)
    if c is not None:
        given = as_curvature(c)
        if curv is not None and given.c != curv.c:
            raise UsageError("explicit curvature disagrees with the points' curvature")
        curv = given if curv is None else curv
    if curv is None:
        raise UsageError("curvature is required for raw array inputs")
    return raw, curv


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(ad.value_of(a))):
            raise DomainError("non-finite input")


def _check_dims(*arrays):
    dims = {ad.value_of(a).shape[-1] for a in arrays if ad.value_of(a).ndim}
    if len(dims) > 1:
        raise UsageError(f"dimension mismatch: {sorted(dims)}")


def _kernel(n_points: int, returns_point: bool):
    """Adapt a Tensor kernel to the mixed array / Tensor / PoincarePoint surface."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, c=None, **kw):
            pts, rest = args[:n_points], args[n_points:]
            raw, curv = _unwrap(pts, c)
            any_point = any(isinstance(p, (PoincarePoint, TangentVector)) for p in pts)
            plain = not any(isinstance(r, Tensor) for r in raw)
            _check_finite(*raw)
            _check_dims(*raw)
            out = fn(*[ad.as_tensor(r) for r in raw], *rest, curv=curv, **kw)
            if not plain:
                return out
            if isinstance(out, Tensor):
                out = out.value
            if returns_point and any_point:
                return PoincarePoint(out, curv)
            return out

        return wrapper

    return deco


def _dot(x, y):
    return ad.tsum(x * y, axis=-1, keepdims=True)


def _sqnorm(x):
    return ad.tsum(x * x, axis=-1, keepdims=True)


def project(x, curv: Curvature, alpha: float = 0.0):
    """Rescale rows whose norm exceeds the (alpha-widened) effective radius."""
    bound = curv.bound(alpha)
    n = ad.norm(x)
    scale = ad.minimum(1.0, bound / ad.maximum(n, NORM_FLOOR))
    return x * scale


# ----------------------------------------------------------------- public ops


@_kernel(1, returns_point=False)
def conformal_factor(x, *, curv):
    out = 2.0 / (1.0 - curv.c * _sqnorm(x))
    return ad.reshape(out, out.shape[:-1])


def _mobius_add(x, y, curv):
    c = curv.c
    xy = _dot(x, y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + (c * c) * x2 * y2
    if np.any(np.abs(den.value) < DENOM_FLOOR):
        raise DegenerateInputError("Mobius addition denominator vanished")
    return num / den


@_kernel(2, returns_point=True)
def mobius_add(x, y, *, curv):
    """x (+) y, re-projected to the effective radius."""
    return project(_mobius_add(x, y, curv), curv)


def _gyro_norm(x, y, curv):
    """||(-x) (+) y|| through the algebraically equal, argument-symmetric form."""
    c = curv.c
    # grouped so swapping x and y gives a bitwise-identical result
    den = 1.0 - 2.0 * c * _dot(x, y) + (c * c) * (_sqnorm(x) * _sqnorm(y))
    return ad.norm(x - y) / ad.sqrt(den)


@_kernel(2, returns_point=False)
def hyp_distance(x, y, *, curv):
    """Geodesic distance 2/sqrt(c) * artanh(sqrt(c) * ||(-x) (+) y||)."""
    gn = _gyro_norm(x, y, curv)
    arg = ad.clamp(curv.sqrt_c * gn, 0.0, ATANH_MAX)
    d = (2.0 / curv.sqrt_c) * ad.arctanh(arg)
    return ad.reshape(d, d.shape[:-1])


def _exp_map(x, v, curv):
    sc = curv.sqrt_c
    lam = 2.0 / (1.0 - curv.c * _sqnorm(x))
    vn = ad.norm(v)
    # tanh(sc*lam*|v|/2) * v / (sc*|v|) == (lam/2) * tanhc(sc*lam*|v|/2) * v
    step = (lam * 0.5) * ad.tanhc(sc * lam * vn * 0.5) * v
    return _mobius_add(x, step, curv)


@_kernel(2, returns_point=True)
def exp_map(x, v, *, curv):
    return project(_exp_map(x, v, curv), curv)


@_kernel(1, returns_point=True)
def exp_map0(v, *, curv):
    sc = curv.sqrt_c
    return project(ad.tanhc(sc * ad.norm(v)) * v, curv)


@_kernel(1, returns_point=False)
def log_map0(y, *, curv):
    sc = curv.sqrt_c
    arg = ad.clamp(sc * ad.norm(y), 0.0, ATANH_MAX)
    return ad.artanhc(arg) * y


@_kernel(1, returns_point=True)
def clip_to_ball(x, alpha: float, *, curv):
    """Cap the norm at (1 - alpha)/sqrt(c); the bound never exceeds the stability margin."""
    if not 0.0 <= alpha < 1.0:
        raise UsageError(f"alpha must lie in [0, 1), got {alpha}")
    return project(x, curv, alpha)


def mobius_add_raw(x, y, c):
    """Unprojected Mobius addition, for oracles and property tests."""
    curv = as_curvature(c)
    out = _mobius_add(ad.as_tensor(x), ad.as_tensor(y), curv)
    return out if isinstance(x, Tensor) or isinstance(y, Tensor) else out.value
