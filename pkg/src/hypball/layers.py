"""Trainable building blocks and the unimodal network.

Parameters are :class:`~hypball.autodiff.Tensor` leaves with ``requires_grad``
set, so any forward pass run under a tape is differentiable with respect to
them. Every block exposes ``named_parameters()`` returning an ordered
``{key: Tensor}`` map; the keys are the checkpoint keys.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import SchemaError, UsageError

A_NORM_FLOOR = 1e-12
ACTIVATIONS = ("none", "relu")


class AffineLayer:
    def __init__(self, weight, bias, activation: str = "none"):
        if activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {activation!r}")
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise UsageError(f"inconsistent shapes weight={weight.shape} bias={bias.shape}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise UsageError("affine parameters must be finite")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.activation = activation

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "none"):
        gain = 2.0 if activation == "relu" else 1.0
        w = rng.normal(0.0, np.sqrt(gain / n_in), size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    @classmethod
    def identity(cls, n: int):
        return cls(np.eye(n), np.zeros(n))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x):
        return affine_forward(self, x)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


def affine_forward(layer: AffineLayer, x):
    """activation(W x + b) over the last axis of ``x`` (a vector or a batch of rows)."""
    x = ad.as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise UsageError(f"expected input width {layer.n_in}, got {x.shape[-1]}")
    vector = x.ndim == 1
    rows = ad.reshape(x, (1, -1)) if vector else x
    out = rows @ layer.weight.T + layer.bias
    if layer.activation == "relu":
        out = ad.relu(out)
    return ad.reshape(out, (layer.n_out,)) if vector else out


class Sequential:
    """A stack of affine layers; used for the backbone, FC reductions and refinements."""

    def __init__(self, layers: list[AffineLayer]):
        if not layers:
            raise UsageError("empty layer stack")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise UsageError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = list(layers)

    @classmethod
    def mlp(cls, widths: list[int], rng: np.random.Generator, final_activation: str = "none"):
        """Relu hidden layers between consecutive ``widths``."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            layers.append(AffineLayer.init(n_in, n_out, rng, final_activation if last else "relu"))
        return cls(layers)

    @classmethod
    def identity(cls, n: int):
        return cls([AffineLayer.identity(n)])

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def __call__(self, x):
        return refine_forward(self, x)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}."))
        return out


def refine_forward(net: Sequential, x):
    for layer in net.layers:
        x = affine_forward(layer, x)
    return x


def toy_backbone(n_in: int, out_width: int, rng: np.random.Generator, hidden=(64, 64)) -> Sequential:
    """Desk-scale feature extractor: relu hidden layers, relu output features."""
    return Sequential.mlp([n_in, *hidden, out_width], rng, final_activation="relu")


def refinement_stack(n_in: int, dim: int, rng: np.random.Generator) -> Sequential:
    return Sequential.mlp([n_in, dim, dim], rng)


class HypBLRHead:
    """Two-class logistic regression on the Poincare ball.

    Each class owns a point ``p_k = exp_0(p_pre[k])`` and a direction ``a[k]``;
    the class score is a signed, scaled geodesic distance to the gyroplane
    through ``p_k`` orthogonal to ``a[k]``.
    """

    def __init__(self, p_pre, a, curvature):
        self.curvature = geo.as_curvature(curvature)
        self.p_pre = [Tensor(np.asarray(p, dtype=np.float64), requires_grad=True) for p in p_pre]
        self.a = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in a]
        if len(self.p_pre) != 2 or len(self.a) != 2:
            raise UsageError("a binary head needs exactly two classes")

    @classmethod
    def init(cls, dim: int, curvature, rng: np.random.Generator, scale: float = 0.01):
        return cls([np.zeros(dim)] * 2, rng.normal(0.0, scale, size=(2, dim)), curvature)

    @property
    def dim(self) -> int:
        return self.a[0].shape[0]

    def points(self):
        return [geo.exp_map0(p, c=self.curvature) for p in self.p_pre]

    def __call__(self, x):
        return hyp_blr_scores(self, x)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k in range(2):
            out[f"{prefix}p_pre.{k}"] = self.p_pre[k]
        for k in range(2):
            out[f"{prefix}a.{k}"] = self.a[k]
        return out


def _blr_score(p, a, x, curv: geo.Curvature):
    sc = curv.sqrt_c
    z = geo.mobius_add(-p, x, c=curv)
    a_norm = ad.maximum(ad.norm(a), A_NORM_FLOOR)
    lam_p = 2.0 / (1.0 - curv.c * ad.tsum(p * p, axis=-1, keepdims=True))
    inner = ad.tsum(z * a, axis=-1, keepdims=True)
    z2 = ad.tsum(z * z, axis=-1, keepdims=True)
    arg = (2.0 * sc) * inner / ((1.0 - curv.c * z2) * a_norm)
    return lam_p * a_norm / sc * ad.arcsinh(arg)


def hyp_blr_scores(head: HypBLRHead, x):
    """Per-class scores, shape ``(..., 2)``; ``exp(score)`` is the unnormalised class weight."""
    if isinstance(x, geo.PoincarePoint):
        if x.curvature.c != head.curvature.c:
            raise UsageError("point and head live on different curvatures")
        x = x.coords
    plain = not isinstance(x, Tensor)
    x = ad.as_tensor(x)
    if x.shape[-1] != head.dim:
        raise UsageError(f"expected embedding width {head.dim}, got {x.shape[-1]}")
    scores = [
        _blr_score(geo.exp_map0(head.p_pre[k], c=head.curvature), head.a[k], x, head.curvature)
        for k in range(2)
    ]
    out = ad.concat(scores, axis=-1)
    return out.value if plain else out


class LinearHead:
    """Euclidean two-class head used by the baseline runs."""

    def __init__(self, weight, bias):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(rng.normal(0.0, scale, size=(2, dim)), np.zeros(2))

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x):
        x = ad.as_tensor(x)
        return x @ self.weight.T + self.bias

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


def hyp_blr_probs(scores):
    """Softmax over the two class scores (last axis), with max subtraction."""
    plain = not isinstance(scores, Tensor)
    s = ad.as_tensor(scores)
    shift = np.max(s.value, axis=-1, keepdims=True)
    e = ad.exp(s - shift)
    out = e / ad.tsum(e, axis=-1, keepdims=True)
    return out.value if plain else out


def euclidean_distance(x, y):
    return ad.norm(ad.as_tensor(x) - y, keepdims=False)


class Embedder:
    """Maps Euclidean features into the embedding space used by a run.

    ``hyperbolic`` lifts with ``exp_0`` and clips to ``(1 - alpha)/sqrt(c)``;
    ``euclidean`` is the identity (baseline runs).
    """

    def __init__(self, curvature, alpha: float, mode: str = "hyperbolic"):
        if mode not in ("hyperbolic", "euclidean"):
            raise UsageError(f"unknown geometry mode {mode!r}")
        self.curvature = geo.as_curvature(curvature)
        self.alpha = alpha
        self.mode = mode

    @property
    def hyperbolic(self) -> bool:
        return self.mode == "hyperbolic"

    def __call__(self, h):
        if not self.hyperbolic:
            return ad.as_tensor(h)
        return geo.clip_to_ball(geo.exp_map0(h, c=self.curvature), self.alpha, c=self.curvature)

    def distance(self, x, y):
        if self.hyperbolic:
            return geo.hyp_distance(x, y, c=self.curvature)
        return euclidean_distance(x, y)

    def head(self, dim: int, rng: np.random.Generator):
        if self.hyperbolic:
            return HypBLRHead.init(dim, self.curvature, rng)
        return LinearHead.init(dim, rng)


class UnimodalModel:
    """Backbone -> FC reduction -> embedding -> two-class head."""

    def __init__(self, backbone: Sequential, fc: Sequential, head, embedder: Embedder):
        self.backbone = backbone
        self.fc = fc
        self.head = head
        self.embedder = embedder

    @classmethod
    def build(cls, n_in: int, dim: int, embedder: Embedder, rng: np.random.Generator,
              backbone_hidden=(64, 64), backbone_out: int = 64):
        backbone = toy_backbone(n_in, backbone_out, rng, backbone_hidden)
        fc = Sequential([AffineLayer.init(backbone_out, dim, rng)])
        return cls(backbone, fc, embedder.head(dim, rng), embedder)

    def embed(self, x):
        return self.embedder(self.fc(self.backbone(x)))

    def forward(self, x):
        """Return (class scores, embeddings) for a batch of raw features."""
        emb = self.embed(x)
        return self.head(emb), emb

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.named_parameters("backbone."))
        out.update(self.fc.named_parameters("fc."))
        out.update(self.head.named_parameters("head."))
        return out


# ----------------------------------------------------------------- checkpoints


def state_dict(model) -> dict[str, np.ndarray]:
    return {k: t.value.copy() for k, t in model.named_parameters().items()}


def load_state_dict(model, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise SchemaError(f"checkpoint keys differ: missing={sorted(missing)} extra={sorted(extra)}")
    for key, tensor in params.items():
        value = np.asarray(state[key], dtype=np.float64)
        if value.shape != tensor.shape:
            raise SchemaError(f"{key}: shape {value.shape} != {tensor.shape}")
        tensor.value = value.copy()


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """JSON map ``{"meta": ..., "params": {key: {"shape": [...], "data": [...]}}}``.

    Floats are written with ``repr`` precision, so a load reproduces every
    value bit for bit.
    """
    doc = {
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in state.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    try:
        params = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc["params"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint {path}: {exc}") from exc
    return params, doc.get("meta", {})
