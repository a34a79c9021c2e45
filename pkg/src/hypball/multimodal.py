"""Two-modality pipeline: Euclidean decomposition, hyperbolic fusion.

Aligned unimodal features F1, F2 are split into a shared part
``F_sha = S_sha([F1, F2])`` and refined specific parts
``F_spe_m = S_spe_m(F_m - F_sha)``. The three parts are lifted onto the
ball, clipped, and fused as ``F_sha (+) (F_spe1 (+) F_spe2)``. Four heads
(shared, two specific, fused) score their embeddings; the fused head is the
deployment score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .errors import ProtocolError, UsageError
from .layers import (
    AffineLayer,
    Embedder,
    Sequential,
    hyp_blr_probs,
    refinement_stack,
    toy_backbone,
)

HEADS = ("sha", "spe1", "spe2", "fus")


@dataclass
class DecomposedFeatures:
    f_sha: object
    f_spe1: object
    f_spe2: object

    def __post_init__(self):
        widths = {ad.value_of(f).shape[-1] for f in (self.f_sha, self.f_spe1, self.f_spe2)}
        if len(widths) != 1:
            raise UsageError(f"decomposed widths differ: {sorted(widths)}")


@dataclass
class FusedEmbedding:
    point: object


def _check_same(*arrays):
    shapes = {ad.value_of(a).shape for a in arrays}
    if len(shapes) != 1:
        raise UsageError(f"feature shapes differ: {sorted(shapes)}")


def extract_shared(f1, f2, s_sha: Sequential):
    _check_same(f1, f2)
    if s_sha.n_in != 2 * ad.value_of(f1).shape[-1]:
        raise UsageError(f"shared stack expects width {s_sha.n_in}, got 2*{ad.value_of(f1).shape[-1]}")
    return s_sha(ad.concat([ad.as_tensor(f1), ad.as_tensor(f2)], axis=-1))


def decompose(f1, f2, f_sha, s_spe1: Sequential, s_spe2: Sequential) -> DecomposedFeatures:
    _check_same(f1, f2, f_sha)
    f_sha = ad.as_tensor(f_sha)
    return DecomposedFeatures(f_sha, s_spe1(ad.as_tensor(f1) - f_sha), s_spe2(ad.as_tensor(f2) - f_sha))


def hyperbolic_fuse(d: DecomposedFeatures, curvature, alpha: float) -> FusedEmbedding:
    """Lift and clip each part, fuse as sha (+) (spe1 (+) spe2), clip the result."""
    curv = geo.as_curvature(curvature)
    lift = Embedder(curv, alpha)
    sha, spe1, spe2 = lift(d.f_sha), lift(d.f_spe1), lift(d.f_spe2)
    return FusedEmbedding(geo.clip_to_ball(fuse_points(sha, spe1, spe2, curv), alpha, c=curv))


def fuse_points(sha, spe1, spe2, curv):
    return geo.mobius_add(sha, geo.mobius_add(spe1, spe2, c=curv), c=curv)


class MultimodalModel:
    def __init__(self, backbones, fcs, s_sha, s_spe1, s_spe2, heads: dict, embedder: Embedder):
        self.backbones = list(backbones)
        self.fcs = list(fcs)
        self.s_sha = s_sha
        self.s_spe1 = s_spe1
        self.s_spe2 = s_spe2
        self.heads = heads
        self.embedder = embedder

    @classmethod
    def build(cls, widths: tuple[int, int], dim: int, embedder: Embedder, rng: np.random.Generator,
              backbone_hidden=(64, 64), backbone_out: int = 64):
        backbones = [toy_backbone(w, backbone_out, rng, backbone_hidden) for w in widths]
        fcs = [Sequential([AffineLayer.init(backbone_out, dim, rng)]) for _ in widths]
        s_sha = refinement_stack(2 * dim, dim, rng)
        s_spe1 = refinement_stack(dim, dim, rng)
        s_spe2 = refinement_stack(dim, dim, rng)
        heads = {name: embedder.head(dim, rng) for name in HEADS}
        return cls(backbones, fcs, s_sha, s_spe1, s_spe2, heads, embedder)

    def unimodal_features(self, x1, x2):
        return self.fcs[0](self.backbones[0](x1)), self.fcs[1](self.backbones[1](x2))

    def forward(self, x1, x2):
        """Return ``(scores, embeddings, (F1, F2, F_sha))``; dicts keyed by head name."""
        if x1 is None or x2 is None:
            raise ProtocolError("multimodal forward needs both modalities")
        f1, f2 = self.unimodal_features(x1, x2)
        f_sha = extract_shared(f1, f2, self.s_sha)
        d = decompose(f1, f2, f_sha, self.s_spe1, self.s_spe2)
        emb = {
            "sha": self.embedder(d.f_sha),
            "spe1": self.embedder(d.f_spe1),
            "spe2": self.embedder(d.f_spe2),
        }
        if self.embedder.hyperbolic:
            curv = self.embedder.curvature
            fused = fuse_points(emb["sha"], emb["spe1"], emb["spe2"], curv)
            emb["fus"] = geo.clip_to_ball(fused, self.embedder.alpha, c=curv)
        else:
            emb["fus"] = emb["sha"] + emb["spe1"] + emb["spe2"]
        scores = {name: self.heads[name](emb[name]) for name in HEADS}
        return scores, emb, (f1, f2, f_sha)

    def probabilities(self, x1, x2) -> dict[str, np.ndarray]:
        scores, _, _ = self.forward(x1, x2)
        return {k: ad.value_of(hyp_blr_probs(s)) for k, s in scores.items()}

    def named_parameters(self):
        out = {}
        for m, (bb, fc) in enumerate(zip(self.backbones, self.fcs), start=1):
            out.update(bb.named_parameters(f"backbone{m}."))
            out.update(fc.named_parameters(f"fc{m}."))
        out.update(self.s_sha.named_parameters("s_sha."))
        out.update(self.s_spe1.named_parameters("s_spe1."))
        out.update(self.s_spe2.named_parameters("s_spe2."))
        for name in HEADS:
            out.update(self.heads[name].named_parameters(f"head_{name}."))
        return out
