"""Reverse-mode versus central-difference verification of every differentiable op.

Each case draws random in-domain inputs, differentiates a scalar reduction
of the op's output with the tape, and compares against
:func:`~hypball.autodiff.finite_diff_grad`-style central differences taken by
perturbing the very same leaf tensors in place.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import layers as ly
from . import losses as ls
from . import multimodal as mm
from . import training as tr
from .autodiff import Tape, Tensor

H = 1e-5
TOLERANCE = 1e-4


def check(fn: Callable[[], Tensor], leaves: list[Tensor], h: float = H) -> float:
    """Relative error between tape and central-difference gradients of ``fn()``."""
    with Tape() as tape:
        tape.watch(*leaves)
        out = fn()
    grads = tape.backward(ad.as_tensor(out))
    analytic = np.concatenate([grads[t].ravel() for t in leaves])
    numeric = []
    for t in leaves:
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(ad.value_of(fn()))
            flat[i] = orig - h
            fm = float(ad.value_of(fn()))
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
    return ad.relative_error(analytic, np.array(numeric))


def _leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _ball(rng, n, c, max_frac=0.8, shape=()):
    d = rng.normal(size=(*shape, n))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = rng.uniform(0.05, max_frac, size=(*shape, 1)) / np.sqrt(c)
    return d * r


def _reduce(rng, shape):
    w = rng.normal(size=shape)
    return lambda t: ad.tsum(t * w)


def _cases(rng: np.random.Generator):
    """Yield (op name, closure, leaves) for one random draw per op."""
    n = 4
    c = float(rng.choice([0.1, 0.5, 1.0]))
    curv = geo.Curvature(c)

    x, y = _leaf(_ball(rng, n, c)), _leaf(_ball(rng, n, c))
    red = _reduce(rng, (n,))
    yield "mobius_add", lambda: red(geo.mobius_add(x, y, c=curv)), [x, y]

    v = _leaf(rng.normal(size=n) * rng.uniform(0.1, 1.2) / np.sqrt(c))
    xb = _leaf(_ball(rng, n, c, 0.5))
    yield "exp_map", lambda: red(geo.exp_map(xb, v, c=curv)), [xb, v]
    yield "exp_map0", lambda: red(geo.exp_map0(v, c=curv)), [v]

    yield "hyp_distance", lambda: geo.hyp_distance(x, y, c=curv), [x, y]
    yield "log_map0", lambda: red(geo.log_map0(x, c=curv)), [x]
    yield "conformal_factor", lambda: geo.conformal_factor(x, c=curv), [x]

    alpha = float(rng.choice([0.1, 0.3]))
    far = rng.normal(size=n)
    far *= rng.uniform(1.2, 3.0) * curv.bound(alpha) / np.linalg.norm(far)
    xc = _leaf(far)
    yield "clip_to_ball", lambda: red(geo.clip_to_ball(xc, alpha, c=curv)), [xc]

    head = ly.HypBLRHead(rng.normal(0, 0.3, size=(2, n)), rng.normal(size=(2, n)), curv)
    xs = _leaf(_ball(rng, n, c, 0.8, shape=(3,)))
    red2 = _reduce(rng, (3, 2))
    yield "hyp_blr_scores", lambda: red2(ly.hyp_blr_scores(head, xs)), [xs, *head.p_pre, *head.a]

    s = _leaf(rng.normal(size=(3, 2)))
    yield "hyp_blr_probs", lambda: red2(ly.hyp_blr_probs(s)), [s]

    p = _leaf(rng.uniform(0.05, 0.95, size=5))
    q = rng.integers(0, 2, size=5)
    yield "hyp_bce", lambda: ls.hyp_bce(p, q), [p]

    bona = _leaf(_ball(rng, n, c, 0.8, shape=(3,)))
    att = _leaf(_ball(rng, n, c, 0.8, shape=(3,)))
    tau = float(rng.uniform(0.5, 2.0))
    for mode in ls.CONTRASTIVE_MODES:
        yield f"contrastive_{mode}", (lambda m=mode: ls.contrastive_loss(bona, att, m, tau, c=curv)), [bona, att]

    f_sha, f1, f2 = (_leaf(rng.normal(size=(3, n))) for _ in range(3))
    yield "distance_loss", lambda: ls.distance_loss(f_sha, f1, f2), [f_sha, f1, f2]

    layer = ly.AffineLayer.init(n, 3, rng, "relu")
    xin = _leaf(rng.normal(size=(2, n)))
    red3 = _reduce(rng, (2, 3))
    yield "affine_forward", lambda: red3(ly.affine_forward(layer, xin)), [xin, layer.weight, layer.bias]

    s_sha = ly.refinement_stack(2 * n, n, rng)
    s_spe1 = ly.refinement_stack(n, n, rng)
    s_spe2 = ly.refinement_stack(n, n, rng)
    g1, g2 = _leaf(rng.normal(size=(2, n))), _leaf(rng.normal(size=(2, n)))
    redf = _reduce(rng, (2, n))
    yield "refine_forward", lambda: redf(ly.refine_forward(s_spe1, g1)), [g1, *s_spe1.named_parameters().values()]
    yield "extract_shared", lambda: redf(mm.extract_shared(g1, g2, s_sha)), [g1, g2, *s_sha.named_parameters().values()]

    def decomposed():
        d = mm.decompose(g1, g2, mm.extract_shared(g1, g2, s_sha), s_spe1, s_spe2)
        return redf(d.f_spe1) + redf(d.f_spe2) * 0.5

    yield "decompose", decomposed, [g1, g2]

    def fused():
        d = mm.decompose(g1, g2, mm.extract_shared(g1, g2, s_sha), s_spe1, s_spe2)
        return redf(mm.hyperbolic_fuse(d, curv, 0.999).point)

    yield "hyperbolic_fuse", fused, [g1, g2]

    w = ls.LossWeights()
    emb = ly.Embedder(curv, 0.1)
    model = ly.UnimodalModel.build(n, 3, emb, rng, backbone_hidden=(5,), backbone_out=4)
    xu = rng.normal(size=(6, n))
    yu = np.array([1, 1, 1, 0, 0, 0])
    # zero biases put dead-hidden samples exactly on the output relu kink
    for key, t in model.named_parameters().items():
        if key.endswith("bias"):
            t.value += rng.normal(0, 0.1, size=t.value.shape)

    def unimodal():
        scores, e = model.forward(xu)
        bce = ls.hyp_bce(ly.hyp_blr_probs(scores)[:, 1], yu)
        cl = ls.contrastive_loss(e[:3], e[3:], "BF", w.tau, distance=emb.distance)
        return ls.unimodal_total_loss(bce, cl, w)

    yield "unimodal_total_loss", unimodal, list(model.named_parameters().values())

    # kept tiny: finite differences cost two forwards per parameter
    mmodel = mm.MultimodalModel.build((3, 3), 2, emb, rng, backbone_hidden=(3,), backbone_out=3)
    for key, t in mmodel.named_parameters().items():
        if key.endswith("bias"):
            t.value += rng.normal(0, 0.1, size=t.value.shape)
    x1, x2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    cfg = tr.TrainConfig(dim=2, weights=w)
    yield (
        "multimodal_total_loss",
        lambda: tr._multimodal_loss(mmodel, [x1, x2], yu, cfg)[0],
        list(mmodel.named_parameters().values()),
    )


def run_suite(points: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``points`` random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(points):
        for name, fn, leaves in _cases(rng):
            worst[name] = max(worst.get(name, 0.0), check(fn, leaves))
    return worst
