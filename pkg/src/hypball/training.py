"""Adam, the step schedule and the unimodal / multimodal training loops."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import BONAFIDE, Dataset, ProtocolSplit
from .errors import ProtocolError, TrainingError, UsageError
from .evaluation import ScoreSet, acer, roc_auc, threshold_at_bpcer
from .layers import (
    Embedder,
    UnimodalModel,
    hyp_blr_probs,
    load_checkpoint,
    load_state_dict,
    save_checkpoint,
    state_dict,
)
from .losses import (
    LossWeights,
    contrastive_loss,
    distance_loss,
    hyp_bce,
    multimodal_total_loss,
    unimodal_total_loss,
)
from .multimodal import HEADS, MultimodalModel

PIPELINES = ("unimodal", "multimodal")
MODES = ("hyperbolic", "euclidean")
CONTRASTIVE = ("BF", "ATT", "BA", "none")
LOG_COLUMNS = ("epoch", "lr", "train_loss", "dev_auc", "dev_acer")


@dataclass
class TrainConfig:
    c: float = 0.1
    alpha: float = 0.1
    dim: int = 128
    batch_size: int | None = None  # 64 unimodal, 32 multimodal
    epochs: int = 30
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_step: int = 10
    weight_decay: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    mode: str = "hyperbolic"
    contrastive: str = "BF"
    modality: str | None = None
    backbone_hidden: tuple[int, ...] = (64, 64)
    backbone_out: int = 64
    target_bpcer: float = 0.01

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.backbone_hidden = tuple(int(h) for h in self.backbone_hidden)
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.contrastive not in CONTRASTIVE:
            raise UsageError(f"contrastive must be one of {CONTRASTIVE}, got {self.contrastive!r}")
        for name in ("c", "dim", "epochs", "lr", "lr_step", "backbone_out"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise UsageError("batch_size must be at least 2")
        if not 0.0 <= self.alpha < 1.0:
            raise UsageError("alpha must lie in [0, 1)")
        if self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise UsageError("weight_decay must be >= 0 and lr_decay in (0, 1]")

    def batch_for(self, pipeline: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 64 if pipeline == "unimodal" else 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_hidden"] = list(self.backbone_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise UsageError("epoch must be non-negative")
    return config.lr * config.lr_decay ** (epoch // config.lr_step)


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update with L2 weight decay folded into the gradient.

    ``params`` and ``grads`` map names to arrays; returns ``(new_params, state)``.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {key!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    out = {}
    for key, p in params.items():
        g = grads[key] + weight_decay * p
        if g.shape != p.shape:
            raise UsageError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m.get(key, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(key, 0.0) + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        out[key] = p - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return out, state


# --------------------------------------------------------------------- batches


def make_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator, need_pairs: bool = True):
    """Shuffled batches with bonafide and attacks spread evenly across them.

    With ``need_pairs`` the batch count is capped so each batch holds at
    least two bonafide samples whenever the data allows it.
    """
    labels = np.asarray(labels)
    bona = np.flatnonzero(labels == BONAFIDE)
    att = np.flatnonzero(labels != BONAFIDE)
    n_batches = max(1, math.ceil(labels.size / batch_size))
    if need_pairs and bona.size >= 2:
        n_batches = min(n_batches, bona.size // 2)
    bona = bona[rng.permutation(bona.size)]
    att = att[rng.permutation(att.size)]
    batches = []
    for b_part, a_part in zip(np.array_split(bona, n_batches), np.array_split(att, n_batches)):
        idx = np.concatenate([b_part, a_part])
        batches.append(idx[rng.permutation(idx.size)])
    order = rng.permutation(n_batches)
    return [batches[i] for i in order]


# ----------------------------------------------------------------------- runs


@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    pipeline: str
    history: list[dict]
    meta: dict

    @property
    def log(self) -> list[dict]:
        return [{k: row[k] for k in LOG_COLUMNS} for row in self.history]

    def state(self) -> dict:
        return state_dict(self.model)


def _modalities(dataset: Dataset, config: TrainConfig, pipeline: str) -> list[str]:
    mods = list(dataset.modalities)
    if pipeline == "multimodal":
        if len(mods) < 2:
            raise ProtocolError("multimodal training needs two modalities")
        return mods[:2]
    if config.modality is not None:
        if config.modality not in mods:
            raise UsageError(f"unknown modality {config.modality!r}; have {mods}")
        return [config.modality]
    return mods[:1]


def build_model(meta: dict, rng: np.random.Generator | None = None):
    """Construct an (untrained) model from checkpoint metadata."""
    config = TrainConfig.from_dict(meta["config"])
    rng = rng or np.random.default_rng(0)
    embedder = Embedder(config.c, config.alpha, config.mode)
    widths = meta["widths"]
    if meta["pipeline"] == "unimodal":
        return UnimodalModel.build(widths[0], config.dim, embedder, rng,
                                   config.backbone_hidden, config.backbone_out)
    return MultimodalModel.build(tuple(widths), config.dim, embedder, rng,
                                 config.backbone_hidden, config.backbone_out)


def predict(model, pipeline: str, inputs: list[np.ndarray]) -> np.ndarray:
    """Bonafide probability of the deployment head for each row."""
    if pipeline == "unimodal":
        scores, _ = model.forward(inputs[0])
        return ad.value_of(hyp_blr_probs(scores))[:, 1]
    return model.probabilities(inputs[0], inputs[1])["fus"][:, 1]


def embeddings(model, pipeline: str, inputs: list[np.ndarray]) -> np.ndarray:
    if pipeline == "unimodal":
        return ad.value_of(model.embed(inputs[0]))
    _, emb, _ = model.forward(inputs[0], inputs[1])
    return ad.value_of(emb["fus"])


def _maybe_contrastive(emb, labels, config: TrainConfig, embedder: Embedder):
    """Contrastive term for one batch, or None when the batch cannot support it."""
    if config.contrastive == "none":
        return None
    bona = np.flatnonzero(labels == BONAFIDE)
    att = np.flatnonzero(labels != BONAFIDE)
    try:
        return contrastive_loss(emb[bona], emb[att], config.contrastive, config.weights.tau,
                                distance=embedder.distance)
    except ProtocolError:
        return None


def _emb_norm(emb) -> float:
    return float(np.max(np.linalg.norm(ad.value_of(emb), axis=-1))) if ad.value_of(emb).size else 0.0


def _unimodal_loss(model, xs, y, config):
    scores, emb = model.forward(xs[0])
    bce = hyp_bce(hyp_blr_probs(scores)[:, 1], y)
    cl = _maybe_contrastive(emb, y, config, model.embedder)
    loss = unimodal_total_loss(bce, cl if cl is not None else 0.0, config.weights)
    return loss, {"skipped": cl is None, "emb_norm": _emb_norm(emb)}


def _multimodal_loss(model, xs, y, config):
    scores, emb, (f1, f2, f_sha) = model.forward(xs[0], xs[1])
    dis = distance_loss(f_sha, f1, f2)
    bce = {h: hyp_bce(hyp_blr_probs(scores[h])[:, 1], y) for h in HEADS}
    bf = {h: _maybe_contrastive(emb[h], y, config, model.embedder) for h in HEADS}
    skipped = any(v is None for v in bf.values())
    bf = {h: (v if v is not None else 0.0) for h, v in bf.items()}
    loss = multimodal_total_loss(
        dis,
        bce["sha"] + bce["spe1"] + bce["spe2"],
        bf["sha"] + bf["spe1"] + bf["spe2"],
        bf["fus"],
        bce["fus"],
        config.weights,
    )
    norm = max(_emb_norm(e) for e in emb.values())
    return loss, {"skipped": skipped, "emb_norm": norm, "dis": float(ad.value_of(dis))}


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def _dev_metrics(model, pipeline, xs, y, target_bpcer):
    if len(y) == 0 or np.all(y == y[0]):
        return float("nan"), float("nan")
    scores = predict(model, pipeline, xs)
    s = ScoreSet.from_labels(scores, y)
    t = threshold_at_bpcer(s.bonafide_scores, target_bpcer)
    return roc_auc(s), acer(s, t)[2]


def train_run(config: TrainConfig, dataset: Dataset, split: ProtocolSplit, pipeline: str = "unimodal",
              on_epoch=None) -> TrainResult:
    """Train one model on ``split.train`` and log dev metrics every epoch."""
    if pipeline not in PIPELINES:
        raise UsageError(f"pipeline must be one of {PIPELINES}")
    mods = _modalities(dataset, config, pipeline)
    if not split.train:
        raise ProtocolError("empty training split")
    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    data_rng = np.random.default_rng(data_seq)

    meta = {"pipeline": pipeline, "modalities": mods, "widths": [dataset.widths[m] for m in mods],
            "config": config.to_dict()}
    model = build_model(meta, init_rng)
    params = model.named_parameters()

    x_train = [dataset.features(m, split.train) for m in mods]
    y_train = dataset.labels(split.train)
    x_dev = [dataset.features(m, split.dev) for m in mods]
    y_dev = dataset.labels(split.dev)
    batch_size = config.batch_for(pipeline)
    need_pairs = config.contrastive != "none"
    loss_fn = _unimodal_loss if pipeline == "unimodal" else _multimodal_loss
    adam = AdamState()
    history = []

    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        losses, gnorms, fnorms, dis, skipped, max_norm = [], [], [], [], 0, 0.0
        for idx in make_batches(y_train, batch_size, data_rng, need_pairs):
            with Tape() as tape:
                tape.watch(*params.values())
                loss, info = loss_fn(model, [x[idx] for x in x_train], y_train[idx], config)
            value = float(ad.value_of(loss))
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = tape.backward(ad.as_tensor(loss))
            named = {k: grads[t] for k, t in params.items()}
            new, adam = adam_step({k: t.value for k, t in params.items()}, named, adam, lr,
                                  config.weight_decay)
            for k, t in params.items():
                t.value = new[k]
            losses.append(value)
            gnorms.append(_grad_norm(named.values()))
            fnorms.append(_grad_norm(g for k, g in named.items() if not k.startswith("head")))
            skipped += info["skipped"]
            max_norm = max(max_norm, info["emb_norm"])
            if "dis" in info:
                dis.append(info["dis"])
        dev_auc, dev_acer = _dev_metrics(model, pipeline, x_dev, y_dev, config.target_bpcer)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "dev_auc": dev_auc,
            "dev_acer": dev_acer,
            "grad_norm": float(np.mean(gnorms)),
            "feature_grad_norm": float(np.mean(fnorms)),
            "max_emb_norm": max_norm,
            "skipped_contrastive": skipped,
        }
        if dis:
            row["dis_loss"] = float(np.mean(dis))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(model, config, pipeline, history, meta)


def euclidean_baseline(config: TrainConfig) -> TrainConfig:
    """Same run with the exp-map, hyperbolic head and hyperbolic distance swapped out."""
    return replace(config, mode="euclidean")


# --------------------------------------------------------------------- outputs


def write_log_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def save_run(result: TrainResult, outdir, extra_meta: dict | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(result.meta, **(extra_meta or {}))
    save_checkpoint(out / "checkpoint.json", result.state(), meta)
    write_log_csv(out / "log.csv", result.history)
    (out / "history.json").write_text(json.dumps(result.history, indent=1))
    return out


def load_model(path):
    state, meta = load_checkpoint(path)
    model = build_model(meta)
    load_state_dict(model, state)
    return model, meta
