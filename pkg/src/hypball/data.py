"""Synthetic hierarchical attack data, JSON Lines I/O and protocol splits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, UsageError

ATTACK, BONAFIDE = 0, 1
SPLIT_KINDS = ("seen", "loo", "cross-set")

DEFAULT_TREE = {
    "2d": {"print": {}, "replay": {}},
    "3d": {"rigid_mask": {}, "silicone_mask": {}},
}


@dataclass(frozen=True)
class Sample:
    id: str
    label: int
    attack_type: str | None
    features: dict[str, np.ndarray]

    def __post_init__(self):
        if self.label not in (ATTACK, BONAFIDE):
            raise SchemaError(f"{self.id}: label must be 0 or 1, got {self.label!r}")
        if (self.label == BONAFIDE) != (self.attack_type is None):
            raise SchemaError(f"{self.id}: bonafide samples have no attack_type and attacks need one")
        feats = {}
        for name, arr in self.features.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise SchemaError(f"{self.id}: modality {name!r} must be a finite vector")
            feats[name] = arr
        object.__setattr__(self, "features", feats)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "attack_type": self.attack_type,
            "features": {k: v.tolist() for k, v in self.features.items()},
        }


class Dataset:
    """An immutable, ordered collection of samples with consistent modality widths."""

    def __init__(self, samples, taxonomy: dict[str, list[str]] | None = None):
        self.samples: tuple[Sample, ...] = tuple(samples)
        self.taxonomy = dict(taxonomy or {})
        self._index = {}
        widths: dict[str, int] = {}
        for s in self.samples:
            if s.id in self._index:
                raise SchemaError(f"duplicate sample id {s.id!r}")
            self._index[s.id] = s
            for name, arr in s.features.items():
                if widths.setdefault(name, arr.shape[0]) != arr.shape[0]:
                    raise SchemaError(
                        f"{s.id}: modality {name!r} has width {arr.shape[0]}, expected {widths[name]}"
                    )
        self.widths = widths

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self._index[sample_id]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.widths)

    @property
    def attack_types(self) -> list[str]:
        return sorted({s.attack_type for s in self.samples if s.attack_type is not None})

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def features(self, modality: str, ids=None) -> np.ndarray:
        if modality not in self.widths:
            raise UsageError(f"unknown modality {modality!r}; have {list(self.widths)}")
        rows = self.samples if ids is None else [self._index[i] for i in ids]
        if not rows:
            return np.zeros((0, self.widths[modality]))
        return np.stack([s.features[modality] for s in rows])

    def labels(self, ids=None) -> np.ndarray:
        rows = self.samples if ids is None else [self._index[i] for i in ids]
        return np.array([s.label for s in rows], dtype=np.int64)


# ------------------------------------------------------------------ generation


@dataclass
class HierarchySpec:
    """Parameters of the synthetic taxonomy.

    ``tree`` nests category names; empty dicts are leaves and leaf names are
    the attack types. Child cluster means sit at distance ``root_scale *
    decay**depth`` from their parent mean, in a random direction.
    """

    tree: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_TREE)))
    latent_dim: int = 16
    root_scale: float = 4.0
    decay: float = 0.5
    noise: float = 1.0
    view_noise_ratio: float = 0.2
    bonafide_separation: float = 4.0
    bonafide_noise: float = 1.0
    n_per_leaf: int = 200
    n_bonafide: int = 400
    modality_widths: tuple[int, ...] = (32, 32)
    modality_names: tuple[str, ...] = ("rgb", "depth")
    seed: int = 0

    def __post_init__(self):
        self.modality_widths = tuple(int(w) for w in self.modality_widths)
        self.modality_names = tuple(self.modality_names)
        if len(self.modality_widths) != len(self.modality_names):
            raise UsageError("modality_widths and modality_names differ in length")
        if self.n_per_leaf <= 0 or self.n_bonafide <= 0:
            raise UsageError("sample counts must be positive")
        if self.noise <= 0 or self.bonafide_noise <= 0:
            raise UsageError("noise levels must be positive")
        if not 0 < self.decay < 1:
            raise UsageError("decay must lie in (0, 1)")
        leaves = list(_leaves(self.tree))
        if not leaves:
            raise UsageError("taxonomy has no leaves")
        names = [path[-1] for path in leaves]
        if len(set(names)) != len(names):
            raise UsageError("leaf names must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_widths"] = list(self.modality_widths)
        d["modality_names"] = list(self.modality_names)
        return d


def _leaves(tree, prefix=()):
    for name, sub in tree.items():
        path = (*prefix, name)
        if sub:
            yield from _leaves(sub, path)
        else:
            yield path


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: HierarchySpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    dim = spec.latent_dim
    means: dict[tuple, np.ndarray] = {(): np.zeros(dim)}

    def place(tree, prefix, depth):
        for name, sub in tree.items():
            path = (*prefix, name)
            means[path] = means[prefix] + spec.root_scale * spec.decay**depth * _unit(rng, dim)
            if sub:
                place(sub, path, depth + 1)

    place(spec.tree, (), 0)
    bonafide_mean = spec.bonafide_separation * _unit(rng, dim)
    views = [rng.normal(size=(dim, w)) / math.sqrt(dim) for w in spec.modality_widths]

    groups = [(None, bonafide_mean, spec.bonafide_noise, spec.n_bonafide)]
    groups += [(path, means[path], spec.noise, spec.n_per_leaf) for path in _leaves(spec.tree)]
    samples = []
    for path, mean, noise, count in groups:
        latent = mean + noise * rng.normal(size=(count, dim))
        feats = [
            latent @ m + spec.view_noise_ratio * noise * rng.normal(size=(count, m.shape[1]))
            for m in views
        ]
        tag = "bonafide" if path is None else path[-1]
        for i in range(count):
            samples.append(
                Sample(
                    id=f"{tag}-{i:05d}",
                    label=BONAFIDE if path is None else ATTACK,
                    attack_type=None if path is None else path[-1],
                    features={n: f[i] for n, f in zip(spec.modality_names, feats)},
                )
            )
    taxonomy = {path[-1]: list(path) for path in _leaves(spec.tree)}
    return Dataset(samples, taxonomy)


# ------------------------------------------------------------------------- I/O


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_jsonl(path) -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict) or not {"id", "label", "features"} <= rec.keys():
                raise ParseError("record needs id, label and features", lineno)
            try:
                samples.append(
                    Sample(
                        id=str(rec["id"]),
                        label=rec["label"],
                        attack_type=rec.get("attack_type"),
                        features=dict(rec["features"]),
                    )
                )
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
    return Dataset(samples)


# ---------------------------------------------------------------------- splits


@dataclass
class ProtocolSplit:
    train: list[str]
    dev: list[str]
    test: list[str]
    kind: str = "seen"
    held_out_attack: str | None = None

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise UsageError(f"unknown split kind {self.kind!r}")
        parts = [set(self.train), set(self.dev), set(self.test)]
        if sum(map(len, parts)) != len(set().union(*parts)):
            raise UsageError("train/dev/test id lists overlap")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolSplit":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ProtocolSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _stratified(ids_by_group: dict, fractions, rng) -> list[list[str]]:
    """Deal each group's shuffled ids into len(fractions) parts."""
    parts: list[list[str]] = [[] for _ in fractions]
    for key in sorted(ids_by_group, key=str):
        ids = list(ids_by_group[key])
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        cuts = np.round(np.cumsum(fractions)[:-1] * len(ids)).astype(int)
        for part, chunk in zip(parts, np.split(np.array(ids, dtype=object), cuts)):
            part.extend(chunk.tolist())
    return parts


def _groups(samples) -> dict:
    groups: dict = {}
    for s in samples:
        groups.setdefault((s.label, s.attack_type or ""), []).append(s.id)
    return groups


def split(dataset: Dataset, kind: str = "seen", held_out_attack: str | None = None, seed: int = 0) -> ProtocolSplit:
    """Stratified 60/20/20 (``seen``) or leave-one-attack-out (``loo``) split.

    Under ``loo`` every sample of ``held_out_attack`` goes to test together
    with a 20% bonafide share; the seen attacks are divided 75/25 between
    train and dev, which keeps the 60/20 train/dev ratio.
    """
    rng = np.random.default_rng(seed)
    if kind == "seen":
        train, dev, test = _stratified(_groups(dataset), (0.6, 0.2, 0.2), rng)
        return ProtocolSplit(train, dev, test, "seen")
    if kind == "loo":
        if held_out_attack not in dataset.attack_types:
            raise UsageError(f"unknown attack type {held_out_attack!r}; have {dataset.attack_types}")
        bona = {k: v for k, v in _groups(dataset).items() if k[0] == BONAFIDE}
        seen = {k: v for k, v in _groups(dataset).items() if k[0] == ATTACK and k[1] != held_out_attack}
        b_train, b_dev, b_test = _stratified(bona, (0.6, 0.2, 0.2), rng)
        a_train, a_dev = _stratified(seen, (0.75, 0.25), rng)
        held = [s.id for s in dataset if s.attack_type == held_out_attack]
        return ProtocolSplit(b_train + a_train, b_dev + a_dev, b_test + held, "loo", held_out_attack)
    if kind == "cross-set":
        raise UsageError("cross-set splits need two datasets; use split_cross_set")
    raise UsageError(f"unknown split kind {kind!r}")


def split_cross_set(train_set: Dataset, test_set: Dataset, seed: int = 0) -> ProtocolSplit:
    """Train/dev (75/25, stratified) from one dataset, test on all of another."""
    overlap = set(train_set.ids) & set(test_set.ids)
    if overlap:
        raise UsageError(f"datasets share {len(overlap)} sample ids")
    rng = np.random.default_rng(seed)
    train, dev = _stratified(_groups(train_set), (0.75, 0.25), rng)
    return ProtocolSplit(train, dev, list(test_set.ids), "cross-set")
