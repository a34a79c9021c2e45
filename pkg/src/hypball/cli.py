"""Command-line entry point.

Every option can come from a YAML config file (``--config``, flat mapping
of option names with underscores) or from flags. Precedence, lowest first:
built-in default, config file, ``HYPBALL_SEED`` (seed only), explicit flag.
The resolved configuration is written next to every output.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck as gc
from .data import Dataset, HierarchySpec, ProtocolSplit, generate_synthetic, load_jsonl, save_jsonl, split, split_cross_set
from .errors import HypballError, UsageError
from .evaluation import ScoreSet, format_table, protocol_report, write_report
from .losses import LossWeights
from .training import CONTRASTIVE, MODES, TrainConfig, embeddings, load_model, predict, save_run, train_run

SEED_ENV = "HYPBALL_SEED"


def _int_list(v):
    if isinstance(v, str):
        return [int(p) for p in v.split(",") if p.strip()]
    return [int(p) for p in v]


def _str_list(v):
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return [str(p) for p in v]


def _json_tree(v):
    return json.loads(v) if isinstance(v, str) else dict(v)


def _opt_int(v):
    return None if v is None or v == "none" else int(v)


def _opt_str(v):
    return None if v is None else str(v)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    choices: tuple | None = None


_spec = HierarchySpec()
_tc = TrainConfig()
_w = LossWeights()

DATA_OPTS = [
    Opt("seed", int, _spec.seed, "generator seed"),
    Opt("latent_dim", int, _spec.latent_dim, "latent dimension of the cluster means"),
    Opt("root_scale", float, _spec.root_scale, "distance of top-level categories from the origin"),
    Opt("decay", float, _spec.decay, "per-level shrink of sibling separation"),
    Opt("noise", float, _spec.noise, "within-leaf latent noise"),
    Opt("view_noise_ratio", float, _spec.view_noise_ratio, "per-modality noise relative to latent noise"),
    Opt("bonafide_separation", float, _spec.bonafide_separation, "distance of the bonafide mean from the origin"),
    Opt("bonafide_noise", float, _spec.bonafide_noise, "bonafide latent noise"),
    Opt("n_per_leaf", int, _spec.n_per_leaf, "samples per attack leaf"),
    Opt("n_bonafide", int, _spec.n_bonafide, "bonafide samples"),
    Opt("modality_widths", _int_list, list(_spec.modality_widths), "comma-separated feature widths"),
    Opt("modality_names", _str_list, list(_spec.modality_names), "comma-separated modality names"),
    Opt("tree", _json_tree, _spec.tree, "attack taxonomy as JSON; empty objects are leaves"),
]

TRAIN_OPTS = [
    Opt("seed", int, _tc.seed, "initialisation and data-order seed"),
    Opt("c", float, _tc.c, "ball curvature"),
    Opt("alpha", float, _tc.alpha, "feature clip margin in [0, 1)"),
    Opt("dim", int, _tc.dim, "embedding dimension"),
    Opt("batch_size", _opt_int, _tc.batch_size, "batch size (none: 64 unimodal, 32 multimodal)"),
    Opt("epochs", int, _tc.epochs, "training epochs"),
    Opt("lr", float, _tc.lr, "initial learning rate"),
    Opt("lr_decay", float, _tc.lr_decay, "learning-rate decay factor"),
    Opt("lr_step", int, _tc.lr_step, "epochs between decays"),
    Opt("weight_decay", float, _tc.weight_decay, "L2 weight decay"),
    Opt("lambda1", float, _w.lambda1, "unimodal BCE weight"),
    Opt("lambda2", float, _w.lambda2, "unimodal contrastive weight"),
    Opt("gamma1", float, _w.gamma1, "multimodal distance-loss weight"),
    Opt("gamma2", float, _w.gamma2, "multimodal decomposed BCE weight"),
    Opt("gamma3", float, _w.gamma3, "multimodal decomposed contrastive weight"),
    Opt("gamma4", float, _w.gamma4, "multimodal fused contrastive weight"),
    Opt("tau", float, _w.tau, "contrastive temperature"),
    Opt("mode", str, _tc.mode, "geometry", MODES),
    Opt("contrastive", str, _tc.contrastive, "contrastive loss variant", CONTRASTIVE),
    Opt("modality", _opt_str, _tc.modality, "modality for unimodal training (none: first)"),
    Opt("backbone_hidden", _int_list, list(_tc.backbone_hidden), "comma-separated backbone hidden widths"),
    Opt("backbone_out", int, _tc.backbone_out, "backbone output width"),
    Opt("target_bpcer", float, _tc.target_bpcer, "dev BPCER used to fix the threshold"),
]

SPLIT_OPTS = [
    Opt("split", _opt_str, None, "existing split JSON; overrides the split_* options"),
    Opt("split_kind", str, "seen", "protocol for a fresh split", ("seen", "loo", "cross-set")),
    Opt("held_out", _opt_str, None, "attack type held out under loo"),
    Opt("split_seed", _opt_int, None, "split seed (none: the training seed)"),
    Opt("test_data", _opt_str, None, "second JSONL dataset for cross-set"),
]

COMMANDS = {
    "gen-data": (
        "generate a synthetic hierarchical dataset as JSON Lines",
        [Opt("out", str, None, "output JSONL path")] + DATA_OPTS,
    ),
    "train": (
        "train the unimodal pipeline",
        [Opt("data", str, None, "dataset JSONL"), Opt("out", str, None, "output directory")]
        + TRAIN_OPTS + SPLIT_OPTS,
    ),
    "train-mm": (
        "train the two-modality decompose/fuse pipeline",
        [Opt("data", str, None, "dataset JSONL"), Opt("out", str, None, "output directory")]
        + TRAIN_OPTS + SPLIT_OPTS,
    ),
    "eval": (
        "score a checkpoint on a split, or a score fixture, and report metrics",
        [
            Opt("checkpoint", _opt_str, None, "checkpoint JSON from train/train-mm"),
            Opt("data", _opt_str, None, "dataset JSONL"),
            Opt("split", _opt_str, None, "split JSON (defaults to split.json beside the checkpoint)"),
            Opt("scores", _opt_str, None, 'score fixture JSON {"dev": {"bonafide": [..], "attack": [..]}, "test": {..}}'),
            Opt("protocol", _opt_str, None, "protocol name in the report (none: from the split)"),
            Opt("target_bpcer", float, _tc.target_bpcer, "dev BPCER used to fix the threshold"),
            Opt("out", _opt_str, None, "output directory for report.json and report.txt"),
        ],
    ),
    "gradcheck": (
        "compare tape gradients with central differences for every op",
        [
            Opt("points", int, 20, "random points per op"),
            Opt("seed", int, 0, "sampling seed"),
            Opt("tolerance", float, gc.TOLERANCE, "maximum accepted relative error"),
            Opt("out", _opt_str, None, "optional output directory for gradcheck.json"),
        ],
    ),
    "export-embeddings": (
        "write per-sample embeddings and their ball norms as CSV",
        [
            Opt("checkpoint", str, None, "checkpoint JSON"),
            Opt("data", str, None, "dataset JSONL"),
            Opt("out", str, None, "output CSV path"),
        ],
    ),
}


@dataclass
class RunConfig:
    """Resolved options of one invocation."""

    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return {"command": self.command, **self.values}

    def hierarchy_spec(self) -> HierarchySpec:
        return HierarchySpec(**{o.name: self.values[o.name] for o in DATA_OPTS})

    def train_config(self) -> TrainConfig:
        v = self.values
        weights = LossWeights(**{k: v[k] for k in ("lambda1", "lambda2", "gamma1", "gamma2", "gamma3", "gamma4", "tau")})
        keys = ("seed", "c", "alpha", "dim", "batch_size", "epochs", "lr", "lr_decay", "lr_step",
                "weight_decay", "mode", "contrastive", "modality", "backbone_hidden", "backbone_out",
                "target_bpcer")
        return TrainConfig(weights=weights, **{k: v[k] for k in keys})

    def echo(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypball", description=__doc__.splitlines()[0],
                     epilog=f"{SEED_ENV} overrides the config-file seed; flags override both.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="YAML file of option values")
        for o in opts:
            kwargs = {"dest": o.name, "default": argparse.SUPPRESS, "help": f"{o.help} (default: {o.default})"}
            if o.choices:
                kwargs["choices"] = o.choices
            p.add_argument("--" + o.name.replace("_", "-"), **kwargs)
    return parser


def _coerce(o: Opt, value):
    try:
        value = o.type(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"option {o.name}: cannot parse {value!r} ({exc})") from exc
    if o.choices and value not in o.choices:
        raise UsageError(f"option {o.name} must be one of {list(o.choices)}, got {value!r}")
    return value


def resolve(command: str, flags: dict, config_path: str | None = None, env=None) -> RunConfig:
    """Merge defaults, config file, environment seed and flags."""
    env = os.environ if env is None else env
    opts = {o.name: o for o in COMMANDS[command][1]}
    merged = {name: o.default for name, o in opts.items()}
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {config_path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must be a mapping of option names")
        loaded.pop("command", None)
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise UsageError(f"unknown keys in {config_path} for {command}: {unknown}")
        merged.update({k: _coerce(opts[k], v) for k, v in loaded.items()})
    if "seed" in opts and env.get(SEED_ENV):
        merged["seed"] = _coerce(opts["seed"], env[SEED_ENV])
    merged.update({k: _coerce(opts[k], v) for k, v in flags.items()})
    return RunConfig(command, merged)


def _require(cfg: RunConfig, *names):
    missing = [n for n in names if cfg.values.get(n) is None]
    if missing:
        raise UsageError(f"{cfg.command} needs " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ----------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = generate_synthetic(cfg.hierarchy_spec())
    save_jsonl(dataset, out)
    cfg.echo(out.with_name(out.name + ".config.yaml"))
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def _make_split(cfg: RunConfig, dataset):
    if cfg["split"] is not None:
        return ProtocolSplit.load(cfg["split"]), dataset
    seed = cfg["seed"] if cfg["split_seed"] is None else cfg["split_seed"]
    if cfg["split_kind"] == "cross-set":
        _require(cfg, "test_data")
        other = load_jsonl(cfg["test_data"])
        s = split_cross_set(dataset, other, seed)
        return s, Dataset(list(dataset) + list(other), {**dataset.taxonomy, **other.taxonomy})
    return split(dataset, cfg["split_kind"], cfg["held_out"], seed), dataset


def _protocol_name(s: ProtocolSplit) -> str:
    return s.kind if s.held_out_attack is None else f"{s.kind}:{s.held_out_attack}"


def _report(model, meta, dataset, s: ProtocolSplit, protocol, target_bpcer) -> dict:
    mods = meta["modalities"]
    scored = {}
    for part in ("dev", "test"):
        ids = getattr(s, part)
        probs = predict(model, meta["pipeline"], [dataset.features(m, ids) for m in mods])
        scored[part] = ScoreSet.from_labels(probs, dataset.labels(ids))
    return protocol_report(scored["dev"], scored["test"], protocol or _protocol_name(s), target_bpcer)


def _emit_report(report: dict, outdir) -> None:
    table = format_table([report])
    print(table)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "report.json", [report])
        (out / "report.txt").write_text(table + "\n")


def cmd_train(cfg: RunConfig, pipeline: str) -> int:
    _require(cfg, "data", "out")
    config = cfg.train_config()
    dataset = load_jsonl(cfg["data"])
    s, dataset = _make_split(cfg, dataset)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out / "config.yaml")

    def progress(row):
        print(f"epoch {row['epoch']:>3}  lr {row['lr']:.3g}  loss {row['train_loss']:.5f}  "
              f"dev_auc {row['dev_auc']:.4f}  dev_acer {row['dev_acer']:.4f}")

    result = train_run(config, dataset, s, pipeline, on_epoch=progress)
    save_run(result, out)
    s.save(out / "split.json")
    _emit_report(_report(result.model, result.meta, dataset, s, None, config.target_bpcer), out)
    return 0


def _score_set(d: dict, name: str) -> ScoreSet:
    if not isinstance(d, dict) or not {"bonafide", "attack"} <= d.keys():
        raise UsageError(f"score fixture section {name!r} needs 'bonafide' and 'attack' lists")
    return ScoreSet(d["bonafide"], d["attack"])


def cmd_eval(cfg: RunConfig) -> int:
    if cfg["scores"] is not None:
        fixture = json.loads(Path(cfg["scores"]).read_text())
        if not isinstance(fixture, dict) or "test" not in fixture:
            raise UsageError("score fixture needs a 'test' section")
        test = _score_set(fixture["test"], "test")
        dev = _score_set(fixture["dev"], "dev") if "dev" in fixture else test
        report = protocol_report(dev, test, cfg["protocol"] or "fixture", cfg["target_bpcer"])
    else:
        _require(cfg, "checkpoint", "data")
        model, meta = load_model(cfg["checkpoint"])
        split_path = cfg["split"] or Path(cfg["checkpoint"]).with_name("split.json")
        s = ProtocolSplit.load(split_path)
        dataset = load_jsonl(cfg["data"])
        report = _report(model, meta, dataset, s, cfg["protocol"], cfg["target_bpcer"])
    if cfg["out"] is not None:
        cfg.echo(Path(cfg["out"]) / "config.yaml")
    _emit_report(report, cfg["out"])
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    worst = gc.run_suite(cfg["points"], cfg["seed"])
    width = max(map(len, worst))
    for name, err in worst.items():
        print(f"{name:<{width}}  {err:.3e}")
    top = max(worst.values())
    ok = top <= cfg["tolerance"]
    print(f"max relative error {top:.3e} ({'ok' if ok else 'FAIL'}, tolerance {cfg['tolerance']:g})")
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps({"worst": worst, "max": top}, indent=1))
        cfg.echo(out / "config.yaml")
    return 0 if ok else 2


def cmd_export(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "data", "out")
    model, meta = load_model(cfg["checkpoint"])
    dataset = load_jsonl(cfg["data"])
    emb = embeddings(model, meta["pipeline"], [dataset.features(m) for m in meta["modalities"]])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    norms = np.linalg.norm(emb, axis=-1)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "attack_type"] + [f"x{i}" for i in range(emb.shape[1])] + ["norm"])
        for s, e, n in zip(dataset, emb, norms):
            w.writerow([s.id, s.label, s.attack_type or ""] + [repr(float(v)) for v in e] + [repr(float(n))])
    cfg.echo(out.with_name(out.name + ".config.yaml"))
    print(f"wrote {len(dataset)} embeddings to {out}")
    return 0


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if ns.command is None:
            parser.print_help()
            raise UsageError("no command given")
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
        cfg = resolve(ns.command, flags, ns.config)
        if ns.command == "gen-data":
            return cmd_gen_data(cfg)
        if ns.command in ("train", "train-mm"):
            return cmd_train(cfg, "unimodal" if ns.command == "train" else "multimodal")
        if ns.command == "eval":
            return cmd_eval(cfg)
        if ns.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_export(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (HypballError, ValueError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
