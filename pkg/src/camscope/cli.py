"""``camscope`` command line: gen | train | eval | explain.

Configuration is layered: built-in defaults, then an optional JSON config
file, then flags. ``CAMSCOPE_SEED`` fills the seed only when neither the
config file nor a flag sets one. Exit codes: 0 success, 2 usage or config
error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .cam import DEFAULT_TAU, explain, overlay_export
from .metrics import POLICIES, format_rate
from .model import ModelConfig, load_checkpoint, read_checkpoint_config
from .phantom import PhantomSpec, generate_dataset
from .train import CHECKPOINT_NAME, TrainConfig, evaluate, load_entry, train
from .volume_store import FormatError, VolumeMeta, read_manifest, write_volume

log = logging.getLogger("camscope")

RUN_CONFIG = "run_config.json"
SEED_ENV = "CAMSCOPE_SEED"


class UsageError(Exception):
    """Bad flags, config files or inputs; maps to exit code 2."""


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from exc


def _build(cls, fields: dict, what: str):
    unknown = set(fields) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown {what} fields: {sorted(unknown)}")
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {what}: {exc}") from exc


def _write_json(obj: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _split_manifest(data: Path, split: str):
    path = data / split / "manifest.json"
    if not path.exists():
        raise UsageError(f"no {split} manifest under {data}")
    try:
        return read_manifest(path)
    except (FormatError, ValueError) as exc:
        raise UsageError(f"bad manifest {path}: {exc}") from exc


def resolve_spec(args) -> PhantomSpec:
    fields = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    elif "seed" not in fields and _env_seed() is not None:
        fields["seed"] = _env_seed()
    return _build(PhantomSpec, fields, "phantom spec")


def resolve_run(args) -> dict:
    """Merge defaults, config file and flags into the frozen run configuration."""
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"preset", "model", "train", "seed"}
    if unknown:
        raise UsageError(f"unknown run config sections: {sorted(unknown)}")
    preset = args.preset or cfg.get("preset", "paper")
    if preset not in ("paper", "desk"):
        raise UsageError(f"unknown preset {preset!r}")
    model = dict(cfg.get("model", {}))
    trn = dict(cfg.get("train", {}))

    # one seed drives both weight init and batch order unless a section pins its own
    if args.seed is not None:
        model["seed"] = trn["seed"] = args.seed
    else:
        seed = cfg.get("seed")
        if seed is None and "seed" not in model and "seed" not in trn:
            seed = _env_seed()
        if seed is not None:
            model.setdefault("seed", seed)
            trn.setdefault("seed", seed)

    flags = {"epochs": args.epochs, "lr0": args.lr, "batch_size": args.batch_size}
    trn.update({k: v for k, v in flags.items() if v is not None})
    if args.attention_blocks is not None:
        model["attention_blocks"] = args.attention_blocks
    if args.input_shape is not None:
        model["input_shape"] = list(args.input_shape)

    base_model = ModelConfig.desk() if preset == "desk" else ModelConfig.paper()
    base_train = TrainConfig.desk() if preset == "desk" else TrainConfig()
    model_cfg = _build(ModelConfig, {**base_model.to_json(), **model}, "model config")
    train_cfg = _build(TrainConfig, {**base_train.to_json(), **trn}, "train config")
    return {"preset": preset, "model": model_cfg.to_json(), "train": train_cfg.to_json(),
            "data": str(Path(args.data).resolve()), "version": __version__}


def cmd_gen(args) -> int:
    spec = resolve_spec(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    manifests = generate_dataset(spec, args.out, jobs=args.jobs)
    counts = ", ".join(f"{s} {len(m)}" for s, m in manifests.items())
    print(f"wrote {spec.n_cases} cases to {args.out} ({counts})")
    return 0


def cmd_train(args) -> int:
    run_cfg = resolve_run(args)
    data = Path(args.data)
    tr = _split_manifest(data, "train")
    va = _split_manifest(data, "val")
    model_cfg = ModelConfig.from_json(run_cfg["model"])
    train_cfg = TrainConfig(**run_cfg["train"])
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run_cfg, run / RUN_CONFIG)
    result = train(tr, va, model_cfg, train_cfg, run_dir=run)
    print(f"best epoch {result.best_epoch}, val accuracy {result.best_val_accuracy:.4f}; "
          f"checkpoint {run / CHECKPOINT_NAME}")
    return 0


def _checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.exists():
        raise UsageError(f"no checkpoint at {path}")
    return p


def _check_config_match(ckpt: Path, config_path) -> None:
    """Refuse a run config whose model section disagrees with the checkpoint."""
    if config_path is None:
        sibling = ckpt.parent / RUN_CONFIG
        if not sibling.exists():
            return
        config_path = sibling
    cfg = _read_json(config_path)
    if "model" not in cfg:
        return
    stored = read_checkpoint_config(ckpt)
    wanted = _build(ModelConfig, {**stored.to_json(), **cfg["model"]}, "model config")
    if wanted != stored:
        diff = sorted(k for k, v in wanted.to_json().items() if stored.to_json()[k] != v)
        raise UsageError(f"checkpoint {ckpt} does not match {config_path}: {', '.join(diff)}")


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    _check_config_match(ckpt, args.config)
    manifest = _split_manifest(Path(args.data), args.split)
    model, _ = load_checkpoint(ckpt)
    report = evaluate(manifest, model, op_point=args.op_point, tau=args.tau, out_dir=args.out,
                      heatmap_dir=Path(args.out) / "heatmaps" if args.save_heatmaps else None)
    ir = report.case_level_ir
    print(f"auc {report.auc:.4f}  sensitivity {report.sensitivity:.4f}  specificity {report.specificity:.4f} "
          f"({args.op_point})  case-level IR {format_rate(ir) if ir is not None else 'n/a'}")
    return 0


def cmd_explain(args) -> int:
    if not 0.0 <= args.tau < 1.0:
        raise UsageError(f"--tau must lie in [0, 1), got {args.tau}")
    ckpt = _checkpoint(args.checkpoint)
    manifest = _split_manifest(Path(args.data), args.split)
    entries = []
    for case_id in args.cases:
        try:
            entries.append(manifest.find(case_id))
        except KeyError:
            raise UsageError(f"unknown case_id {case_id!r} in {args.split} split") from None
    model, _ = load_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        lung, meta = load_entry(manifest, entry, model.config.input_shape)
        heat, lik = explain(model, lung.data, class_index=args.class_index, tau=args.tau,
                            target_shape=meta.shape, interpolation=args.interpolation)
        hmeta = VolumeMeta(meta.shape, meta.spacing, "heatmap", entry.case_id, None)
        write_volume(heat.volume_scale, hmeta, out / f"{entry.case_id}_heat")
        # overlays use the windowed CT at native resolution
        native, _ = load_entry(manifest, entry, meta.shape)
        paths = overlay_export(native.data, heat, out, entry.case_id, alpha=args.alpha)
        print(f"{entry.case_id}: p(typical) {lik[1]:.4f}, {len(paths)} overlay slices")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="camscope", description="Synthetic CT phantoms, classifier training, evaluation and 3D activation maps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", required=True)
    # -q is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only print warnings")

    g = sub.add_parser("gen", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--spec", help="JSON file with phantom spec fields")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=1, help="cases generated in parallel")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a classifier and keep the best validation checkpoint")
    t.add_argument("--data", required=True, help="dataset directory written by gen")
    t.add_argument("--run", required=True, help="run directory for checkpoint, log and run config")
    t.add_argument("--config", help="JSON run config with optional preset/model/train/seed entries")
    t.add_argument("--preset", choices=("paper", "desk"), help="default sizes (paper: 192x192x64, desk: 96x96x48)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--attention-blocks", type=int, help="0 trains the model without attention")
    t.add_argument("--input-shape", type=int, nargs=3, metavar=("X", "Y", "Z"))
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--out", required=True, help="directory for report.json and roc.csv")
    e.add_argument("--config", help="run config that the checkpoint must match")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--op-point", default="fixed_0.5", choices=POLICIES)
    e.add_argument("--tau", type=float, default=DEFAULT_TAU)
    e.add_argument("--save-heatmaps", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", parents=[common], help="heatmaps and overlays for selected cases")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--cases", nargs="+", required=True, metavar="CASE_ID")
    x.add_argument("--split", default="test", choices=("train", "val", "test"))
    x.add_argument("--tau", type=float, default=DEFAULT_TAU, help="0 disables the exclusion")
    x.add_argument("--class-index", type=int, default=1, choices=(0, 1))
    x.add_argument("--interpolation", default="trilinear", choices=("trilinear", "nearest"))
    x.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"camscope {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("camscope %s failed", args.command)
        print(f"camscope {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
