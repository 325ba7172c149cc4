"""Command-line entry point: ``csiloc <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import CONTAINER_VERSION, __version__
from .augment import AugmentationSpec, augment
from .channel import BlockerTrajectory, SimConfig, desk_config, desk_trajectories, simulate
from .core import load_dataset, write_dataset
from .experiment import (TrainConfig, attention_heatmap, evaluate, make_augmentation,
                         run_generalization_experiment, seed_sweep, write_comparison,
                         write_eval_report, write_heatmap, write_seed_table)
from .model import ModelConfig, TrainedModel, load_checkpoint, save_checkpoint

log = logging.getLogger("csiloc")

METHOD_ALIASES = {"none": "none", "vanilla": "vanilla", "ra": "random_attenuation",
                  "random_attenuation": "random_attenuation"}

TRAIN_DEFAULTS = {
    "model": "adn", "seeds": 10, "augment": "none", "epochs": 200, "batch_size": 64,
    "lr": 1e-3, "patience": 20, "master_seed": 0, "min_db": 10.0, "max_db": 40.0,
    "d_sub": 32, "d_ant": 32, "jobs": 1,
}
EXPERIMENT_DEFAULTS = {
    "master_seed": 0, "seeds": 10, "epochs": 200, "batch_size": 64, "lr": 1e-3, "patience": 20,
    "samples_per_position": 500, "snr_db": 20.0, "jobs": 1,
}


class CliError(Exception):
    pass


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        resolved.update({k.replace("-", "_"): v for k, v in json.loads(path.read_text()).items()})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _load(path, what="dataset"):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return load_dataset(path)


def cmd_simulate(args) -> None:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise CliError(f"config file not found: {cfg_path}")
    cfg = SimConfig.from_json(cfg_path)
    if args.seed is not None:
        cfg.seed = args.seed
    traj = BlockerTrajectory.from_json(args.trajectory) if args.trajectory else None
    scenario = args.scenario_id if args.scenario_id is not None else (1 if traj else 0)
    ds = simulate(cfg, traj, scenario_id=scenario)
    out = Path(args.out)
    write_dataset(ds, out)
    counts = Counter(int(s.scenario_id) for s in ds)
    print(f"wrote {len(ds)} samples to {out}")
    print("scenario_id counts: " + ", ".join(f"{k}: {v}" for k, v in sorted(counts.items())))
    _write_manifest(out.with_name(out.name + ".manifest.json"), {
        "command": "simulate", "sim_config": cfg.to_dict(),
        "trajectory": traj.to_dict() if traj else None, "scenario_id": scenario,
        "samples": len(ds),
    })


def cmd_augment(args) -> None:
    method = METHOD_ALIASES.get(args.method)
    if method is None or method == "none":
        raise CliError(f"unknown method {args.method!r}; use vanilla or ra")
    if method == "vanilla" and (args.min_db is not None or args.max_db is not None):
        print("warning: --min-db/--max-db are ignored for --method vanilla", file=sys.stderr)
    min_db = 10.0 if args.min_db is None or method == "vanilla" else args.min_db
    max_db = 40.0 if args.max_db is None or method == "vanilla" else args.max_db
    try:
        spec = AugmentationSpec(method=method, sample_fraction=args.fraction, min_db=min_db,
                                max_db=max_db, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    ds = _load(args.input)
    out_ds = augment(ds, spec)
    write_dataset(out_ds, args.out)
    print(f"{len(ds)} + {len(out_ds) - len(ds)} = {len(out_ds)}")
    out = Path(args.out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), {
        "command": "augment", "input": str(args.input), "augmentation": spec.to_dict(),
        "original": len(ds), "added": len(out_ds) - len(ds),
    })


def _split_train_val(ds, seed):
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = max(1, int(round(len(ds) * 0.15 / 0.85)))
    return ds.subset(perm[n_val:]), ds.subset(perm[:n_val])


def cmd_train(args) -> None:
    opts = _resolve(args, TRAIN_DEFAULTS)
    kind = str(opts["model"]).lower()
    if kind not in ("dn", "adn"):
        raise CliError(f"unknown model {kind!r}; use dn or adn")
    aug_name = METHOD_ALIASES.get(str(opts["augment"]))
    if aug_name is None:
        raise CliError(f"unknown augmentation {opts['augment']!r}")
    train = _load(args.train)
    static_test = _load(args.static_test)
    if args.val:
        val = _load(args.val)
    else:
        train, val = _split_train_val(train, opts["master_seed"])
    for name, ds in (("static test", static_test), ("validation", val)):
        if ds.geometry.shape != train.geometry.shape:
            raise CliError(
                f"{name} dims M={ds.geometry.num_antennas}, K={ds.geometry.num_subcarriers} differ "
                f"from training dims M={train.geometry.num_antennas}, K={train.geometry.num_subcarriers}"
            )
    M, K = train.geometry.shape
    cfg = TrainConfig(
        model=ModelConfig.for_kind(kind, M, K, d_sub=opts["d_sub"], d_ant=opts["d_ant"]),
        lr=opts["lr"], batch_size=opts["batch_size"], max_epochs=opts["epochs"],
        early_stop_patience=opts["patience"], num_seeds=opts["seeds"],
        augmentation=make_augmentation(aug_name, opts["master_seed"], opts["min_db"], opts["max_db"]),
        master_seed=opts["master_seed"],
    )
    best, rows = seed_sweep(train, val, static_test, cfg, jobs=opts["jobs"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out / "model.ckpt")
    write_seed_table(rows, out / "seeds.csv")
    _write_manifest(out / "manifest.json", {
        "command": "train", "train": str(args.train), "static_test": str(args.static_test),
        "val": str(args.val) if args.val else None, "options": opts, "train_config": cfg.to_dict(),
        "selected_seed": best.metadata["seed"],
    })
    print(f"selected seed {best.metadata['seed']}: static test {best.metadata['static_test_mm']:.2f} mm")


def _model_from(path) -> "TrainedModel":
    p = Path(path)
    if p.is_dir():
        p = p / "model.ckpt"
    if not p.exists():
        raise CliError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_eval(args) -> None:
    model = _model_from(args.model)
    ds = _load(args.data)
    report = evaluate(model, ds)
    out = Path(args.report)
    write_eval_report(report, out)
    _write_manifest(out / "manifest.json", {
        "command": "eval", "model": str(args.model), "data": str(args.data),
        "mean_error_mm": report.mean_error_mm,
    })
    print(f"mean error {report.mean_error_mm:.2f} mm over {len(ds)} samples")


def cmd_heatmap(args) -> None:
    model = _model_from(args.model)
    if not model.has_antenna_attention:
        raise CliError("model has no antenna attention")
    ds = _load(args.data)
    weights = attention_heatmap(model, ds)
    out = Path(args.out)
    write_heatmap(weights, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), {
        "command": "heatmap", "model": str(args.model), "data": str(args.data),
    })
    print(f"wrote {weights.shape[0]} x {weights.shape[1]} heatmap to {out}")


def cmd_run_paper_experiment(args) -> None:
    opts = _resolve(args, EXPERIMENT_DEFAULTS)
    sim = desk_config(seed=opts["master_seed"], samples_per_position=opts["samples_per_position"],
                      snr_db=opts["snr_db"])
    trajectories = desk_trajectories()
    base = TrainConfig(model=ModelConfig.for_kind("dn", 16, 16), lr=opts["lr"],
                       batch_size=opts["batch_size"], max_epochs=opts["epochs"],
                       early_stop_patience=opts["patience"], num_seeds=opts["seeds"],
                       master_seed=opts["master_seed"])
    report = run_generalization_experiment(sim, trajectories, base, jobs=opts["jobs"])
    report.manifest["options"] = opts
    out = Path(args.out)
    write_comparison(report, out)
    for row in report.table():
        print(f"{row['model']:>3} {row['augmentation']:<18} dynamic {row['mean_error_mm']:9.2f} mm"
              f"   static {row['static_test_mm']:8.2f} mm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csiloc", description=__doc__)
    parser.add_argument("--version", action="version",
                        version=f"csiloc {__version__} (CSID container v{CONTAINER_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a CSID dataset from a SimConfig JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario-id", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("augment", help="append blocked-antenna copies to a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--min-db", type=float)
    p.add_argument("--max-db", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="seed sweep with selection on the static test set")
    p.add_argument("--train", required=True)
    p.add_argument("--static-test", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--model", choices=["dn", "adn"])
    p.add_argument("--augment", choices=["none", "vanilla", "ra", "random_attenuation"])
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--min-db", type=float)
    p.add_argument("--max-db", type=float)
    p.add_argument("--d-sub", type=int)
    p.add_argument("--d-ant", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-sample errors, CDF and summary CSVs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="antenna attention weights per sample (ADN only)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("run-paper-experiment", help="full static-to-changing comparison on desk defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--samples-per-position", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_run_paper_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
