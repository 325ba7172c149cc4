"""Training, seed sweeps, evaluation and the static-to-changing comparison protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentationSpec, augment
from .channel import BlockerTrajectory, SimConfig, simulate
from .core import Dataset, compute_normalizer, split_dataset
from .model import (ModelConfig, TrainedModel, antenna_attention_for_dataset, build_model,
                    forward_graph, predict)

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "vanilla", "random_attenuation")
MODEL_KINDS = ("dn", "adn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    early_stop_patience: int = 20
    num_seeds: int = 10
    augmentation: AugmentationSpec | None = None
    master_seed: int = 0

    def __post_init__(self):
        if self.num_seeds < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("num_seeds, batch_size and early_stop_patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["augmentation"] = None if self.augmentation is None else self.augmentation.to_dict()
        return d


@dataclass
class EvalReport:
    per_sample_errors: np.ndarray       # mm, dataset order
    scenario_ids: np.ndarray
    mean_error_mm: float
    cdf: np.ndarray                     # (N, 2): error_mm, fraction
    per_scenario: dict = field(default_factory=dict)
    attention: np.ndarray | None = None  # (N, M)


def euclidean_errors_mm(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred) - np.asarray(true), axis=1) * 1000.0


def empirical_cdf(errors: np.ndarray) -> np.ndarray:
    e = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(e)
    return np.column_stack([e, np.arange(1, n + 1) / n])


def report_from_errors(errors_mm: np.ndarray, scenario_ids: np.ndarray, attention=None,
                       split_scenarios: bool = True) -> EvalReport:
    errors_mm = np.asarray(errors_mm, dtype=np.float64)
    scenario_ids = np.asarray(scenario_ids)
    per = {}
    if split_scenarios:
        for sid in np.unique(scenario_ids):
            sel = scenario_ids == sid
            per[int(sid)] = report_from_errors(
                errors_mm[sel], scenario_ids[sel],
                None if attention is None else attention[sel], split_scenarios=False)
    return EvalReport(errors_mm, scenario_ids, float(np.mean(errors_mm)), empirical_cdf(errors_mm),
                      per, attention)


def evaluate(model: TrainedModel, ds: Dataset, with_attention: bool = False) -> EvalReport:
    pred = predict(model, ds)
    errors = euclidean_errors_mm(pred, ds.positions())
    attn = antenna_attention_for_dataset(model, ds) if with_attention else None
    return report_from_errors(errors, ds.scenario_ids(), attn)


def attention_heatmap(model: TrainedModel, ds: Dataset) -> np.ndarray:
    """(M, N) grid: column n holds the antenna weights for sample n."""
    if not model.has_antenna_attention:
        raise ValueError("model has no antenna attention")
    return antenna_attention_for_dataset(model, ds).T


def dataset_digest(ds: Dataset) -> str:
    """Hash of every sample's CSI, label and scenario; used to prove val/test stay untouched."""
    m = hashlib.sha256()
    for s in ds:
        m.update(np.ascontiguousarray(s.h).tobytes())
        m.update(s.position.tobytes())
        m.update(int(s.scenario_id).to_bytes(4, "little"))
    return m.hexdigest()


def _mean_error_mm(model: TrainedModel, h_norm: np.ndarray, positions: np.ndarray, batch: int = 512) -> float:
    preds = []
    for i in range(0, len(h_norm), batch):
        out, _ = forward_graph(_frozen_params(model), model.config, h_norm[i:i + batch])
        preds.append(out.data.astype(np.float64) + np.asarray(model.position_offset))
    return float(np.mean(euclidean_errors_mm(np.concatenate(preds), positions)))


def _frozen_params(model):
    return {k: ad.constant(v.data) for k, v in model.params.items()}


def train_once(train: Dataset, val: Dataset, cfg: TrainConfig, seed: int):
    """Adam on mean squared Euclidean error with early stopping on val mean error.

    The normalizer and position offset come from the un-augmented training split;
    augmentation (if any) is applied to train only, before the first epoch.
    Returns the best-val model and a history dict.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    normalizer = compute_normalizer(train)
    offset = train.positions().mean(axis=0)
    if cfg.augmentation is not None:
        train = augment(train, cfg.augmentation)

    model_cfg = replace(cfg.model, init_seed=seed)
    model = build_model(model_cfg, normalizer, offset)
    dtype = model_cfg.dtype
    h_train = normalizer.apply(train.csi())
    y_train = (train.positions() - offset).astype(dtype)
    h_val = normalizer.apply(val.csi())
    y_val = val.positions()

    params = model.parameter_list()
    state = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = {"train_loss": [], "val_mm": [], "first_batch_loss": None}
    best_val = np.inf
    best_params = None
    best_epoch = -1
    n = len(train)
    for epoch in range(cfg.max_epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            try:
                out, _ = forward_graph(model.params, model_cfg, h_train[idx])
                # mse averages over both coordinates; x2 gives mean squared Euclidean error
                loss = ad.scale(ad.mse(out, ad.constant(y_train[idx])), 2.0)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"seed {seed}, epoch {epoch}: {exc}") from exc
            if history["first_batch_loss"] is None:
                history["first_batch_loss"] = float(loss.data)
            ad.backward(loss)
            ad.adam_step(params, [p.grad for p in params], state)
            total += float(loss.data) * len(idx)
        history["train_loss"].append(total / n)
        val_mm = _mean_error_mm(model, h_val, y_val)
        if not np.isfinite(val_mm):
            raise TrainingDiverged(f"seed {seed}, epoch {epoch}: non-finite validation error")
        history["val_mm"].append(val_mm)
        if val_mm < best_val:
            best_val, best_epoch = val_mm, epoch
            best_params = [p.data.copy() for p in params]
        elif epoch - best_epoch >= cfg.early_stop_patience:
            break

    for p, best in zip(params, best_params):
        p.data = best
    model.metadata = {
        "seed": int(seed),
        "epochs": len(history["val_mm"]),
        "best_epoch": int(best_epoch) + 1,
        "val_error_mm": float(best_val),
        "augmentation": "none" if cfg.augmentation is None else cfg.augmentation.method,
        "train_size": n,
    }
    return model, history


def _sweep_job(args):
    train, val, static_test, cfg, seed = args
    t0 = time.perf_counter()
    try:
        model, history = train_once(train, val, cfg, seed)
    except (TrainingDiverged, FloatingPointError) as exc:
        log.warning("seed %d failed: %s", seed, exc)
        return seed, None, str(exc), time.perf_counter() - t0
    model.metadata["static_test_mm"] = evaluate(model, static_test).mean_error_mm
    return seed, model, None, time.perf_counter() - t0


def seed_sweep(train: Dataset, val: Dataset, static_test: Dataset, cfg: TrainConfig, jobs: int = 1):
    """Train seeds master_seed .. master_seed+num_seeds-1 and keep the lowest static-test error.

    Returns (best model, per-seed rows). Ties go to the lower seed. Each row also
    flags the model validation error alone would have picked.
    """
    seeds = [cfg.master_seed + i for i in range(cfg.num_seeds)]
    jobs_args = [(train, val, static_test, cfg, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, jobs_args))
    else:
        results = [_sweep_job(a) for a in jobs_args]

    ok = [(s, m) for s, m, err, _ in results if m is not None]
    if not ok:
        raise TrainingDiverged("all seeds failed: " + "; ".join(err for _, _, err, _ in results))
    best_seed, best = min(ok, key=lambda sm: (sm[1].metadata["static_test_mm"], sm[0]))
    val_seed, _ = min(ok, key=lambda sm: (sm[1].metadata["val_error_mm"], sm[0]))
    rows = []
    for seed, model, err, secs in results:
        rows.append({
            "seed": seed,
            "val_mm": np.nan if model is None else model.metadata["val_error_mm"],
            "static_test_mm": np.nan if model is None else model.metadata["static_test_mm"],
            "epochs": 0 if model is None else model.metadata["epochs"],
            "selected": seed == best_seed,
            "val_selected": seed == val_seed,
            "error": err or "",
            "seconds": secs,
        })
    return best, rows


@dataclass
class CellResult:
    model_kind: str
    augmentation: str          # none | vanilla | random_attenuation | upper_bound
    model: TrainedModel
    static_test_mm: float
    dynamic: EvalReport
    seed_table: list

    @property
    def mean_error_mm(self) -> float:
        return self.dynamic.mean_error_mm

    @property
    def name(self) -> str:
        return f"{self.model_kind}_{self.augmentation}"


@dataclass
class ComparisonReport:
    cells: list
    manifest: dict

    def cell(self, model_kind: str, augmentation: str) -> CellResult:
        for c in self.cells:
            if c.model_kind == model_kind and c.augmentation == augmentation:
                return c
        raise KeyError((model_kind, augmentation))

    def table(self) -> list[dict]:
        return [{"model": c.model_kind, "augmentation": c.augmentation,
                 "mean_error_mm": c.mean_error_mm, "static_test_mm": c.static_test_mm}
                for c in self.cells]


def default_train_config(M: int, K: int, kind: str = "dn", **kw) -> TrainConfig:
    return TrainConfig(model=ModelConfig.for_kind(kind, M, K), **kw)


def make_augmentation(name: str, seed: int, min_db: float = 10.0, max_db: float = 40.0):
    if name == "none":
        return None
    return AugmentationSpec(method=name, sample_fraction=0.5, min_db=min_db, max_db=max_db, seed=seed)


def run_generalization_experiment(sim_config: SimConfig, trajectories: list[BlockerTrajectory],
                                  base_cfg: TrainConfig, models=MODEL_KINDS,
                                  augmentations=AUGMENTATIONS, upper_bound: bool = True,
                                  jobs: int = 1) -> ComparisonReport:
    """Train on the static scenario, evaluate on blocker scenarios.

    ``base_cfg`` supplies optimizer, epochs, seed count and master seed; its model
    config is only used for widths. The static scenario is split 70-15-15 with the
    master seed; each (model, augmentation) cell runs a seed sweep selected on the
    static test split and is scored on every dynamic sample. Upper-bound cells are
    trained and tested on a 70-15-15 split of the dynamic data.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    master = base_cfg.master_seed
    geom = sim_config.geometry
    static = simulate(sim_config)
    dynamic_parts = [simulate(sim_config, t, scenario_id=i + 1) for i, t in enumerate(trajectories)]
    dynamic = dynamic_parts[0]
    for part in dynamic_parts[1:]:
        dynamic = dynamic.concat(part)
    train, val, test = split_dataset(static, (0.70, 0.15, 0.15), seed=master)
    digests = (dataset_digest(val), dataset_digest(test))

    def cell_cfg(kind, aug):
        mc = replace(base_cfg.model, M=geom.num_antennas, K=geom.num_subcarriers,
                     with_subcarrier_attention=kind == "adn", with_antenna_attention=kind == "adn")
        return replace(base_cfg, model=mc, augmentation=make_augmentation(aug, master))

    cells = []
    for kind in models:
        for aug in augmentations:
            t0 = time.perf_counter()
            cfg = cell_cfg(kind, aug)
            best, rows = seed_sweep(train, val, test, cfg, jobs=jobs)
            if (dataset_digest(val), dataset_digest(test)) != digests:
                raise AssertionError("augmentation leaked into validation or test data")
            dyn = evaluate(best, dynamic, with_attention=best.has_antenna_attention)
            cells.append(CellResult(kind, aug, best, best.metadata["static_test_mm"], dyn, rows))
            log.info("%s/%s: static %.1f mm, dynamic %.1f mm (%.0fs)", kind, aug,
                     cells[-1].static_test_mm, dyn.mean_error_mm, time.perf_counter() - t0)

    if upper_bound:
        d_train, d_val, d_test = split_dataset(dynamic, (0.70, 0.15, 0.15), seed=master)
        for kind in models:
            cfg = cell_cfg(kind, "none")
            best, rows = seed_sweep(d_train, d_val, d_test, cfg, jobs=jobs)
            dyn = evaluate(best, d_test, with_attention=best.has_antenna_attention)
            static_mm = evaluate(best, test).mean_error_mm
            cells.append(CellResult(kind, "upper_bound", best, static_mm, dyn, rows))
            log.info("%s/upper_bound: dynamic-test %.1f mm", kind, dyn.mean_error_mm)

    manifest = {
        "sim_config": sim_config.to_dict(),
        "trajectories": [t.to_dict() for t in trajectories],
        "train_config": base_cfg.to_dict(),
        "models": list(models),
        "augmentations": list(augmentations),
        "split": {"ratios": [0.70, 0.15, 0.15], "seed": master,
                  "sizes": [len(train), len(val), len(test)]},
        "dynamic_samples": len(dynamic),
        "val_digest": digests[0],
        "test_digest": digests[1],
    }
    return ComparisonReport(cells, manifest)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_eval_report(report: EvalReport, out_dir, prefix: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{prefix}per_sample_errors.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "scenario_id", "error_mm"])
        for i, (sid, e) in enumerate(zip(report.scenario_ids, report.per_sample_errors)):
            w.writerow([i, int(sid), _fmt(e)])
    with open(out / f"{prefix}cdf.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["error_mm", "fraction"])
        for e, frac in report.cdf:
            w.writerow([_fmt(e), _fmt(frac)])
    with open(out / f"{prefix}summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario_id", "samples", "mean_error_mm"])
        w.writerow(["all", len(report.per_sample_errors), _fmt(report.mean_error_mm)])
        for sid, sub in report.per_scenario.items():
            w.writerow([sid, len(sub.per_sample_errors), _fmt(sub.mean_error_mm)])


def write_heatmap(weights: np.ndarray, path) -> None:
    """(M, N) grid as CSV: header row of sample indices, one row per antenna."""
    M, N = weights.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["antenna"] + [f"s{n}" for n in range(N)])
        for m in range(M):
            w.writerow([m] + [_fmt(v) for v in weights[m]])


def write_seed_table(rows: list[dict], path) -> None:
    cols = ["seed", "val_mm", "static_test_mm", "epochs", "selected", "val_selected", "error"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def write_comparison(report: ComparisonReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "augmentation", "mean_error_mm", "static_test_mm"])
        for row in report.table():
            w.writerow([row["model"], row["augmentation"], _fmt(row["mean_error_mm"]),
                        _fmt(row["static_test_mm"])])
    for c in report.cells:
        cell_dir = out / c.name
        write_eval_report(c.dynamic, cell_dir)
        write_seed_table(c.seed_table, cell_dir / "seeds.csv")
        if c.dynamic.attention is not None:
            write_heatmap(c.dynamic.attention.T, cell_dir / "heatmap.csv")
    (out / "manifest.json").write_text(json.dumps(report.manifest, indent=2, sort_keys=True))
