"""Exit criteria. Each test prints one PASS/FAIL line (also collected in the terminal summary).

Criteria 6-9 train real models on the desk-scale data. Criterion 7 is the long
one (three master seeds x eight cells x ``CSILOC_ACCEPTANCE_SEEDS`` seeds,
default 10); set ``CSILOC_SKIP_SLOW=1`` to skip 6-9 during development.
"""

import os
import time
import warnings

import numpy as np
import pytest

from conftest import random_dataset, record_criterion
from csiloc import autodiff as ad
from csiloc.augment import AugmentationSpec, random_attenuation_augment, vanilla_augment
from csiloc.channel import (add_awgn, desk_config, desk_trajectories, los_csi,
                            simulate, wavelength)
from csiloc.cli import main
from csiloc.core import DatasetFormatError, load_dataset, split_dataset, write_dataset
from csiloc.experiment import (TrainConfig, attention_heatmap, evaluate, run_generalization_experiment,
                               train_once)
from csiloc.model import ModelConfig, attention, build_model, forward_graph

slow = pytest.mark.skipif(os.environ.get("CSILOC_SKIP_SLOW") == "1", reason="CSILOC_SKIP_SLOW=1")
ACCEPTANCE_SEEDS = int(os.environ.get("CSILOC_ACCEPTANCE_SEEDS", "10"))
MASTER_SEEDS = (0, 1, 2)


# -- 1. gradient correctness ------------------------------------------------

def _op_cases(rng):
    w34 = ad.constant(rng.normal(size=(3, 4)))
    w234 = ad.constant(rng.normal(size=(2, 3, 4)))
    dot = lambda x, w: ad.sum_all(ad.mul(x, w))  # noqa: E731
    return {
        "matmul": (lambda t: dot(ad.matmul(t[0], t[1]), w34), [(3, 5), (5, 4)]),
        "add_bias": (lambda t: dot(ad.add_bias(t[0], t[1]), w34), [(3, 4), (4,)]),
        "add": (lambda t: dot(ad.add(t[0], t[1]), w234), [(2, 3, 4), (2, 1, 4)]),
        "mul": (lambda t: dot(ad.mul(t[0], t[1]), w34), [(3, 4), (3, 4)]),
        "relu": (lambda t: dot(ad.relu(t[0]), w34), [(3, 4)]),
        "softmax_rows": (lambda t: dot(ad.softmax_rows(t[0]), w34), [(3, 4)]),
        "transpose": (lambda t: dot(ad.transpose(t[0]), w34), [(4, 3)]),
        "reshape": (lambda t: dot(ad.reshape(t[0], (3, 4)), w34), [(6, 2)]),
        "mean_rows": (lambda t: dot(ad.mean_rows(t[0]), ad.constant(np.arange(4.0))), [(5, 4)]),
        "scale": (lambda t: dot(ad.scale(t[0], 1.7), w34), [(3, 4)]),
        "sum": (lambda t: ad.sum_all(t[0]), [(3, 4)]),
        "mse": (lambda t: ad.mse(t[0], t[1]), [(3, 4), (3, 4)]),
    }


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_op, worst_name = 0.0, ""
    for name, (f, shapes) in _op_cases(rng).items():
        xs = [rng.normal(size=s) for s in shapes]
        if name == "relu":
            xs = [np.where(np.abs(x) < 0.05, 0.5, x) for x in xs]
        err = ad.grad_check(f, xs, eps=1e-5)
        if err > worst_op:
            worst_op, worst_name = err, name

    cfg = ModelConfig.for_kind("adn", 4, 4, d_sub=4, d_ant=4, head_widths=(16, 8), dtype="float64",
                               init_seed=11)
    init = build_model(cfg).params
    names = list(init)
    xs = [p.data * (3.0 if "attn" in n else 1.0) for n, p in init.items()]
    h = (rng.normal(size=(3, 4, 4)) + 1j * rng.normal(size=(3, 4, 4))) * 0.5
    target = ad.constant(rng.normal(size=(3, 2)))
    full = ad.grad_check(lambda ts: ad.mse(forward_graph(dict(zip(names, ts)), cfg, h)[0], target), xs)
    secs = time.perf_counter() - t0
    ok = worst_op < 1e-5 and full < 1e-4 and secs < 60
    record_criterion(1, ok, f"worst op rel err {worst_op:.2e} ({worst_name}) < 1e-5; "
                            f"full ADN rel err {full:.2e} < 1e-4; {secs:.1f}s < 60s")
    assert ok


# -- 2. attention invariants --------------------------------------------------

def test_criterion_2_attention():
    rng = np.random.default_rng(7)
    worst_row = 0.0
    singleton_exact = True
    zero_score_err = 0.0
    for _ in range(1000):
        T, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        q, k, v = (rng.normal(scale=3, size=(T, d)) for _ in range(3))
        out, weights = attention(q, k, v, return_weights=True)
        worst_row = max(worst_row, float(np.abs(weights.data.sum(axis=-1) - 1).max()))
        q1, k1, v1 = q[:1], k[:1], v[:1]
        singleton_exact &= attention(q1, k1, v1).data.tobytes() == v1.tobytes()
        zero = attention(np.zeros((T, d)), np.zeros((T, d)), v).data
        zero_score_err = max(zero_score_err, float(np.abs(zero - v.mean(axis=0)).max()))
    ok = worst_row <= 1e-6 and singleton_exact and zero_score_err < 1e-12
    record_criterion(2, ok, f"max |row sum - 1| {worst_row:.1e}; T=1 returns V exactly: {singleton_exact}; "
                            f"zero scores -> column means of V (err {zero_score_err:.1e})")
    assert ok


# -- 3. augmentation suite ---------------------------------------------------

def test_criterion_3_augmentation():
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        M = int(rng.integers(1, 12))
        ds = random_dataset(rng, n=n, M=M, K=4)
        for method in ("vanilla", "random_attenuation"):
            spec = AugmentationSpec(method=method, sample_fraction=0.5, min_db=10, max_db=40, seed=seed)
            fn = vanilla_augment if method == "vanilla" else random_attenuation_augment
            out, targets, gains = fn(ds, spec, np.random.default_rng(seed), return_details=True)
            again = fn(ds, spec, np.random.default_rng(seed))
            if len(out) != n + n // 2:
                failures.append(f"size {len(out)} != {n + n // 2}")
            if out.samples[:n] != ds.samples or again != out:
                failures.append("originals changed or not deterministic")
            for (idx, ants), g, aug in zip(targets, gains, out.samples[n:]):
                src = ds[idx]
                keep = np.setdiff1d(np.arange(M), ants)
                if aug.h[keep].tobytes() != src.h[keep].tobytes():
                    failures.append("unselected antenna modified")
                if not np.array_equal(aug.position, src.position) or aug.scenario_id != src.scenario_id:
                    failures.append("label not preserved")
                if method == "vanilla" and np.any(aug.h[ants] != 0):
                    failures.append("vanilla row not zero")
                if method == "random_attenuation" and not (10 ** -2 <= g <= 10 ** -0.5):
                    failures.append(f"gain {g} outside [1e-2, 10^-0.5]")
    ok = not failures
    record_criterion(3, ok, "sizes N+floor(N/2), zeroed rows, gains in [0.01, 0.316], untouched "
                            "antennas, labels, determinism" + ("" if ok else f" -- {failures[:3]}"))
    assert ok


# -- 4. container roundtrip ----------------------------------------------------

def test_criterion_4_container(tmp_path):
    exact = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, n=int(rng.integers(1, 8)), M=int(rng.integers(1, 9)),
                            K=int(rng.integers(1, 9)), pos_dim=int(rng.choice([2, 3])))
        path = tmp_path / f"{seed}.csid"
        write_dataset(ds, path)
        back = load_dataset(path)
        same = back == ds and all(a.h.view(np.uint32).tobytes() == b.h.view(np.uint32).tobytes()
                                  for a, b in zip(ds, back))
        exact += same
    raw = path.read_bytes()
    (tmp_path / "magic.csid").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "trunc.csid").write_bytes(raw[:-3])
    rejected = 0
    for name, msg in (("magic.csid", "bad magic"), ("trunc.csid", "truncated payload")):
        try:
            load_dataset(tmp_path / name)
        except DatasetFormatError as exc:
            rejected += msg in str(exc)
    ok = exact == 100 and rejected == 2
    record_criterion(4, ok, f"{exact}/100 bit-exact roundtrips; {rejected}/2 corruptions rejected")
    assert ok


# -- 5. simulator calibration -------------------------------------------------

def test_criterion_5_simulator():
    rng = np.random.default_rng(0)
    clean = los_csi(desk_config().geometry, (2.0, 3.0)).h
    snr_errs = []
    for snr in (5.0, 20.0):
        sig = noise = 0.0
        for _ in range(1000):
            n = add_awgn(clean, snr, rng) - clean
            sig += np.mean(np.abs(clean) ** 2)
            noise += np.mean(np.abs(n) ** 2)
        snr_errs.append(abs(10 * np.log10(sig / noise) - snr))

    cfg = desk_config(samples_per_position=480)
    traj = desk_trajectories()[0]
    _, masks = simulate(cfg, traj, return_masks=True)
    counts = masks.sum(axis=1).reshape(len(cfg.user_positions), -1)
    period = traj.period / cfg.sample_interval
    p = int(round(period))
    periodic = (abs(period - p) < 1e-9 and counts.max() > 0
                and np.array_equal(counts[:, p:], counts[:, :-p])
                and not any(np.array_equal(counts[:, lag:], counts[:, :-lag]) for lag in range(1, p)))

    lam = wavelength(2.61e9)
    lam_err = abs(lam - 0.11456) / 0.11456
    ratio_err = abs(0.070 / lam - 0.61) / 0.61
    ok = max(snr_errs) <= 0.5 and periodic and lam_err < 0.005 and ratio_err < 0.01
    record_criterion(5, ok, f"SNR error {max(snr_errs):.3f} dB <= 0.5; mask period {p} samples: {periodic}; "
                            f"lambda {lam * 1000:.2f} mm ({lam_err:.2%} from 114.56 mm); "
                            f"spacing {0.070 / lam:.3f} lambda ({ratio_err:.2%} from 0.61)")
    assert ok


# -- 6. static learnability -----------------------------------------------------

@slow
def test_criterion_6_static_learnability():
    static = simulate(desk_config(seed=0, samples_per_position=500, snr_db=20.0))
    train, val, test = split_dataset(static, seed=0)
    xmin, ymin, xmax, ymax = desk_config().room_bounds
    bound_mm = 0.05 * np.hypot(xmax - xmin, ymax - ymin) * 1000
    t0 = time.perf_counter()
    errors = {}
    for kind in ("dn", "adn"):
        model, _ = train_once(train, val, TrainConfig(model=ModelConfig.for_kind(kind, 16, 16)), seed=0)
        errors[kind] = evaluate(model, test).mean_error_mm
    secs = time.perf_counter() - t0
    ok = all(e < bound_mm for e in errors.values()) and secs < 600
    record_criterion(6, ok, f"static test DN {errors['dn']:.1f} mm, ADN {errors['adn']:.1f} mm "
                            f"< {bound_mm:.0f} mm; {secs:.0f}s < 600s")
    assert ok


# -- 7. generalization ordering --------------------------------------------------

@pytest.fixture(scope="module")
def ordering_runs():
    tables = []
    t0 = time.perf_counter()
    for ms in MASTER_SEEDS:
        base = TrainConfig(model=ModelConfig.for_kind("dn", 16, 16), num_seeds=ACCEPTANCE_SEEDS,
                           master_seed=ms)
        report = run_generalization_experiment(desk_config(seed=ms), desk_trajectories(), base)
        tables.append({(r["model"], r["augmentation"]): r for r in report.table()})
    return tables, time.perf_counter() - t0


@slow
def test_criterion_7_generalization_ordering(ordering_runs):
    tables, secs = ordering_runs
    med = {key: float(np.median([t[key]["mean_error_mm"] for t in tables])) for key in tables[0]}
    static_med = {key: float(np.median([t[key]["static_test_mm"] for t in tables])) for key in tables[0]}
    adn = [med[("adn", a)] for a in ("random_attenuation", "vanilla", "none")]
    a_ok = adn[0] <= adn[1] <= adn[2]
    b_ok = all(med[("adn", a)] <= med[("dn", a)] for a in ("none", "vanilla", "random_attenuation"))
    static_cells = [v for (m, a), v in med.items() if a != "upper_bound"]
    c_ok = max(med[("dn", "upper_bound")], med[("adn", "upper_bound")]) < min(static_cells)
    shift_ok = all(static_med[k] <= med[k] for k in med if k[1] != "upper_bound")
    table = ", ".join(f"{m}/{a} {v:.1f}" for (m, a), v in med.items())
    ok = a_ok and b_ok and c_ok
    record_criterion("7a", a_ok, f"median dynamic mm ADN: RA {adn[0]:.1f} <= vanilla {adn[1]:.1f} <= none {adn[2]:.1f}")
    record_criterion("7b", b_ok, "ADN <= DN per augmentation: " + ", ".join(
        f"{a} {med[('adn', a)]:.1f} vs {med[('dn', a)]:.1f}" for a in ("none", "vanilla", "random_attenuation")))
    record_criterion("7c", c_ok, f"upper bounds DN {med[('dn', 'upper_bound')]:.1f}, ADN "
                                 f"{med[('adn', 'upper_bound')]:.1f} < best static-trained {min(static_cells):.1f}")
    print(f"criterion 7 medians over master seeds {MASTER_SEEDS}, {ACCEPTANCE_SEEDS} seeds/cell, "
          f"{secs / 60:.1f} min: {table}; static <= dynamic in every cell: {shift_ok}")
    assert ok


# -- 8. heatmap diagnostics ---------------------------------------------------------

@slow
def test_criterion_8_heatmap():
    cfg = desk_config(seed=0)
    cfg.num_reflectors = 0
    static = simulate(cfg)
    train, val, test = split_dataset(static, seed=0)
    model, _ = train_once(train, val, TrainConfig(model=ModelConfig.for_kind("adn", 16, 16)), seed=0)
    hm = attention_heatmap(model, test)
    sums_ok = bool(np.abs(hm.sum(axis=0) - 1).max() <= 1e-6) and hm.shape == (16, len(test))

    ant_x = cfg.geometry.antenna_positions()[:, 0]
    left_half = ant_x < ant_x.mean()
    hits = total = 0
    for n, s in enumerate(test):
        x = s.position[0]
        if ant_x.min() <= x <= ant_x.max():
            continue  # only users beyond one end of the array
        nearer_left = x < ant_x.min()
        hits += left_half[int(np.argmax(hm[:, n]))] == nearer_left
        total += 1
    frac = hits / total
    record_criterion(8, sums_ok, f"heatmap {hm.shape}, columns sum to 1: {sums_ok}; argmax antenna in the "
                                 f"nearer half for {frac:.0%} of {total} end-user samples "
                                 f"(diagnostic, {'ok' if frac >= 0.5 else 'WARNING below 50%'})")
    if frac < 0.5:
        warnings.warn(f"attention argmax fell in the nearer array half for only {frac:.0%} of samples")
    assert sums_ok


# -- 9. end-to-end reproducibility ---------------------------------------------------

@slow
def test_criterion_9_reproducible_experiment(tmp_path):
    args = ["run-paper-experiment", "--master-seed", "3", "--seeds", "2", "--epochs", "15",
            "--samples-per-position", "100"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "comparison.csv").read_bytes()
    b = (tmp_path / "b" / "comparison.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == 9
    record_criterion(9, ok, f"two runs of run-paper-experiment (master seed 3) give byte-identical "
                            f"comparison.csv ({len(a)} bytes)")
    assert ok
