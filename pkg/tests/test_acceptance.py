"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line at its stated tolerance.

The verdict lines are also gathered into an "acceptance criteria" section of
the pytest terminal summary.
"""

import csv
import itertools
import json
import time
from pathlib import Path

import numpy as np
import scipy.linalg

from conftest import ACCEPTANCE_LINES
from qptad.cli import gradcheck_seed, main
from qptad.decoder import refine_points
from qptad.evaluator import Counts, EvalConfig, f1_score, match_detections
from qptad.pipeline import (ActionInstance, FeatureSequence, WindowSpec, encode_features, frames_to_grid,
                            grid_to_frames, ingest_features, make_windows, to_global, to_local,
                            write_features)
from qptad.seqblocks import SsmParams, conv_apply, discretize, kernel, scan
from qptad.trainer import hungarian_match

OVERFIT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "overfit.json"


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def stable_params(rng, n):
    """Random dense ``A`` shifted so every eigenvalue has real part in [-1, -0.05], random B, C, delta."""
    A = rng.normal(size=(n, n))
    A *= rng.uniform(0.5, 2.0) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    A -= (np.max(np.linalg.eigvals(A).real) + rng.uniform(0.05, 1.0)) * np.eye(n)
    return SsmParams(A, rng.normal(size=n), rng.normal(size=n), float(rng.uniform(0.01, 1.0)))


def test_criterion_01_ssm_dual_path():
    rng = np.random.default_rng(2024)
    worst = 0.0
    with Timer() as t:
        for _ in range(100):
            n, T = int(rng.integers(1, 9)), int(rng.integers(1, 65))
            p = stable_params(rng, n)
            d = discretize(p)
            u = rng.normal(size=T)
            worst = max(worst, float(np.max(np.abs(scan(d, p.C, u) - conv_apply(u, kernel(d, p.C, T))))))
    verdict(1, "SSM scan equals kernel convolution", worst <= 1e-9 and t.elapsed < 5.0,
            f"100 stable draws, max |diff| {worst:.2e} <= 1e-9, {t.elapsed:.2f}s < 5s")


def test_criterion_02_discretization_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    with Timer() as t:
        for _ in range(50):
            n = int(rng.integers(1, 9))
            p = SsmParams.random(rng, n, delta=float(rng.uniform(0.01, 1.0)))
            aug = np.zeros((n + 1, n + 1))
            aug[:n, :n] = p.delta * p.A
            aug[:n, n] = p.delta * p.B
            E = scipy.linalg.expm(aug)
            d = discretize(p)
            worst = max(worst, float(np.max(np.abs(d.A_x - E[:n, :n]))), float(np.max(np.abs(d.B_x - E[:n, n]))))
        B = rng.normal(size=4)
        z = discretize(SsmParams(np.zeros((4, 4)), B, np.ones(4), 0.3))
        zero_exact = np.array_equal(z.A_x, np.eye(4)) and np.array_equal(z.B_x, 0.3 * B)
        small = SsmParams.random(rng, 4, delta=1e-6)
        ds = discretize(small)
        normA = np.linalg.norm(small.A, 2)
        limit_ok = (np.linalg.norm(ds.A_x - np.eye(4), 2) <= 2e-6 * normA and
                    np.linalg.norm(ds.B_x - 1e-6 * small.B) <= 10 * 1e-12 * normA * np.linalg.norm(small.B))
    ok = worst <= 1e-9 and zero_exact and limit_ok and t.elapsed < 1.0
    verdict(2, "ZOH discretization matches matrix exponential", ok,
            f"max |diff| {worst:.2e} <= 1e-9, A=0 exact {zero_exact}, small-step limit {limit_ok}, "
            f"{t.elapsed:.2f}s < 1s")


def test_criterion_03_gradient_verification():
    with Timer() as t:
        reports = [gradcheck_seed(seed) for seed in range(5)]
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports) and worst <= 1e-4 and t.elapsed < 120
    verdict(3, "analytic gradients match finite differences", ok,
            f"5 seeds, worst rel err {worst:.2e} <= 1e-4, {t.elapsed:.1f}s < 120s")


def brute_force_cost(cost):
    n_r, n_c = cost.shape
    if n_r >= n_c:
        return min(sum(cost[r, c] for c, r in enumerate(p)) for p in itertools.permutations(range(n_r), n_c))
    return min(sum(cost[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(n_c), n_r))


def test_criterion_04_matching_oracle():
    rng = np.random.default_rng(11)
    mismatches = 0
    with Timer() as t:
        for _ in range(250):
            rows, cols = rng.integers(1, 9, size=2)
            if min(rows, cols) > 6:
                cols = 6
            # integer costs make sums exact, so equality can be exact
            cost = rng.integers(-50, 50, size=(rows, cols)).astype(float)
            mismatches += hungarian_match(cost).total_cost != brute_force_cost(cost)
    verdict(4, "Hungarian matching equals brute force", mismatches == 0 and t.elapsed < 5.0,
            f"250 matrices, {mismatches} mismatches, {t.elapsed:.2f}s < 5s")


def test_criterion_05_metric_oracles():
    f1_ok = (f1_score(0.5, 0.5) == 0.5 and f1_score(1.0, 0.0) == 0.0
             and abs(f1_score(0.2, 0.1) - 2 * 0.2 * 0.1 / 0.3) <= 1e-9)
    gt = [ActionInstance(0, 10, 0)]
    single = match_detections([ActionInstance(0, 10, 0, 0.9), ActionInstance(1, 10, 0, 0.8)], gt)
    gate = match_detections([ActionInstance(0, 10, 1, 0.9)], gt, EvalConfig())
    ok = f1_ok and single == Counts(1, 1, 0) and gate == Counts(0, 1, 1)
    verdict(5, "F1 cases and matching traces", ok,
            f"F1 cases {f1_ok}, single consumption {single}, class gate {gate}")


def test_criterion_06_point_refinement():
    trace = refine_points([[10.0, 20.0]], [[1.0, -1.0]]).data.tolist() == [[15.0, 15.0]]
    rng = np.random.default_rng(5)
    violations = 0
    for _ in range(1000):
        P = rng.normal(size=(3, 6)) * rng.uniform(0.01, 30)
        dt = rng.normal(size=(3, 6)) * rng.uniform(0.1, 5)
        step = np.abs(refine_points(P, dt).data - P).max(axis=1)
        bound = 0.5 * np.maximum(P.max(axis=1) - P.min(axis=1), 1.0) * np.abs(dt).max(axis=1)
        violations += int(np.any(step > bound * (1 + 1e-12)))
    verdict(6, "point refinement trace and contraction bound", trace and violations == 0,
            f"trace {trace}, {violations} violations in 1000 draws")


def spans(ws):
    return [(w.start_frame, w.end_frame) for w in ws]


def test_criterion_07_window_mechanics(tmp_path):
    disjoint = spans(make_windows(512, 128, 0.0)) == [(0, 128), (128, 256), (256, 384), (384, 512)]
    overlapped = spans(make_windows(256, 128, 0.75)) == [(0, 128), (32, 160), (64, 192), (96, 224),
                                                          (128, 256)]
    rng = np.random.default_rng(3)
    w = WindowSpec("v", 256)
    # timestamps on a 1/16-frame lattice, the resolution at which every shift is exact in float64
    glob = 256 + rng.integers(0, 128 * 16, 1000) / 16
    round_trip = (np.array_equal(to_global(to_local(glob, w), w), glob)
                  and np.array_equal(grid_to_frames(frames_to_grid(glob)), glob))
    seq = FeatureSequence("vid", rng.normal(size=(40, 12)).astype(np.float32))
    write_features(seq, tmp_path / "v.mgft")
    raw = (tmp_path / "v.mgft").read_bytes()
    back = ingest_features(tmp_path / "v.mgft", "vid")
    lossless = np.array_equal(back.data, seq.data) and encode_features(back) == raw
    verdict(7, "window enumeration, coordinate round trip, feature file", disjoint and overlapped and
            round_trip and lossless,
            f"overlap 0 {disjoint}, overlap 0.75 {overlapped}, 1000 round trips exact {round_trip}, "
            f"file lossless {lossless}")


def test_criterion_08_synthetic_overfit(tmp_path):
    cfg = str(OVERFIT_CONFIG)
    data, run = str(tmp_path / "data"), str(tmp_path / "run")
    with Timer() as t:
        codes = [
            main(["gen-synth", "--config", cfg, "--out", data]),
            main(["train", "--config", cfg, "--data", data, "--out", run, "--steps", "2000"]),
            main(["infer", "--data", data, "--checkpoint", f"{run}/checkpoint.bin", "--out", run]),
            main(["eval", "--config", cfg, "--pred", f"{run}/predictions.json",
                  "--gt", f"{data}/annotations.json", "--out", run]),
        ]
    setup = json.loads(Path(f"{data}/config.json").read_text())
    with open(f"{run}/train_log.csv") as fh:
        steps = sum(1 for _ in csv.DictReader(fh))
    report = json.loads(Path(f"{run}/report.json").read_text()) if Path(f"{run}/report.json").exists() else {}
    f1 = report.get("f1", 0.0)
    ok = (codes == [0, 0, 0, 0] and steps == 2000 and setup["synth"]["num_videos"] == 4
          and setup["decoder"]["num_classes"] == 17 and setup["synth"]["noise_level"] == 0.1
          and f1 >= 90.0 and t.elapsed < 600)
    verdict(8, "synthetic overfit through the CLI", ok,
            f"exit codes {codes}, {steps} steps, training-set F1@0.5 {f1:.2f} >= 90, {t.elapsed:.0f}s < 600s")


def test_criterion_09_schedule_conformance(tmp_path):
    cfg = {
        "decoder": {"L": 2, "N_q": 4, "N_s": 6, "D": 16, "D_prime": 4, "num_classes": 3, "D_in": 8},
        "mamba": {"M": 1, "heads": 2, "N_state": 4},
        "synth": {"num_videos": 1, "num_frames": 128, "max_len": 16},
        "schedule": {"epochs": 30},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["gen-synth", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    assert main(["train", "--config", str(path), "--data", str(tmp_path / "data"), "--out",
                 str(tmp_path / "run")]) == 0
    with open(tmp_path / "run" / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), set()).add(float(r["lr"]))
    expected = {e: {1e-4 if e < 10 else 5e-5 if e < 20 else 2.5e-5} for e in range(30)}
    verdict(9, "learning-rate halving in the training log", by_epoch == expected,
            f"epochs 0-9 {sorted(set().union(*[by_epoch.get(e, set()) for e in range(10)]))}, "
            f"10-19 {sorted(set().union(*[by_epoch.get(e, set()) for e in range(10, 20)]))}, "
            f"20-29 {sorted(set().union(*[by_epoch.get(e, set()) for e in range(20, 30)]))}")


def test_criterion_10_ablation_overrides(capsys):
    axes = {"--ns": ("points_per_query", [25, 27, 30, 31, 32, 35]),
            "--beta": ("window_beta", [16, 32, 64, 128, 200]),
            "--layers": ("layers", [2, 3, 4, 5]),
            "--mamba-blocks": ("mamba_blocks", [1, 2, 3])}
    failures = []
    for flag, (key, values) in axes.items():
        for v in values:
            code = main(["config", flag, str(v)])
            echo = json.loads(capsys.readouterr().out) if code == 0 else {}
            if code != 0 or echo["model"][key] != v:
                failures.append(f"{flag} {v}")
    total = sum(len(v) for _, v in axes.values())
    verdict(10, "ablation overrides reach the built model", not failures,
            f"{total - len(failures)}/{total} axis values echoed{'; failed ' + ', '.join(failures) if failures else ''}")
