"""Acceptance gate: each test pins one release criterion at its stated
tolerance and prints a one-line verdict. Run with ``pytest -v -s``."""

import json
import time

import numpy as np
import pytest

from pillarkit import (
    BenchConfig,
    PointCloud,
    ToyTaskSpec,
    TrainConfig,
    bench_descriptor,
    build_toy_dataset,
    load_kitti_bin,
    run_gradient_check_suite,
    train_descriptor,
    write_kitti_bin,
)
from pillarkit.checks import (
    run_invariance_suite,
    run_max_special_case_suite,
    run_sorted_contract_suite,
)
from pillarkit.cli import main


def _verdict(name: str, passed: bool, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: {'PASS' if passed else 'FAIL'} ({detail})")


def test_criterion_1_permutation_invariance():
    t0 = time.perf_counter()
    result = run_invariance_suite(num_cells=1000, shuffles=20, seed=101)
    elapsed = time.perf_counter() - t0
    detail = (
        f"{result.cases} cell-shuffle-kind cases bitwise identical, "
        f"{result.failures} failures, {elapsed:.1f}s"
    )
    _verdict("1 permutation-invariance", result.passed and elapsed <= 10.0, detail)
    assert result.cases >= 1000 * 20 * 3
    assert result.failures == 0
    assert elapsed <= 10.0


def test_criterion_2_max_pool_special_case():
    result = run_max_special_case_suite(num_cells=1000, seed=102)
    detail = f"{result.cases} cells, weighted(unit) == max bitwise, {result.failures} failures"
    _verdict("2 max-pool-special-case", result.passed, detail)
    assert result.cases >= 1000
    assert result.failures == 0


def test_criterion_3_sorted_matrix_contract():
    result = run_sorted_contract_suite(num_cells=1000, seed=103)
    detail = (
        f"{result.cases} cells, columns non-decreasing and multisets preserved exactly, "
        f"{result.failures} failures"
    )
    _verdict("3 sorted-matrix-contract", result.passed, detail)
    assert result.cases >= 1000
    assert result.failures == 0


def test_criterion_4_gradient_correctness():
    t0 = time.perf_counter()
    reports = run_gradient_check_suite(num_configs=100, seed=104, tolerance=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(max(r.groups.values()) for r in reports)
    passed = all(r.passed for r in reports) and elapsed <= 60.0
    detail = f"100 tie-free configs, worst rel error {worst:.2e} <= 1e-5, {elapsed:.1f}s"
    _verdict("4 gradient-correctness", passed, detail)
    assert len(reports) == 100
    assert worst <= 1e-5
    assert elapsed <= 60.0


def test_criterion_5_mechanism_demonstration():
    weighted_acc = []
    max_acc = []
    for seed in range(5):
        dataset = build_toy_dataset(ToyTaskSpec(seed=seed))
        t0 = time.perf_counter()
        metrics_w, _, _ = train_descriptor(
            dataset, TrainConfig(kind="weighted", steps=2000, seed=seed)
        )
        metrics_m, _, _ = train_descriptor(
            dataset, TrainConfig(kind="max", steps=2000, seed=seed)
        )
        elapsed = time.perf_counter() - t0
        weighted_acc.append(metrics_w.final_metric_value)
        max_acc.append(metrics_m.final_metric_value)
        assert elapsed <= 240.0  # two runs within the 2-minute-per-seed budget
    passed = all(acc >= 0.95 for acc in weighted_acc) and all(acc <= 0.60 for acc in max_acc)
    detail = (
        f"5 seeds: weighted accuracies {['%.3f' % a for a in weighted_acc]} (>= 0.95), "
        f"identity max-pool {['%.3f' % a for a in max_acc]} (<= 0.60)"
    )
    _verdict("5 mechanism-demonstration", passed, detail)
    assert all(acc >= 0.95 for acc in weighted_acc)
    assert all(acc <= 0.60 for acc in max_acc)


def test_criterion_6_overhead_proxy():
    report = bench_descriptor(
        BenchConfig(
            kinds=("weighted", "max"),
            n_points=32,
            channels=64,
            num_cells=10000,
            repetitions=10,
            scaling_n=(8, 32, 128, 256),
            seed=106,
        )
    )
    ratio = report["full_overhead_ratio"]
    ratios = [entry["ratio"] for entry in report["aggregation_scaling"]]
    monotone = report["aggregation_ratio_monotone"]
    passed = ratio <= 1.5 and monotone
    detail = (
        f"full-descriptor weighted/max median ratio {ratio:.3f} <= 1.5; "
        f"aggregation ratios over N in (8,32,128,256): "
        + ", ".join(f"{r:.2f}" for r in ratios)
    )
    _verdict("6 overhead-proxy", passed, detail)
    assert ratio <= 1.5
    assert monotone, f"aggregation ratio growth not monotone: {ratios}"


def test_criterion_7_io_fidelity(tmp_path):
    rng = np.random.default_rng(107)
    failures = 0
    for trial in range(100):
        m = int(rng.integers(0, 400))
        pts = rng.uniform(-80, 80, size=(m, 4)).astype(np.float32).astype(np.float64)
        path = tmp_path / f"cloud_{trial}.bin"
        write_kitti_bin(PointCloud(pts), path)
        back = load_kitti_bin(path)
        failures += int(not np.array_equal(back.points, pts))

    config = {
        "grid": {
            "mode": "pillar",
            "range_min": [0.0, 0.0, -1.0],
            "range_max": [8.0, 8.0, 1.0],
            "cell_size": [0.5, 0.5, 2.0],
            "capacity": 8,
            "max_cells": 256,
        },
        "descriptor": {"kind": "weighted", "mlp_widths": [16]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    scan = np.column_stack(
        [
            rng.uniform(0, 8, 500),
            rng.uniform(0, 8, 500),
            rng.uniform(-1, 1, 500),
            rng.uniform(0, 1, 500),
        ]
    ).astype(np.float32).astype(np.float64)
    scan_path = tmp_path / "scan.bin"
    write_kitti_bin(PointCloud(scan), scan_path)
    blobs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        code = main(
            ["featurize", "--input", str(scan_path), "--config", str(cfg_path),
             "--seed", "9", "--out", str(out)]
        )
        assert code == 0
        blobs.append(
            (out / "featuremap.bin").read_bytes() + (out / "featuremap.json").read_bytes()
        )
    deterministic = blobs[0] == blobs[1]
    passed = failures == 0 and deterministic
    detail = (
        f"100 random clouds round-trip exact ({failures} failures); "
        f"featurize re-run bitwise identical: {deterministic}"
    )
    _verdict("7 io-fidelity", passed, detail)
    assert failures == 0
    assert deterministic
