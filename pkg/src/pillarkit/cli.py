"""Command-line entry point wiring all stages together.

Subcommands: featurize, train-toy, check-grad, prop-test (alias: check),
bench. Every run is configured by an optional JSON file plus flag overrides
(flags win) and is deterministic given (config, seed). Exit codes: 0 success,
2 config error, 3 I/O error, 4 check failure, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import checks as checks_mod
from .autograd import run_gradient_check_suite
from .descriptor import (
    AggregationWeights,
    MlpParams,
    descriptor_forward,
    load_descriptor,
    set_fault_mode,
)
from .errors import DivergenceError, FileFormatError, PillarkitError, ValidationError
from .gridding import CellBatch, GridSpec, build_cell_batch, scatter_to_grid
from .pointcloud import load_kitti_bin
from .toy import (
    ToyTaskSpec,
    TrainConfig,
    build_toy_dataset,
    load_checkpoint,
    save_checkpoint,
    train_descriptor,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK_FAILED = 4
EXIT_DIVERGED = 5

FEATURIZE_CHUNK = 2048  # cells per worker task; fixed so results never depend on pool size


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a JSON object")
    return doc


def _num_workers() -> int:
    raw = os.environ.get("PILLARKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValidationError(f"PILLARKIT_THREADS must be an integer, got {raw!r}") from exc


def _grid_spec(config: dict, args) -> GridSpec:
    mode = args.mode or config.get("grid", {}).get("mode", "pillar")
    base = (
        GridSpec.kitti_voxel_defaults() if mode == "voxel" else GridSpec.kitti_pillar_defaults()
    )
    overrides = dict(config.get("grid", {}))
    overrides["mode"] = mode
    doc = json.loads(base.to_json())
    doc.update(overrides)
    return GridSpec.from_json(json.dumps(doc))


def _descriptor_setup(
    config: dict, args, batch: CellBatch, seed: int
) -> tuple[MlpParams, AggregationWeights | None, str]:
    section = config.get("descriptor", {})
    kind = args.descriptor or section.get("kind", "weighted")
    checkpoint = getattr(args, "checkpoint", None) or section.get("checkpoint")
    if checkpoint:
        params, weights = load_descriptor(checkpoint)
    else:
        widths = tuple(section.get("mlp_widths", [64]))
        activation = section.get("activation", "relu")
        params = (
            MlpParams.create(batch.num_channels, widths, activation=activation, seed=seed)
            if widths
            else MlpParams([])
        )
        weights = AggregationWeights.max_pool_init(batch.capacity) if kind == "weighted" else None
    return params, weights, kind


def _chunked_forward(
    params: MlpParams,
    weights: AggregationWeights | None,
    batch: CellBatch,
    kind: str,
    workers: int,
) -> np.ndarray:
    """Forward over fixed-size cell chunks, optionally on a thread pool.

    Chunk boundaries are constant and every chunk writes a pre-assigned output
    slice, so the features are identical for any pool size.
    """
    k = batch.num_cells
    c_out = params.output_channels(batch.num_channels)
    features = np.zeros((k, c_out))
    spans = [(a, min(a + FEATURIZE_CHUNK, k)) for a in range(0, k, FEATURIZE_CHUNK)]

    def run(span: tuple[int, int]) -> None:
        a, b = span
        sub = CellBatch(
            data=batch.data[a:b],
            valid_count=batch.valid_count[a:b],
            cell_coords=batch.cell_coords[a:b],
            spec=batch.spec,
        )
        features[a:b], _ = descriptor_forward(params, weights, sub, kind, need_cache=False)

    if workers <= 1 or len(spans) <= 1:
        for span in spans:
            run(span)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, spans))
    return features


def cmd_featurize(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    spec = _grid_spec(config, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    cloud = load_kitti_bin(args.input)
    batch = build_cell_batch(cloud, spec)
    params, weights, kind = _descriptor_setup(config, args, batch, seed)

    if batch.num_cells:
        features = _chunked_forward(params, weights, batch, kind, _num_workers())
    else:
        features = np.zeros((0, params.output_channels(spec.decorated_channels(cloud.num_channels))))
    fmap = scatter_to_grid(features, batch.cell_coords, spec)
    blob, header = fmap.save(out_dir / "featuremap")

    total_cells = int(np.prod(spec.grid_shape))
    summary = {
        "input": str(args.input),
        "mode": spec.mode,
        "descriptor": kind,
        "seed": seed,
        "num_points": cloud.num_points,
        "num_cells": batch.num_cells,
        "occupancy": batch.num_cells / total_cells,
        "feature_channels": fmap.num_channels,
        "elapsed_s": time.perf_counter() - t0,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(
        f"featurize: {cloud.num_points} points -> {batch.num_cells} cells "
        f"({spec.mode}, {kind}), map {fmap.values.shape} -> {blob}"
    )
    return EXIT_OK


def cmd_train_toy(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, state, train_config, task_spec = load_checkpoint(args.resume)
        # the checkpoint owns the run configuration; the train section may
        # still extend it (typically a larger step budget)
        merged = train_config.to_doc()
        merged.update(config.get("train", {}))
        train_config = TrainConfig.from_doc(merged)
        dataset = build_toy_dataset(task_spec)
        metrics, model, state = train_descriptor(
            dataset, train_config, resume_from=model, resume_state=state
        )
    else:
        task_doc = dict(config.get("toy", {}))
        train_doc = dict(config.get("train", {}))
        if args.seed is not None:  # explicit flag beats per-section seeds
            task_doc["seed"] = args.seed
            train_doc["seed"] = args.seed
        else:
            task_doc.setdefault("seed", seed)
            train_doc.setdefault("seed", seed)
        if args.descriptor:
            train_doc["kind"] = args.descriptor
        task_spec = ToyTaskSpec.from_doc(task_doc)
        train_config = TrainConfig.from_doc(train_doc)
        dataset = build_toy_dataset(task_spec)
        metrics, model, state = train_descriptor(dataset, train_config)

    with open(out_dir / "metrics.jsonl", "w") as handle:
        for record in metrics.records:
            handle.write(record.to_json() + "\n")
    (out_dir / "final.json").write_text(
        json.dumps(
            {
                "kind": metrics.kind,
                metrics.final_metric_name: metrics.final_metric_value,
                "steps": model.step,
                "wall_clock_s": metrics.wall_clock_s,
            },
            indent=2,
        )
    )
    save_checkpoint(out_dir / "checkpoint.json", model, state, train_config, task_spec)
    print(
        f"train-toy: kind={metrics.kind} steps={model.step} "
        f"{metrics.final_metric_name}={metrics.final_metric_value:.4f}"
    )
    return EXIT_OK


def cmd_check_grad(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    section = config.get("check", {})
    num_configs = int(section.get("grad_configs", 100))
    tolerance = float(section.get("grad_tolerance", 1e-5))

    reports = run_gradient_check_suite(num_configs=num_configs, seed=seed, tolerance=tolerance)
    worst = max(max(r.groups.values()) for r in reports)
    passed = all(r.passed for r in reports)
    doc = {
        "configs": num_configs,
        "tolerance": tolerance,
        "worst_rel_error": worst,
        "passed": passed,
    }
    print(f"check-grad: {num_configs} configs, worst rel error {worst:.3e}, "
          f"{'PASS' if passed else 'FAIL'}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.json").write_text(json.dumps(doc, indent=2))
    else:
        print(json.dumps(doc, indent=2))
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_prop_test(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    section = config.get("check", {})
    num_cells = int(section.get("cells", 300))
    shuffles = int(section.get("shuffles", 5))
    grad_configs = int(section.get("grad_configs", 10))

    if args.inject_fault:
        set_fault_mode(args.inject_fault)
    try:
        results = checks_mod.run_property_suites(
            num_cells=num_cells, shuffles=shuffles, seed=seed
        )
        grad_reports = run_gradient_check_suite(num_configs=grad_configs, seed=seed)
    finally:
        set_fault_mode(None)

    grad_failures = sum(0 if r.passed else 1 for r in grad_reports)
    results.append(
        checks_mod.SuiteResult("gradient-check", cases=len(grad_reports), failures=grad_failures)
    )
    doc = json.loads(checks_mod.suites_to_json(results))
    for result in results:
        print(
            f"prop-test: {result.name}: {result.cases - result.failures}/{result.cases} "
            f"{'PASS' if result.passed else 'FAIL'}"
        )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "propcheck.json").write_text(json.dumps(doc, indent=2))
    else:
        print(json.dumps(doc, indent=2))
    return EXIT_OK if doc["passed"] else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    section = dict(config.get("bench", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    bench_config = bench_mod.BenchConfig.from_doc(section)
    report = bench_mod.bench_descriptor(bench_config)
    ratio = report.get("full_overhead_ratio")
    print(
        "bench: full-descriptor overhead ratio "
        + (f"{ratio:.3f}" if ratio is not None else "n/a")
        + f", aggregation ratios "
        + ", ".join(f"N={e['n_points']}:{e['ratio']:.2f}" for e in report["aggregation_scaling"])
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.json").write_text(bench_mod.report_to_json(report))
    else:
        print(bench_mod.report_to_json(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pillarkit",
        description="Point-cloud grid featurization with sorted weighted set descriptors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="global RNG seed")

    p_feat = sub.add_parser("featurize", help="grid-featurize a KITTI-style .bin point cloud")
    common(p_feat)
    p_feat.add_argument("--input", required=True, help="input .bin file")
    p_feat.add_argument("--mode", choices=["pillar", "voxel"], default=None)
    p_feat.add_argument("--descriptor", choices=["weighted", "max", "mean"], default=None)
    p_feat.add_argument("--checkpoint", help="descriptor checkpoint JSON to load")
    p_feat.add_argument("--out", required=True, help="output directory")
    p_feat.set_defaults(func=cmd_featurize)

    p_train = sub.add_parser("train-toy", help="train the descriptor on a toy task")
    common(p_train)
    p_train.add_argument("--descriptor", choices=["weighted", "max", "mean"], default=None)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train_toy)

    p_grad = sub.add_parser("check-grad", help="finite-difference gradient checks")
    common(p_grad)
    p_grad.add_argument("--out", default=None, help="optional report directory")
    p_grad.set_defaults(func=cmd_check_grad)

    p_prop = sub.add_parser(
        "prop-test", aliases=["check"], help="run the property and gradient suites"
    )
    common(p_prop)
    p_prop.add_argument("--out", default=None, help="optional report directory")
    p_prop.add_argument(
        "--inject-fault",
        choices=["skip-sort"],
        default=None,
        help="test hook: sabotage the sort stage to confirm the suites catch it",
    )
    p_prop.set_defaults(func=cmd_prop_test)

    p_bench = sub.add_parser("bench", help="descriptor throughput benchmarks")
    common(p_bench)
    p_bench.add_argument("--out", default=None, help="optional report directory")
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError,) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, FileNotFoundError, OSError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except PillarkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
