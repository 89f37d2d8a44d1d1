"""Batch property suites: invariance, sort contract, and reduction identities.

These are the machine-checkable guarantees of the descriptor stage. Each suite
generates its own random cells, runs the relevant comparison at zero
tolerance, and reports case/failure counts. The CLI ``prop-test`` command and
the acceptance tests both drive these functions; only the case counts differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .descriptor import (
    AggregationWeights,
    MlpParams,
    aggregate_mean,
    aggregate_weighted,
    descriptor_forward,
    mlp_forward,
    sort_project,
)
from .gridding import cell_batch_from_arrays


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_doc(self) -> dict:
        return {
            "suite": self.name,
            "cases": self.cases,
            "failures": self.failures,
            "passed": self.passed,
        }


def _random_blocks(
    num_cells: int,
    seed: int,
    n_choices: tuple[int, ...],
    c_range: tuple[int, int],
    block_size: int = 50,
):
    """Yield (rng, data, counts, params, weights) blocks of random cells.

    Cells within a block share (N, C) so the whole block can run batched.
    Alternating blocks use the identity embedding and a random one-layer ReLU
    MLP, so the suites cover the descriptor with and without ``h``.
    """
    made = 0
    block = 0
    while made < num_cells:
        k = min(block_size, num_cells - made)
        rng = np.random.default_rng([seed, block])
        n = int(rng.choice(n_choices))
        c_embed = int(rng.integers(c_range[0], c_range[1] + 1))
        if block % 2 == 0:
            c_in = c_embed
            params = MlpParams([])
        else:
            c_in = int(rng.integers(2, 10))
            params = MlpParams.create(c_in, (c_embed,), activation="relu", seed=block)
        data = rng.standard_normal((k, n, c_in))
        counts = rng.integers(1, n + 1, size=k)
        weights = AggregationWeights(rng.standard_normal(n))
        yield rng, data, counts, params, weights
        made += k
        block += 1


def _shuffle_valid_slots(
    data: np.ndarray, counts: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    out = data.copy()
    for k in range(data.shape[0]):
        n_valid = int(counts[k])
        out[k, :n_valid] = data[k, rng.permutation(n_valid)]
    return out


def run_invariance_suite(
    num_cells: int = 1000,
    shuffles: int = 20,
    kinds: tuple[str, ...] = ("weighted", "max", "mean"),
    seed: int = 0,
    n_choices: tuple[int, ...] = (5, 32),
    c_range: tuple[int, int] = (1, 64),
) -> SuiteResult:
    """Descriptor outputs must be bitwise unchanged under valid-slot shuffles."""
    cases = failures = 0
    for rng, data, counts, params, weights in _random_blocks(num_cells, seed, n_choices, c_range):
        batch = cell_batch_from_arrays(data, counts)
        reference = {
            kind: descriptor_forward(
                params, weights if kind == "weighted" else None, batch, kind, need_cache=False
            )[0]
            for kind in kinds
        }
        for _ in range(shuffles):
            shuffled = cell_batch_from_arrays(_shuffle_valid_slots(data, counts, rng), counts)
            for kind in kinds:
                w = weights if kind == "weighted" else None
                features, _ = descriptor_forward(params, w, shuffled, kind, need_cache=False)
                same = np.all(
                    features.view(np.uint64) == reference[kind].view(np.uint64), axis=1
                )
                cases += features.shape[0]
                failures += int(features.shape[0] - same.sum())
    return SuiteResult("permutation-invariance", cases, failures)


def run_sorted_contract_suite(
    num_cells: int = 1000,
    seed: int = 1,
    n_choices: tuple[int, ...] = (5, 32),
    c_range: tuple[int, int] = (1, 16),
) -> SuiteResult:
    """Columns non-decreasing over the valid region; valid multisets preserved."""
    cases = failures = 0
    for _, data, counts, params, _ in _random_blocks(num_cells, seed, n_choices, c_range):
        for k in range(data.shape[0]):
            n_valid = int(counts[k])
            cell = data[k].copy()
            cell[n_valid:] = 0.0
            embedded = mlp_forward(params, cell, n_valid)
            sfm = sort_project(embedded, n_valid)
            n = cell.shape[0]
            valid_rows = sfm.values[n - n_valid :]
            ok = bool((np.diff(valid_rows, axis=0) >= 0.0).all())
            ok = ok and np.array_equal(
                np.sort(embedded[:n_valid], axis=0), valid_rows
            )
            ok = ok and all(
                np.array_equal(np.sort(sfm.perm[:, ch]), np.arange(n))
                for ch in range(sfm.perm.shape[1])
            )
            ok = ok and not sfm.values[: n - n_valid].any()
            cases += 1
            failures += int(not ok)
    return SuiteResult("sorted-matrix-contract", cases, failures)


def run_max_special_case_suite(
    num_cells: int = 1000,
    seed: int = 2,
    n_choices: tuple[int, ...] = (5, 32),
    c_range: tuple[int, int] = (1, 32),
) -> SuiteResult:
    """Unit weight on the last sorted row must equal max pooling bitwise.

    Blocks here always embed through a ReLU MLP (the default configuration),
    so the identity holds on partially filled cells too.
    """
    cases = failures = 0
    for rng, data, counts, params, _ in _random_blocks(num_cells, seed, n_choices, c_range):
        del rng
        if not params.layers:
            params = MlpParams.create(data.shape[2], (8,), activation="relu", seed=seed)
        n = data.shape[1]
        unit = AggregationWeights.max_pool_init(n)
        batch = cell_batch_from_arrays(data, counts)
        weighted, _ = descriptor_forward(params, unit, batch, "weighted", need_cache=False)
        pooled, _ = descriptor_forward(params, None, batch, "max", need_cache=False)
        same = np.all(weighted.view(np.uint64) == pooled.view(np.uint64), axis=1)
        cases += weighted.shape[0]
        failures += int(weighted.shape[0] - same.sum())
    return SuiteResult("max-pool-special-case", cases, failures)


def run_mean_consistency_suite(
    num_cells: int = 1000,
    seed: int = 3,
    n_choices: tuple[int, ...] = (5, 32),
    c_range: tuple[int, int] = (1, 32),
) -> SuiteResult:
    """Uniform 1/n weights on the occupied rows must equal the mean exactly."""
    cases = failures = 0
    for _, data, counts, params, _ in _random_blocks(num_cells, seed, n_choices, c_range):
        for k in range(data.shape[0]):
            n_valid = int(counts[k])
            cell = data[k].copy()
            cell[n_valid:] = 0.0
            embedded = mlp_forward(params, cell, n_valid)
            n = cell.shape[0]
            w = np.zeros(n)
            w[n - n_valid :] = 1.0 / n_valid
            via_weighted = aggregate_weighted(AggregationWeights(w), sort_project(embedded, n_valid))
            via_mean = aggregate_mean(embedded, n_valid)
            cases += 1
            failures += int(not np.array_equal(via_weighted, via_mean))
    return SuiteResult("mean-consistency", cases, failures)


def run_property_suites(
    num_cells: int = 300,
    shuffles: int = 5,
    seed: int = 0,
) -> list[SuiteResult]:
    return [
        run_invariance_suite(num_cells=num_cells, shuffles=shuffles, seed=seed),
        run_sorted_contract_suite(num_cells=num_cells, seed=seed + 1),
        run_max_special_case_suite(num_cells=num_cells, seed=seed + 2),
        run_mean_consistency_suite(num_cells=num_cells, seed=seed + 3),
    ]


def suites_to_json(results: list[SuiteResult]) -> str:
    return json.dumps(
        {
            "passed": all(r.passed for r in results),
            "suites": [r.to_doc() for r in results],
        },
        indent=2,
    )
