"""Per-cell set descriptors: shared MLP embedding plus an aggregation stage.

Three aggregators are provided. ``max`` and ``mean`` are the classic
symmetric poolings; ``weighted`` first projects each embedding channel on its
own axis and sorts it ascending (an order-canonical, permutation-invariant
matrix), then combines the sorted rows with a learnable weight vector. A
weight vector that is zero everywhere except 1.0 at the last row reproduces
max pooling exactly, and uniform weights over the occupied rows reproduce the
mean, so both baselines are special cases of the weighted form.

Layout convention: a cell holds ``capacity`` slots; slots at index >=
``valid_count`` are structural zeros. Sorted matrices place those padding
zeros at the LOW row indices, so the last row always carries the per-channel
maximum of the real points regardless of fill level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ValidationError
from .gridding import CellBatch

ACTIVATIONS = ("relu", "identity")
DESCRIPTOR_KINDS = ("weighted", "max", "mean")

# Test hook for the CLI property-suite sensitivity check: "skip-sort" bypasses
# the sorting stage so the invariance suites must fail. Never set in library code.
_FAULT_MODE: str | None = None


def set_fault_mode(mode: str | None) -> None:
    global _FAULT_MODE
    if mode not in (None, "skip-sort"):
        raise ValidationError(f"unknown fault mode {mode!r}")
    _FAULT_MODE = mode


@dataclass
class MlpLayer:
    weight: np.ndarray  # (C_in, C_out)
    bias: np.ndarray  # (C_out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValidationError(
                f"layer shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValidationError("layer parameters must be finite")


@dataclass
class MlpParams:
    """Shared per-point MLP. An empty layer list is the identity embedding."""

    layers: list[MlpLayer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValidationError("adjacent layer dimensions do not chain")

    @property
    def in_dim(self) -> int | None:
        return self.layers[0].weight.shape[0] if self.layers else None

    @property
    def out_dim(self) -> int | None:
        return self.layers[-1].weight.shape[1] if self.layers else None

    def output_channels(self, c_in: int) -> int:
        return self.out_dim if self.layers else c_in

    @classmethod
    def create(
        cls,
        c_in: int,
        widths: tuple[int, ...] = (64,),
        activation: str = "relu",
        seed: int = 0,
    ) -> "MlpParams":
        """He-initialized MLP with the given hidden/output widths."""
        rng = np.random.default_rng(seed)
        layers = []
        prev = c_in
        for width in widths:
            scale = np.sqrt(2.0 / prev)
            layers.append(
                MlpLayer(
                    weight=scale * rng.standard_normal((prev, width)),
                    bias=np.zeros(width),
                    activation=activation,
                )
            )
            prev = width
        return cls(layers)


@dataclass
class AggregationWeights:
    """Learnable row-combination weights for the sorted matrix.

    ``shared`` mode holds one weight per slot row (length N, the usual form);
    ``per-channel`` holds an (N, C) matrix, one column per feature channel.
    No normalization is imposed.
    """

    values: np.ndarray
    mode: str = "shared"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode not in ("shared", "per-channel"):
            raise ValidationError(f"mode must be 'shared' or 'per-channel', got {self.mode!r}")
        expected_ndim = 1 if self.mode == "shared" else 2
        if self.values.ndim != expected_ndim:
            raise ValidationError(
                f"{self.mode} weights must be {expected_ndim}-D, got shape {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise ValidationError("aggregation weights must be finite")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @classmethod
    def max_pool_init(
        cls,
        n: int,
        channels: int | None = None,
        noise: float = 0.0,
        seed: int = 0,
    ) -> "AggregationWeights":
        """Unit weight on the last row: starts exactly at max pooling.

        ``noise`` adds small uniform perturbations for symmetry breaking.
        """
        if channels is None:
            values = np.zeros(n)
            values[-1] = 1.0
        else:
            values = np.zeros((n, channels))
            values[-1, :] = 1.0
        if noise:
            rng = np.random.default_rng(seed)
            values = values + rng.uniform(-noise, noise, size=values.shape)
        return cls(values, "shared" if channels is None else "per-channel")


@dataclass
class SortedFeatureMatrix:
    """Per-channel ascending sort of one cell's embeddings.

    ``values`` is (N, C); rows ``N - valid_count .. N - 1`` hold the sorted
    real points per channel, rows above are padding zeros. ``perm[r, c]`` is
    the source slot of row r in channel c and is a bijection on slots (ties
    are broken by ascending slot index; padded rows map onto the unused slots
    in order).
    """

    values: np.ndarray
    perm: np.ndarray
    valid_count: int


def _as_slots(cell: np.ndarray) -> np.ndarray:
    cell = np.asarray(cell, dtype=np.float64)
    if cell.ndim != 2:
        raise ValidationError(f"cell must be (N, C), got shape {cell.shape}")
    return cell


def _check_padding(cell: np.ndarray, valid_count: int) -> None:
    if not 1 <= valid_count <= cell.shape[0]:
        raise ValidationError(f"valid_count {valid_count} outside [1, {cell.shape[0]}]")
    if cell[valid_count:].any():
        raise ValidationError("slots at index >= valid_count must be zero")


def mlp_forward(params: MlpParams, cell: np.ndarray, valid_count: int) -> np.ndarray:
    """Embed one cell's valid slots through the shared MLP.

    Invalid slots stay exactly zero in the output (masked, not computed).
    """
    cell = _as_slots(cell)
    _check_padding(cell, valid_count)
    counts = np.asarray([valid_count], dtype=np.int64)
    out, _, _ = _mlp_forward_batch(params, cell[None, :, :], counts, need_cache=False)
    return out[0]


def _mlp_forward_batch(
    params: MlpParams,
    data: np.ndarray,
    valid_count: np.ndarray,
    need_cache: bool,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Batched MLP over (K, N, C_in) slot arrays. Returns (out, inputs, preacts)."""
    k, n, c_in = data.shape
    if params.layers and params.in_dim != c_in:
        raise ValidationError(f"MLP expects {params.in_dim} input channels, cell has {c_in}")
    invalid = np.arange(n)[None, :] >= valid_count[:, None]  # (K, N)

    inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    x = data
    for layer in params.layers:
        z = x.reshape(k * n, -1) @ layer.weight + layer.bias
        z = z.reshape(k, n, -1)
        y = np.maximum(z, 0.0) if layer.activation == "relu" else z.copy()
        y[invalid] = 0.0  # bias would otherwise leak into padding slots
        if need_cache:
            inputs.append(x)
            preacts.append(z)
        x = y
    return x, inputs, preacts


def sort_project(embedded: np.ndarray, valid_count: int) -> SortedFeatureMatrix:
    """Project each channel on its own axis and sort the valid values ascending.

    Padding goes to the low rows so that row N-1 is the per-channel maximum of
    the valid points. Ties keep ascending slot order (stable).
    """
    embedded = _as_slots(embedded)
    _check_padding(embedded, valid_count)
    counts = np.asarray([valid_count], dtype=np.int64)
    values, perm = _sort_project_batch(embedded[None, :, :], counts, need_perm=True)
    return SortedFeatureMatrix(values[0], perm[0], valid_count)


def _sort_project_batch(
    embedded: np.ndarray,
    valid_count: np.ndarray,
    need_perm: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched sort over (K, N, C). Invalid slots sink to the low rows.

    Keying invalid slots at -inf makes the stable argsort emit them first, in
    slot order, which is exactly the padding bijection the gradient routing
    expects; the -inf sentinels are then rewritten to zero.
    """
    k, n, _ = embedded.shape
    invalid = np.arange(n)[None, :] >= valid_count[:, None]
    keyed = embedded + 0.0  # copies, and turns -0.0 into +0.0 so ties are bit-identical
    keyed[invalid] = -np.inf

    if _FAULT_MODE == "skip-sort":
        keyed[invalid] = 0.0
        perm = np.broadcast_to(
            np.arange(n, dtype=np.int64)[None, :, None], embedded.shape
        ).copy()
        return keyed, perm if need_perm else None

    if need_perm:
        perm = np.argsort(keyed, axis=1, kind="stable")
        values = np.take_along_axis(keyed, perm, axis=1)
    else:
        # ties carry identical bits after canonicalization, so plain quicksort
        # yields the same value sequence as the stable sort, cheaper
        perm = None
        values = np.sort(keyed, axis=1)
    values[np.isneginf(values)] = 0.0
    return values, perm


def aggregate_weighted(weights: AggregationWeights, sfm: SortedFeatureMatrix) -> np.ndarray:
    """Combine sorted rows into a length-C cell feature.

    Shared mode computes ``sum_i w[i] * values[i, c]`` per channel; per-channel
    mode uses its own column of weights per channel.
    """
    values = sfm.values
    _check_agg_shapes(weights, values.shape[0], values.shape[1])
    if weights.mode == "shared":
        return np.einsum("n,nc->c", weights.values, values)
    return np.einsum("nc,nc->c", weights.values, values)


def _check_agg_shapes(weights: AggregationWeights, n: int, c: int) -> None:
    if weights.mode == "shared":
        if weights.values.shape != (n,):
            raise ValidationError(
                f"shared weights shape {weights.values.shape} does not match {n} rows"
            )
    elif weights.values.shape != (n, c):
        raise ValidationError(
            f"per-channel weights shape {weights.values.shape} does not match ({n}, {c})"
        )


def aggregate_max(embedded: np.ndarray, valid_count: int) -> np.ndarray:
    """Per-channel maximum over the valid slots."""
    embedded = _as_slots(embedded)
    _check_padding(embedded, valid_count)
    return embedded[:valid_count].max(axis=0)


def aggregate_mean(embedded: np.ndarray, valid_count: int) -> np.ndarray:
    """Per-channel mean over the valid slots.

    Computed as the weighted aggregation with uniform 1/n weights on the
    occupied sorted rows, so it is exactly equal to that special case and its
    rounding does not depend on the input slot order.
    """
    embedded = _as_slots(embedded)
    n = embedded.shape[0]
    sfm = sort_project(embedded, valid_count)
    w = np.zeros(n)
    w[n - valid_count :] = 1.0 / valid_count
    return aggregate_weighted(AggregationWeights(w), sfm)


@dataclass
class ForwardCache:
    """Everything descriptor_backward needs from a forward pass."""

    kind: str
    params: MlpParams
    weights: AggregationWeights | None
    data: np.ndarray
    valid_count: np.ndarray
    layer_inputs: list[np.ndarray]
    layer_preacts: list[np.ndarray]
    embedded: np.ndarray
    sorted_values: np.ndarray | None = None  # (K, N, C)
    perm: np.ndarray | None = None  # (K, N, C) int64
    max_slot: np.ndarray | None = None  # (K, C) int64


def descriptor_forward(
    params: MlpParams,
    weights: AggregationWeights | None,
    batch: CellBatch,
    kind: str = "weighted",
    need_cache: bool = True,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the full descriptor over every cell of a batch.

    Returns (features, cache) where features is (K, C). The cache carries the
    embeddings, sort permutations, and sorted matrices needed for the backward
    pass; pass ``need_cache=False`` on inference-only paths to skip it.
    """
    if kind not in DESCRIPTOR_KINDS:
        raise ValidationError(f"kind must be one of {DESCRIPTOR_KINDS}")
    data = batch.data
    counts = batch.valid_count
    k, n, _ = data.shape
    c_out = params.output_channels(data.shape[2])
    if k == 0:
        return np.zeros((0, c_out)), None
    if (counts < 1).any():
        raise ValidationError("every materialized cell must hold at least one point")

    embedded, layer_inputs, layer_preacts = _mlp_forward_batch(
        params, data, counts, need_cache=need_cache
    )

    sorted_values = perm = max_slot = None
    if kind == "weighted":
        if weights is None:
            raise ValidationError("weighted aggregation requires AggregationWeights")
        _check_agg_shapes(weights, n, c_out)
        sorted_values, perm = _sort_project_batch(embedded, counts, need_perm=need_cache)
        if weights.mode == "shared":
            features = np.einsum("n,knc->kc", weights.values, sorted_values)
        else:
            features = np.einsum("nc,knc->kc", weights.values, sorted_values)
    elif kind == "max":
        keyed = embedded + 0.0  # canonicalize -0.0, matching the sorted path
        keyed[np.arange(n)[None, :] >= counts[:, None]] = -np.inf
        features = keyed.max(axis=1)
        if need_cache:
            # last slot attaining the max, mirroring where the stable sort
            # places tied maxima in the weighted path
            max_slot = n - 1 - np.argmax(keyed[:, ::-1, :], axis=1)
    else:  # mean
        sorted_values, perm = _sort_project_batch(embedded, counts, need_perm=need_cache)
        row = np.arange(n)[None, :]
        w_rows = np.where(row >= (n - counts)[:, None], 1.0 / counts[:, None], 0.0)
        features = np.einsum("kn,knc->kc", w_rows, sorted_values)

    if not need_cache:
        return features, None
    cache = ForwardCache(
        kind=kind,
        params=params,
        weights=weights,
        data=data,
        valid_count=counts,
        layer_inputs=layer_inputs,
        layer_preacts=layer_preacts,
        embedded=embedded,
        sorted_values=sorted_values,
        perm=perm,
        max_slot=max_slot,
    )
    return features, cache


def descriptor_to_doc(params: MlpParams, weights: AggregationWeights | None) -> dict:
    """Checkpoint document: layer shapes, row-major arrays, activation tags."""
    return {
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "weight": layer.weight.ravel(order="C").tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in params.layers
        ],
        "aggregation": None
        if weights is None
        else {
            "mode": weights.mode,
            "shape": list(weights.values.shape),
            "values": weights.values.ravel(order="C").tolist(),
        },
    }


def descriptor_from_doc(doc: dict) -> tuple[MlpParams, AggregationWeights | None]:
    try:
        layers = [
            MlpLayer(
                weight=np.asarray(entry["weight"], dtype=np.float64).reshape(entry["shape"]),
                bias=np.asarray(entry["bias"], dtype=np.float64),
                activation=entry["activation"],
            )
            for entry in doc["layers"]
        ]
        agg = doc.get("aggregation")
        weights = (
            AggregationWeights(
                np.asarray(agg["values"], dtype=np.float64).reshape(agg["shape"]),
                agg["mode"],
            )
            if agg
            else None
        )
        return MlpParams(layers), weights
    except (KeyError, TypeError) as exc:
        raise FileFormatError(f"bad descriptor checkpoint: {exc}") from exc


def save_descriptor(path: str | Path, params: MlpParams, weights: AggregationWeights | None) -> None:
    """Write descriptor parameters as a JSON checkpoint (row-major arrays)."""
    Path(path).write_text(json.dumps(descriptor_to_doc(params, weights), indent=2))


def load_descriptor(path: str | Path) -> tuple[MlpParams, AggregationWeights | None]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"bad descriptor checkpoint: {exc}") from exc
    return descriptor_from_doc(doc)
