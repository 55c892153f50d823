"""Server-side aggregation: parameter flattening and the three averaging rules.

Client parameters are collected into an (n_clients, param_dim) matrix, one
row per client, in a canonical serialization order:

    encoder layer 0, encoder layer 1, ..., decoder layers, output projection;
    inside a GRU layer: W_z, W_r, W_c, U_z, U_r, U_c, b_z, b_r, b_c;
    each tensor row-major.

Aggregation always runs in float64; rows are widened on collection and
narrowed back to the model dtype on distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError, ShapeError, ValidationError
from .graph import ROW_NORMALIZED, SYM_NORMALIZED, PropagationMatrix
from .model import GruArch, GruSeq2Seq, param_shapes

FEDAVG = "fedavg"
GRAPH_FEDAVG = "graphfedavg"
MP_FEDAVG = "mpfedavg"
AGGREGATOR_KINDS = (FEDAVG, GRAPH_FEDAVG, MP_FEDAVG)

_GATES = ("z", "r", "c")


@dataclass(frozen=True)
class LayoutEntry:
    name: str                     # e.g. "enc0.W_r"
    shape: tuple[int, ...]
    offset: int
    source_key: str               # stored tensor holding this block
    gate: int | None              # column block index within the stored tensor

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    """Canonical flattening order for one architecture."""

    arch: GruArch
    entries: tuple[LayoutEntry, ...]
    total_len: int


def layout_for_arch(arch: GruArch) -> ParamLayout:
    h = arch.hidden_dim
    entries: list[LayoutEntry] = []
    offset = 0

    def add(name, shape, source_key, gate):
        nonlocal offset
        entry = LayoutEntry(name=name, shape=shape, offset=offset,
                            source_key=source_key, gate=gate)
        entries.append(entry)
        offset += entry.size

    for layer in arch.layer_names():
        din = arch.layer_input_dim(layer)
        for i, gate in enumerate(_GATES):
            add(f"{layer}.W_{gate}", (din, h), f"{layer}.wx", i)
        for i, gate in enumerate(_GATES):
            add(f"{layer}.U_{gate}", (h, h), f"{layer}.wh", i)
        for i, gate in enumerate(_GATES):
            add(f"{layer}.b_{gate}", (h,), f"{layer}.b", i)
    add("proj.w", (h, arch.input_dim), "proj.w", None)
    add("proj.b", (arch.input_dim,), "proj.b", None)
    return ParamLayout(arch=arch, entries=tuple(entries), total_len=offset)


def _gate_block(array: np.ndarray, gate: int | None, h: int) -> np.ndarray:
    if gate is None:
        return array
    if array.ndim == 1:
        return array[gate * h : (gate + 1) * h]
    return array[:, gate * h : (gate + 1) * h]


def flatten(model: GruSeq2Seq, layout: ParamLayout) -> np.ndarray:
    """Serialize model parameters into a float64 row of length total_len."""
    if model.arch != layout.arch:
        raise LayoutError(f"layout built for {layout.arch} applied to {model.arch}")
    h = layout.arch.hidden_dim
    row = np.empty(layout.total_len, dtype=np.float64)
    for entry in layout.entries:
        block = _gate_block(model.params[entry.source_key], entry.gate, h)
        if block.shape != entry.shape:
            raise LayoutError(
                f"tensor {entry.name!r} has shape {block.shape}, layout expects {entry.shape}"
            )
        row[entry.offset : entry.offset + entry.size] = np.ascontiguousarray(
            block, dtype=np.float64
        ).ravel()
    return row


def unflatten(row: np.ndarray, layout: ParamLayout, dtype=np.float64) -> dict[str, np.ndarray]:
    """Inverse of flatten; rebuilds the stored parameter tensors."""
    row = np.asarray(row)
    if row.shape != (layout.total_len,):
        raise LayoutError(f"row has shape {row.shape}, layout expects ({layout.total_len},)")
    h = layout.arch.hidden_dim
    params: dict[str, np.ndarray] = {}
    for key, shape in param_shapes(layout.arch).items():
        params[key] = np.empty(shape, dtype=dtype)
    for entry in layout.entries:
        block = row[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        dest = _gate_block(params[entry.source_key], entry.gate, h)
        dest[...] = block
    return params


@dataclass
class ParamMatrix:
    """One row of flattened parameters per client."""

    values: np.ndarray  # (n_clients, param_dim) float64
    layout: ParamLayout

    @property
    def n_clients(self) -> int:
        return self.values.shape[0]

    @property
    def param_dim(self) -> int:
        return self.values.shape[1]


def collect(models: list[GruSeq2Seq], layout: ParamLayout) -> ParamMatrix:
    """Stack every client's flattened parameters into a matrix."""
    if not models:
        raise ValidationError("cannot collect parameters from zero clients")
    values = np.stack([flatten(m, layout) for m in models])
    return ParamMatrix(values=values, layout=layout)


def distribute(x: ParamMatrix, models: list[GruSeq2Seq]) -> list[GruSeq2Seq]:
    """Give client i row i of the matrix; returns fresh models."""
    if x.n_clients != len(models):
        raise ShapeError(f"{x.n_clients} rows for {len(models)} clients")
    out = []
    for i, m in enumerate(models):
        params = unflatten(x.values[i], x.layout, dtype=m.dtype)
        out.append(GruSeq2Seq(arch=m.arch, params=params))
    return out


def _check_finite(x: ParamMatrix, where: str) -> None:
    if not np.isfinite(x.values).all():
        raise ValidationError(f"non-finite parameter entries {where}")


def _propagate(matrix: np.ndarray, values: np.ndarray, steps: int) -> np.ndarray:
    out = values
    for _ in range(steps):
        out = matrix @ out
    return out


def fedavg(x: ParamMatrix) -> ParamMatrix:
    """Uniform average; every client receives the same mean row.

    Implemented as one application of the uniform row-stochastic matrix so
    that it coincides exactly with graph-aware averaging on the complete
    graph.
    """
    if x.n_clients == 0:
        raise ValidationError("cannot average an empty parameter matrix")
    _check_finite(x, "entering fedavg")
    n = x.n_clients
    uniform = np.full((n, n), 1.0 / n, dtype=np.float64)
    out = ParamMatrix(values=_propagate(uniform, x.values, 1), layout=x.layout)
    _check_finite(out, "leaving fedavg")
    return out


def graph_fedavg(x: ParamMatrix, operator: PropagationMatrix, hops: int) -> ParamMatrix:
    """Degree-normalized neighbourhood averaging, iterated ``hops`` times.

    hops == 0 is the identity. Each application replaces a client's row by
    the row-stochastic average over its closed neighbourhood.
    """
    if operator.kind != ROW_NORMALIZED:
        raise ConfigError("graph_fedavg needs a row-normalized operator")
    if operator.n_nodes != x.n_clients:
        raise ShapeError(f"operator covers {operator.n_nodes} nodes, matrix has {x.n_clients} rows")
    if hops < 0:
        raise ConfigError(f"hops must be >= 0, got {hops}")
    _check_finite(x, "entering graph_fedavg")
    if hops == 0:
        return ParamMatrix(values=x.values.copy(), layout=x.layout)
    out = ParamMatrix(values=_propagate(operator.matrix, x.values, hops), layout=x.layout)
    _check_finite(out, "leaving graph_fedavg")
    return out


def mp_fedavg(x: ParamMatrix, operator: PropagationMatrix, alpha: float, steps: int) -> ParamMatrix:
    """Label-propagation style blend with the symmetric normalized operator.

    Each step mixes alpha parts neighbourhood average with (1 - alpha)
    parts of the client's current row. alpha == 0 or steps == 0 return the
    input unchanged (bitwise).
    """
    if operator.kind != SYM_NORMALIZED:
        raise ConfigError("mp_fedavg needs a symmetrically normalized operator")
    if operator.n_nodes != x.n_clients:
        raise ShapeError(f"operator covers {operator.n_nodes} nodes, matrix has {x.n_clients} rows")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    _check_finite(x, "entering mp_fedavg")
    if alpha == 0.0 or steps == 0:
        return ParamMatrix(values=x.values.copy(), layout=x.layout)
    values = x.values
    for _ in range(steps):
        values = alpha * (operator.matrix @ values) + (1.0 - alpha) * values
    out = ParamMatrix(values=values, layout=x.layout)
    _check_finite(out, "leaving mp_fedavg")
    return out


@dataclass(frozen=True)
class AggregatorConfig:
    """Which rule the server applies, and its knobs."""

    kind: str = FEDAVG
    hops: int = 1      # graph-aware kinds only
    alpha: float = 0.8  # mp_fedavg only

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator {self.kind!r}; expected one of {AGGREGATOR_KINDS}")
        if self.hops < 0:
            raise ConfigError(f"hops must be >= 0, got {self.hops}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


def apply_aggregator(
    config: AggregatorConfig,
    x: ParamMatrix,
    row_op: PropagationMatrix | None,
    sym_op: PropagationMatrix | None,
) -> ParamMatrix:
    if config.kind == FEDAVG:
        return fedavg(x)
    if config.kind == GRAPH_FEDAVG:
        if row_op is None:
            raise ConfigError("graphfedavg requires a graph")
        return graph_fedavg(x, row_op, config.hops)
    if sym_op is None:
        raise ConfigError("mpfedavg requires a graph")
    return mp_fedavg(x, sym_op, config.alpha, config.hops)


def dump_param_matrix(x: ParamMatrix, path) -> None:
    """Debug CSV dump: client_id,offset,value (full precision)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("client_id,offset,value\n")
        for i in range(x.n_clients):
            row = x.values[i]
            for j in range(x.param_dim):
                fh.write(f"{i},{j},{row[j].item()!r}\n")
