"""Convert public traffic-archive formats into the simulator's portable CSVs.

Sources:
  * series: an HDF5 file, either a pandas-HDFStore style group (the public
    metr-la.h5 / pems-bay.h5 layout with ``block0_values``) or any plain
    2-D dataset with shape (timesteps, sensors);
  * adjacency: a pickle holding either the common
    (sensor_ids, sensor_id_to_index, adj_matrix) tuple or a bare square
    matrix.

Outputs follow the consumer's file contracts exactly:

  series.csv    # nodes=N interval_min=I / t,node_0,... / empty = missing
  graph.csv     # nodes=N / src,dst,weight   (self-loops are dropped here;
                the simulator adds its own unit self-loops)
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np


class ConversionError(Exception):
    """Source data cannot be converted; message explains why."""


@dataclass(frozen=True)
class ConversionSpec:
    series_path: Path
    adjacency_path: Path
    output_dir: Path
    zero_is_missing: bool = False
    interval_min: int = 5


@dataclass(frozen=True)
class ConversionReport:
    n_sensors: int
    n_steps: int
    n_missing: int
    directed_edges: int
    undirected_pairs: int
    self_loops_dropped: int

    def lines(self) -> list[str]:
        return [
            f"sensors: {self.n_sensors}",
            f"timesteps: {self.n_steps}",
            f"missing readings: {self.n_missing}",
            f"directed edges written (nonzero off-diagonal): {self.directed_edges}",
            f"undirected pairs: {self.undirected_pairs}",
            f"self-loops dropped: {self.self_loops_dropped}",
            "note: published edge counts may follow either convention above "
            "(directed entries vs unique pairs) and may or may not include "
            "self-loops; compare against both before flagging a mismatch",
        ]


def _read_series_hdf5(path: Path) -> np.ndarray:
    try:
        f = h5py.File(path, "r")
    except OSError as exc:
        raise ConversionError(f"cannot open series file {path}: {exc}") from exc
    with f:
        # pandas HDFStore layout: /<key>/block0_values
        for key in f:
            node = f[key]
            if isinstance(node, h5py.Group) and "block0_values" in node:
                return np.asarray(node["block0_values"], dtype=np.float64)
        # otherwise: first 2-d dataset anywhere in the file
        found: list[np.ndarray] = []

        def visit(name, obj):
            if not found and isinstance(obj, h5py.Dataset) and obj.ndim == 2:
                found.append(np.asarray(obj, dtype=np.float64))

        f.visititems(visit)
        if found:
            return found[0]
    raise ConversionError(
        f"{path}: no usable series found (expected a pandas-style group with "
        f"block0_values or a 2-d dataset)"
    )


def _read_adjacency_pickle(path: Path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            payload = pickle.load(fh, encoding="latin1")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise ConversionError(f"cannot read adjacency pickle {path}: {exc}") from exc
    if isinstance(payload, (tuple, list)):
        matrix = payload[-1]
    else:
        matrix = payload
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConversionError(
            f"{path}: adjacency must be a square matrix, got shape {matrix.shape}"
        )
    return matrix


def convert_series(spec: ConversionSpec) -> tuple[Path, int, int, int]:
    """Write series.csv; returns (path, n_sensors, n_steps, n_missing)."""
    values = _read_series_hdf5(spec.series_path)
    n_steps, n_sensors = values.shape
    mask = np.isfinite(values)
    if spec.zero_is_missing:
        mask &= values != 0.0
    n_missing = int((~mask).sum())

    out = spec.output_dir / "series.csv"
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={n_sensors} interval_min={spec.interval_min}\n")
        fh.write("t," + ",".join(f"node_{i}" for i in range(n_sensors)) + "\n")
        for t in range(n_steps):
            fields = [
                repr(values[t, j].item()) if mask[t, j] else ""
                for j in range(n_sensors)
            ]
            fh.write(f"{t}," + ",".join(fields) + "\n")
    return out, n_sensors, n_steps, n_missing


def convert_adjacency(spec: ConversionSpec, expected_sensors: int | None = None) -> tuple[Path, int, int, int]:
    """Write graph.csv; returns (path, directed_edges, undirected_pairs, self_loops)."""
    matrix = _read_adjacency_pickle(spec.adjacency_path)
    n = matrix.shape[0]
    if expected_sensors is not None and n != expected_sensors:
        raise ConversionError(
            f"sensor count mismatch: series has {expected_sensors} sensors, "
            f"adjacency covers {n}"
        )
    self_loops = int(np.count_nonzero(matrix.diagonal()))
    out = spec.output_dir / "graph.csv"
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    directed = 0
    pairs = set()
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={n}\n")
        fh.write("src,dst,weight\n")
        for i in range(n):
            row = matrix[i]
            for j in np.flatnonzero(row):
                if i == j:
                    continue  # simulator re-adds self-loops itself
                fh.write(f"{i},{int(j)},{row[j].item()!r}\n")
                directed += 1
                pairs.add((min(i, int(j)), max(i, int(j))))
    return out, directed, len(pairs), self_loops


def convert(spec: ConversionSpec) -> ConversionReport:
    """Run both conversions and return the accounting report."""
    _, n_sensors, n_steps, n_missing = convert_series(spec)
    _, directed, pairs, loops = convert_adjacency(spec, expected_sensors=n_sensors)
    return ConversionReport(
        n_sensors=n_sensors,
        n_steps=n_steps,
        n_missing=n_missing,
        directed_edges=directed,
        undirected_pairs=pairs,
        self_loops_dropped=loops,
    )
