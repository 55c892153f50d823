"""Traffic series: synthetic generation, portable CSV ingestion, windowing.

Series CSV format (shared with the external converter)::

    # nodes=N interval_min=5
    t,node_0,...,node_{N-1}
    0,61.2,,58.9
    ...

Empty fields are missing readings. Values stay in original units (mph);
z-score normalization uses statistics from the training range only and is
shared across nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .graph import ROW_NORMALIZED, SensorGraph, build_operator

DEFAULT_FRACS = (0.7, 0.1, 0.2)


@dataclass
class TrafficDataset:
    """Per-node series with an observation mask; immutable after creation
    except for the one-time attachment of normalization statistics."""

    values: np.ndarray  # (n_nodes, n_steps) float64, original units
    mask: np.ndarray    # (n_nodes, n_steps) bool, True = observed
    interval_min: int = 5
    norm_stats: tuple[float, float] | None = None  # (mean, std) of the train range

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def normalize(self, arr: np.ndarray) -> np.ndarray:
        mean, std = self._stats()
        return (arr - mean) / std

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        """Inverse of normalize: y = y_norm * std + mean."""
        mean, std = self._stats()
        return arr * std + mean

    def _stats(self) -> tuple[float, float]:
        if self.norm_stats is None:
            raise ConfigError("normalization stats not set; run chronological_split first")
        return self.norm_stats


@dataclass
class WindowedSplit:
    """Model-ready sliding windows, stacked across nodes."""

    split_name: str
    node_ids: np.ndarray     # (S,)
    inputs: np.ndarray       # (S, m, D) normalized, fully imputed
    targets: np.ndarray      # (S, T, D) normalized where observed, 0 elsewhere
    target_mask: np.ndarray  # (S, T, D) bool, raw missingness

    @property
    def n_sequences(self) -> int:
        return self.inputs.shape[0]

    def for_node(self, node_id: int) -> "WindowedSplit":
        sel = self.node_ids == node_id
        return WindowedSplit(
            split_name=self.split_name,
            node_ids=self.node_ids[sel],
            inputs=self.inputs[sel],
            targets=self.targets[sel],
            target_mask=self.target_mask[sel],
        )


def generate_synthetic(
    n_nodes: int,
    n_steps: int,
    graph: SensorGraph,
    seed: int,
    missing_rate: float = 0.0,
    interval_min: int = 5,
    *,
    level_base: float = 55.0,
    level_spread: float = 12.0,
    sine_amplitude: float = 10.0,
    harmonics: tuple[tuple[int, float, float], ...] = ((1, 1.0, 0.0), (2, 0.7, 2.1), (3, 0.45, 0.8)),
    spatial_scale: float = 6.0,
    spatial_persistence: float = 0.0,
    noise_scale: float = 2.0,
    field_smoothing: int = 10,
) -> TrafficDataset:
    """Synthetic speeds with graph-local structure.

    Each node's series is a daily profile (a fixed mix of harmonics of the
    one-day period, so the curve has rush-hour style peaks rather than one
    smooth swell) on a node-specific mean level, plus a spatially
    correlated component built by pushing white noise through the
    row-normalized graph operator three times, plus independent noise.
    Mean levels and phases are themselves smoothed over the graph
    (field_smoothing operator applications), so neighbouring sensors
    behave alike while the network as a whole stays heterogeneous. Missing
    entries are sampled independently at missing_rate. Fully determined by
    the arguments and the seed; harmonics=((1, 1.0, 0.0),) recovers a pure
    daily sinusoid.
    """
    if graph.n_nodes != n_nodes:
        raise ConfigError(f"graph has {graph.n_nodes} nodes, dataset wants {n_nodes}")
    if not (0.0 <= missing_rate < 1.0):
        raise ConfigError(f"missing_rate must lie in [0, 1), got {missing_rate}")
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")

    rng = np.random.default_rng(seed)
    op = build_operator(graph, ROW_NORMALIZED).matrix
    diffuse3 = op @ op @ op
    field_op = np.linalg.matrix_power(op, field_smoothing)

    def smooth_field(raw: np.ndarray, spread: float) -> np.ndarray:
        f = field_op @ raw
        s = f.std()
        if s < 1e-12:
            return np.zeros_like(f)
        return (f - f.mean()) / s * spread

    # draw order is part of the determinism contract: phase, level, spatial, noise, mask
    raw_phase = rng.uniform(0.0, 2.0 * np.pi, size=n_nodes)
    phase = np.arctan2(field_op @ np.sin(raw_phase), field_op @ np.cos(raw_phase))
    level = level_base + smooth_field(rng.standard_normal(n_nodes), spread=level_spread)

    steps_per_day = 24 * 60 // interval_min
    t = np.arange(n_steps)
    theta = 2.0 * np.pi * t[None, :] / steps_per_day + phase[:, None]
    profile = np.zeros((n_nodes, n_steps))
    for mult, rel_amp, shift in harmonics:
        profile += rel_amp * np.sin(mult * theta + shift)
    daily = level[:, None] + sine_amplitude * profile

    innovations = diffuse3 @ rng.standard_normal((n_nodes, n_steps))
    row_scale = np.sqrt((diffuse3 * diffuse3).sum(axis=1, keepdims=True))
    innovations = innovations / row_scale * spatial_scale
    if spatial_persistence > 0.0:
        # congestion-like dynamics: the shared component decays slowly
        # instead of resampling every step, keeping its stationary scale
        phi = spatial_persistence
        innovations *= np.sqrt(1.0 - phi * phi)
        spatial = np.empty_like(innovations)
        state = innovations[:, 0] / np.sqrt(1.0 - phi * phi)
        spatial[:, 0] = state
        for ti in range(1, n_steps):
            state = phi * state + innovations[:, ti]
            spatial[:, ti] = state
    else:
        spatial = innovations

    noise = noise_scale * rng.standard_normal((n_nodes, n_steps))
    values = daily + spatial + noise
    mask = rng.random((n_nodes, n_steps)) >= missing_rate
    return TrafficDataset(values=values, mask=mask, interval_min=interval_min)


def load_dataset(path, interval_min: int | None = None) -> TrafficDataset:
    """Parse the portable series CSV; empty fields become mask=False."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read series file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise ParseError(f"{path}:1: expected metadata line '# nodes=N interval_min=I'")
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("#").split() if "=" in item)
    if "nodes" not in meta:
        raise ParseError(f"{path}:1: metadata line missing 'nodes=N'")
    try:
        n_nodes = int(meta["nodes"])
        file_interval = int(meta.get("interval_min", "5"))
    except ValueError as exc:
        raise ParseError(f"{path}:1: {exc}")
    if interval_min is not None and interval_min != file_interval:
        raise ValidationError(
            f"{path}: file declares interval_min={file_interval}, caller expected {interval_min}"
        )

    expected_header = "t," + ",".join(f"node_{i}" for i in range(n_nodes))
    if len(lines) < 2 or lines[1] != expected_header:
        raise ParseError(f"{path}:2: header does not match 't,node_0,...,node_{n_nodes - 1}'")

    rows = []
    mask_rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != n_nodes + 1:
            raise ParseError(f"{path}:{lineno}: expected {n_nodes + 1} fields, got {len(parts)}")
        vals = np.zeros(n_nodes, dtype=np.float64)
        obs = np.zeros(n_nodes, dtype=bool)
        for j, field in enumerate(parts[1:]):
            if field == "":
                continue
            try:
                vals[j] = float(field)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: column node_{j}: {field!r} is not numeric")
            obs[j] = True
        rows.append(vals)
        mask_rows.append(obs)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.stack(rows, axis=1)
    mask = np.stack(mask_rows, axis=1)
    return TrafficDataset(values=values, mask=mask, interval_min=file_interval)


def save_dataset(ds: TrafficDataset, path) -> None:
    """Write the portable series CSV (deterministic bytes for equal data)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={ds.n_nodes} interval_min={ds.interval_min}\n")
        fh.write("t," + ",".join(f"node_{i}" for i in range(ds.n_nodes)) + "\n")
        for t in range(ds.n_steps):
            fields = [
                repr(ds.values[i, t].item()) if ds.mask[i, t] else ""
                for i in range(ds.n_nodes)
            ]
            fh.write(f"{t}," + ",".join(fields) + "\n")


def chronological_split(
    ds: TrafficDataset,
    fracs: tuple[float, float, float] = DEFAULT_FRACS,
    min_len: int = 24,
) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Contiguous train/val/test step ranges; attaches train-range stats.

    Ranges are disjoint, so windows never straddle a split boundary.
    Normalization statistics come from observed train-range entries only.
    """
    if any(f <= 0 for f in fracs):
        raise ConfigError(f"split fractions must be positive, got {fracs}")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fracs}")
    n = ds.n_steps
    i1 = int(n * fracs[0])
    i2 = int(n * (fracs[0] + fracs[1]))
    ranges = ((0, i1), (i1, i2), (i2, n))
    for name, (a, b) in zip(("train", "val", "test"), ranges):
        if b - a < min_len:
            raise ConfigError(
                f"{name} split has {b - a} steps, need at least {min_len}"
            )
    train_vals = ds.values[:, 0:i1][ds.mask[:, 0:i1]]
    if train_vals.size == 0:
        raise ValidationError("train range has no observed values")
    mean = float(train_vals.mean())
    std = float(train_vals.std())
    if std <= 0.0:
        raise ValidationError("train range is constant; cannot normalize")
    ds.norm_stats = (mean, std)
    return ranges


def window_count(range_len: int, m: int, t: int, stride: int = 1) -> int:
    """Number of stride-spaced windows of length m+t in a range."""
    if range_len < m + t:
        return 0
    return (range_len - (m + t)) // stride + 1


def _impute_inputs(win_vals: np.ndarray, win_mask: np.ndarray, fill: float) -> np.ndarray:
    """Last-observed-value fill along the window axis; head-missing -> fill."""
    s, m = win_vals.shape
    pos = np.arange(m)[None, :]
    last_obs = np.where(win_mask, pos, -1)
    last_obs = np.maximum.accumulate(last_obs, axis=1)
    safe_idx = np.maximum(last_obs, 0)
    filled = np.take_along_axis(win_vals, safe_idx, axis=1)
    return np.where(last_obs >= 0, filled, fill)


def make_windows(
    ds: TrafficDataset,
    step_range: tuple[int, int],
    m: int = 12,
    horizon: int = 12,
    stride: int = 1,
    split_name: str = "train",
    time_of_day: bool = False,
) -> WindowedSplit:
    """Sliding windows per node over one step range.

    Inputs are z-scored and imputed (last observed value, train mean for a
    missing head); targets keep their raw missingness in target_mask and
    are normalized where observed, zero elsewhere. With time_of_day=True a
    second feature column holding the fraction of the day is appended to
    inputs and targets (always observed).
    """
    start, stop = step_range
    if not (0 <= start < stop <= ds.n_steps):
        raise ConfigError(f"step range {step_range} outside [0, {ds.n_steps}]")
    if stop - start < m + horizon:
        raise ConfigError(
            f"range of {stop - start} steps cannot fit windows of {m}+{horizon}"
        )
    mean, std = ds._stats()
    count = window_count(stop - start, m, horizon, stride)
    steps_per_day = 24 * 60 // ds.interval_min

    all_inputs = []
    all_targets = []
    all_tmask = []
    all_nodes = []
    starts = start + stride * np.arange(count)
    for node in range(ds.n_nodes):
        vals = np.lib.stride_tricks.sliding_window_view(ds.values[node, start:stop], m + horizon)
        obs = np.lib.stride_tricks.sliding_window_view(ds.mask[node, start:stop], m + horizon)
        vals = vals[::stride][:count]
        obs = obs[::stride][:count]

        x_raw = _impute_inputs(vals[:, :m], obs[:, :m], fill=mean)
        x = (x_raw - mean) / std
        t_mask = obs[:, m:]
        t = np.where(t_mask, (vals[:, m:] - mean) / std, 0.0)

        x = x[:, :, None]
        t = t[:, :, None]
        t_mask = t_mask[:, :, None]
        if time_of_day:
            abs_steps = starts[:, None] + np.arange(m + horizon)[None, :]
            tod = (abs_steps % steps_per_day) / steps_per_day
            x = np.concatenate([x, tod[:, :m, None]], axis=2)
            t = np.concatenate([t, tod[:, m:, None]], axis=2)
            t_mask = np.concatenate([t_mask, np.ones_like(t_mask)], axis=2)

        all_inputs.append(x)
        all_targets.append(t)
        all_tmask.append(t_mask)
        all_nodes.append(np.full(count, node, dtype=np.int64))

    return WindowedSplit(
        split_name=split_name,
        node_ids=np.concatenate(all_nodes),
        inputs=np.ascontiguousarray(np.concatenate(all_inputs)),
        targets=np.ascontiguousarray(np.concatenate(all_targets)),
        target_mask=np.ascontiguousarray(np.concatenate(all_tmask)),
    )


def denormalize(ds: TrafficDataset, y_norm: np.ndarray) -> np.ndarray:
    """Module-level alias for TrafficDataset.denormalize."""
    return ds.denormalize(y_norm)
