"""Masked forecasting metrics, computed in original units."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MAPE_FLOOR = 1e-6  # |target| at or below this is excluded from MAPE only


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mape: float  # percent
    rmse: float
    n_evaluated: int

    @property
    def defined(self) -> bool:
        return self.n_evaluated > 0

    def as_dict(self) -> dict:
        return {"mae": self.mae, "mape": self.mape, "rmse": self.rmse,
                "n_evaluated": self.n_evaluated}


UNDEFINED_REPORT = MetricReport(mae=float("nan"), mape=float("nan"),
                                rmse=float("nan"), n_evaluated=0)


def evaluate(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> MetricReport:
    """MAE / MAPE / RMSE over observed entries, pooled across all axes.

    Entries where mask is false never contribute. MAPE additionally skips
    targets with magnitude <= MAPE_FLOOR. An all-false mask yields the
    undefined report (NaN metrics, n_evaluated == 0) rather than an error.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if preds.shape != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"shape mismatch: preds {preds.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        return UNDEFINED_REPORT
    err = np.where(mask, preds - targets, 0.0)
    abs_err = np.abs(err)
    mae = float(abs_err.sum() / n)
    rmse = float(np.sqrt((err * err).sum() / n))
    mape_mask = mask & (np.abs(targets) > MAPE_FLOOR)
    n_mape = int(mape_mask.sum())
    if n_mape == 0:
        mape = float("nan")
    else:
        ratios = np.where(mape_mask, abs_err / np.where(mape_mask, np.abs(targets), 1.0), 0.0)
        mape = float(ratios.sum() / n_mape * 100.0)
    return MetricReport(mae=mae, mape=mape, rmse=rmse, n_evaluated=n)


def evaluate_per_horizon(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> list[MetricReport]:
    """One report per forecast step; inputs are (S, T, D) stacks."""
    if preds.ndim != 3:
        raise ShapeError(f"expected (S, T, D) arrays, got shape {preds.shape}")
    return [
        evaluate(preds[:, k, :], targets[:, k, :], mask[:, k, :])
        for k in range(preds.shape[1])
    ]
