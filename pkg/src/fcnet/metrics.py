"""Evaluation metrics over masked grids and the report they roll up into.

Error metrics average spatially over ocean cells first, then over lead
days. Concentrations live in [0,1]; the CSV report renders MAE/RMSE as
percentages. Ice-edge metrics use the strict > 15% threshold; the binary
accuracy denominator is the active region (union of cells that ever held
ice over the training record), and cells outside it never affect BACC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError, UsageError

ICE_THRESHOLD = 0.15
CELL_AREA_KM2 = 625.0  # 25 km resolution cells


def _check_pair(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[-2:] != mask.shape:
        raise UsageError(f"mask {mask.shape} does not match grid {pred.shape[-2:]}")
    if not mask.any():
        raise UsageError("empty ocean mask")
    return pred, truth, mask


def mae(pred, truth, mask):
    """Per-day masked mean absolute error and its temporal mean."""
    pred, truth, mask = _check_pair(pred, truth, mask)
    diff = np.abs(pred - truth)[..., mask]
    per_day = diff.reshape(diff.shape[0], -1).mean(axis=1)
    return per_day, float(per_day.mean())


def rmse(pred, truth, mask):
    """Per-day sqrt of masked mean squared error and its temporal mean."""
    pred, truth, mask = _check_pair(pred, truth, mask)
    sq = ((pred - truth) ** 2)[..., mask]
    per_day = np.sqrt(sq.reshape(sq.shape[0], -1).mean(axis=1))
    return per_day, float(per_day.mean())


def nse(pred, truth, mask):
    """Nash-Sutcliffe efficiency over pooled masked spacetime cells."""
    pred, truth, mask = _check_pair(pred, truth, mask)
    p = pred[..., mask].reshape(-1)
    g = truth[..., mask].reshape(-1)
    denom = ((g - g.mean()) ** 2).sum()
    if denom == 0.0:
        raise MetricError("NSE undefined: truth variance is zero")
    return float(1.0 - ((p - g) ** 2).sum() / denom)


def ice_edge(field, mask, threshold: float = ICE_THRESHOLD):
    """Binary ice grid: masked cells strictly above the threshold."""
    field = np.asarray(field, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    return (field > threshold) & mask


def iiee(pred_bin, truth_bin, cell_area: float = CELL_AREA_KM2) -> float:
    """Area where the binary extents disagree (over- plus under-estimate)."""
    pred_bin = np.asarray(pred_bin).astype(bool)
    truth_bin = np.asarray(truth_bin).astype(bool)
    return float(cell_area * np.count_nonzero(pred_bin ^ truth_bin))


def bacc(pred_bin, truth_bin, active, cell_area: float = CELL_AREA_KM2) -> float:
    """(1 - IIEE / active area) * 100; disagreement outside the active
    region is ignored, making the score invariant to relabeling there."""
    active = np.asarray(active).astype(bool)
    active_area = cell_area * np.count_nonzero(active)
    if active_area == 0.0:
        raise MetricError("BACC undefined: empty active region")
    pred_bin = np.asarray(pred_bin).astype(bool) & active
    truth_bin = np.asarray(truth_bin).astype(bool) & active
    return float((1.0 - iiee(pred_bin, truth_bin, cell_area) / active_area) * 100.0)


def sie(field, mask, cell_area: float = CELL_AREA_KM2,
        threshold: float = ICE_THRESHOLD) -> float:
    """Total area of cells whose concentration exceeds the threshold."""
    return float(cell_area * np.count_nonzero(ice_edge(field, mask, threshold)))


def active_region(fields, mask, threshold: float = ICE_THRESHOLD):
    """Union of ice-extent cells over a (training) record."""
    fields = np.asarray(fields, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    flat = fields.reshape(-1, *fields.shape[-2:])
    return (flat > threshold).any(axis=0) & mask


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class DayMetrics:
    day: int
    mae: float
    rmse: float
    nse: float
    bacc: float
    sie_pred: float
    sie_true: float


@dataclass
class MetricsReport:
    rows: list[DayMetrics]
    mae: float
    rmse: float
    nse: float
    bacc: float
    sie_pred: float
    sie_true: float


def evaluate(pred, truth, mask, active, cell_area: float = CELL_AREA_KM2
             ) -> MetricsReport:
    """Per-lead-day rows plus aggregates for [T,C,H,W] prediction/truth."""
    pred, truth, mask_b = _check_pair(pred, truth, mask)
    if pred.ndim != 4:
        raise UsageError(f"expected [T,C,H,W] sequences, got {pred.shape}")
    mae_days, mae_all = mae(pred, truth, mask_b)
    rmse_days, rmse_all = rmse(pred, truth, mask_b)
    rows = []
    baccs = []
    sies_p = []
    sies_t = []
    for t in range(pred.shape[0]):
        p_day = pred[t, 0]
        g_day = truth[t, 0]
        b = bacc(ice_edge(p_day, mask_b), ice_edge(g_day, mask_b), active,
                 cell_area)
        sp = sie(p_day, mask_b, cell_area)
        st = sie(g_day, mask_b, cell_area)
        rows.append(DayMetrics(day=t, mae=float(mae_days[t]),
                               rmse=float(rmse_days[t]),
                               nse=nse(p_day[None], g_day[None], mask_b),
                               bacc=b, sie_pred=sp, sie_true=st))
        baccs.append(b)
        sies_p.append(sp)
        sies_t.append(st)
    return MetricsReport(rows=rows, mae=mae_all, rmse=rmse_all,
                         nse=nse(pred, truth, mask_b),
                         bacc=float(np.mean(baccs)),
                         sie_pred=float(np.mean(sies_p)),
                         sie_true=float(np.mean(sies_t)))


def write_report_csv(report: MetricsReport, path) -> None:
    """CSV contract: day,mae,rmse,nse,bacc,sie_pred,sie_true with per-day
    rows and a final ALL aggregate; MAE/RMSE rendered as percent."""
    lines = ["day,mae,rmse,nse,bacc,sie_pred,sie_true"]
    for row in report.rows:
        lines.append(_fmt_row(str(row.day), row))
    lines.append(_fmt_row("ALL", report))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt_row(label, r) -> str:
    return (f"{label},{100.0 * r.mae:.6f},{100.0 * r.rmse:.6f},{r.nse:.6f},"
            f"{r.bacc:.6f},{r.sie_pred:.1f},{r.sie_true:.1f}")
