"""Report rendering: PGM heatmaps and matplotlib figures.

The evaluate path emits three artifact kinds next to the CSV: binary P5
heatmaps of prediction/truth/signed difference per lead day (bit-exact
and inspectable without any image stack), a per-day metric-curve figure,
and a mean-absolute-difference map. Figures are rendered deterministically
so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import DimensionError  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

DIFF_SPAN = 0.2  # signed differences rendered over [-20%, +20%]
_SAVEFIG_KWARGS = {"dpi": 110, "metadata": {"Software": None}}


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary P5 image of values already scaled to [0,1]."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise DimensionError(f"PGM wants a 2D grid, got {values.shape}")
    h, w = values.shape
    levels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def _diff_to_unit(diff: np.ndarray) -> np.ndarray:
    return (np.clip(diff, -DIFF_SPAN, DIFF_SPAN) + DIFF_SPAN) / (2 * DIFF_SPAN)


def write_day_maps(pred: np.ndarray, truth: np.ndarray, out_dir) -> list:
    """Per-day pred/truth/diff PGM triplets for [T,C,H,W] sequences."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(pred.shape[0]):
        trio = (
            (f"pred_d{t:03d}.pgm", pred[t, 0]),
            (f"truth_d{t:03d}.pgm", truth[t, 0]),
            (f"diff_d{t:03d}.pgm", _diff_to_unit(pred[t, 0] - truth[t, 0])),
        )
        for name, grid in trio:
            path = out / name
            write_pgm(path, grid)
            paths.append(path)
    return paths


def render_report_figures(report: MetricsReport, pred: np.ndarray,
                          truth: np.ndarray, mask: np.ndarray, out_dir) -> list:
    """Metric curves and the mean |difference| map, as PNG files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    days = [r.day for r in report.rows]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(days, [100 * r.mae for r in report.rows], "o-", label="MAE")
    axes[0].plot(days, [100 * r.rmse for r in report.rows], "s-", label="RMSE")
    axes[0].set_xlabel("lead day")
    axes[0].set_ylabel("error [%]")
    axes[0].legend()
    axes[1].plot(days, [r.bacc for r in report.rows], "o-", color="tab:green")
    axes[1].set_xlabel("lead day")
    axes[1].set_ylabel("BACC [%]")
    axes[2].plot(days, [r.sie_pred for r in report.rows], "o-",
                 label="predicted")
    axes[2].plot(days, [r.sie_true for r in report.rows], "s-",
                 label="observed")
    axes[2].set_xlabel("lead day")
    axes[2].set_ylabel("extent [km$^2$]")
    axes[2].legend()
    fig.tight_layout()
    curves_path = out / "metrics_curves.png"
    fig.savefig(curves_path, **_SAVEFIG_KWARGS)
    plt.close(fig)

    mean_err = np.abs(pred - truth).mean(axis=(0, 1))
    mean_err[mask == 0] = np.nan
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(100 * mean_err, cmap="magma", interpolation="nearest")
    ax.set_title("mean |difference| [%]")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    errmap_path = out / "error_map.png"
    fig.savefig(errmap_path, **_SAVEFIG_KWARGS)
    plt.close(fig)
    return [curves_path, errmap_path]
