"""Prediction loss, spectral weight matrix and the frequency loss.

The spectral weights |log(max(|F_g - F_p|, eps))|, normalized per plane by
their maximum, emphasize the frequencies a model currently predicts badly.
They are computed outside the tape (gradient locking): no gradient ever
flows through the weighting, only through the distance term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import UsageError
from .spectral import SpectralField, dft2d, power, spectrum_sub
from .tensor import Tensor

LOG_EPS = 1e-8


def pred_loss(pred: Tensor, truth: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked cells."""
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mask = np.asarray(mask)
    active = float(mask.sum())
    if active == 0:
        raise UsageError("pred_loss: empty mask")
    cells = active * pred.size / (mask.size)
    diff = tz.sub(pred, truth)
    weighted = tz.mul(tz.mul(diff, diff), Tensor(mask.astype(pred.data.dtype)))
    return tz.mul(tz.tsum(weighted), 1.0 / cells)


def freq_distance(f_g: SpectralField, f_p: SpectralField) -> Tensor:
    """Squared complex modulus of the spectrum difference, per bin."""
    if f_g.shape != f_p.shape:
        raise UsageError(f"shape mismatch: {f_g.shape} vs {f_p.shape}")
    return power(spectrum_sub(f_g, f_p))


@dataclass
class SpectralWeights:
    """Per-bin weights in [0,1]; excluded from the gradient tape."""

    w: Tensor

    @property
    def detached(self) -> bool:
        return True


def spectral_weights(f_g: SpectralField, f_p: SpectralField,
                     eps: float = LOG_EPS) -> SpectralWeights:
    """|log(max(|F_g - F_p|, eps))| scaled to [0,1] by its per-plane maximum."""
    if eps <= 0:
        raise UsageError("spectral_weights: eps must be positive")
    dre = f_g.re.data.astype(np.float64) - f_p.re.data.astype(np.float64)
    dim = f_g.im.data.astype(np.float64) - f_p.im.data.astype(np.float64)
    modulus = np.sqrt(dre * dre + dim * dim)
    raw = np.abs(np.log(np.maximum(modulus, eps)))
    peak = raw.max(axis=(-2, -1), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(peak > 0, raw / np.where(peak > 0, peak, 1.0), 0.0)
    return SpectralWeights(Tensor(w.astype(f_g.re.data.dtype)))


def freq_loss(f_g: SpectralField, f_p: SpectralField,
              eps: float = LOG_EPS) -> Tensor:
    """Weighted average of the frequency distance over every plane.

    (1/HW) * sum_uv w(u,v) |F_g - F_p|^2, averaged across all leading
    (batch/time/channel) axes; gradient reaches only the distance term.
    """
    weights = spectral_weights(f_g, f_p, eps)
    dist = freq_distance(f_g, f_p)
    planes = dist.size / (dist.shape[-1] * dist.shape[-2])
    total = tz.tsum(tz.mul(dist, weights.w))
    return tz.mul(total, 1.0 / (dist.shape[-1] * dist.shape[-2] * planes))


def total_loss(pred: Tensor, truth: Tensor, freq_out: Tensor | None,
               mask: np.ndarray, lam: float):
    """pred_loss + lambda * freq_loss(dft(truth), dft(freq_out)).

    The frequency term supervises the frequency-branch output; when that
    branch is ablated away the caller passes the fused prediction instead.
    Returns (total, pred_term, freq_term); the frequency term is skipped
    entirely at lambda == 0.
    """
    if lam < 0:
        raise UsageError("lambda must be non-negative")
    p_term = pred_loss(pred, truth, mask)
    if lam == 0.0 or freq_out is None:
        return p_term, p_term, None
    f_term = freq_loss(dft2d(truth), dft2d(freq_out))
    return tz.add(p_term, tz.mul(f_term, lam)), p_term, f_term
