"""Inference: single-window prediction and recursive long-range forecasts.

Predictions are clamped to [0,1] and land cells re-zeroed, so fed-back
windows always satisfy the model's input contract.
"""

from __future__ import annotations

import numpy as np

from .config import FcnetConfig
from .data import SICSequence
from .errors import ConfigError
from .model import ModelParams, forward_batch
from .tensor import Tensor, no_grad, reset_tape


def _forward_clamped(params: ModelParams, config: FcnetConfig,
                     fields: np.ndarray, mask: np.ndarray) -> np.ndarray:
    with no_grad():
        reset_tape()
        pred = forward_batch(Tensor(fields[None]), params, config)
    out = np.clip(pred.data[0], 0.0, 1.0).astype(np.float32)
    out[:, :, mask == 0] = 0.0
    return out


def predict(params: ModelParams, config: FcnetConfig,
            x: SICSequence) -> SICSequence:
    """One [T,C,H,W] window in, the next [T',C,H,W] window out."""
    expected = (config.T, config.C, config.H, config.W)
    if x.data.shape != expected:
        raise ConfigError(
            f"input window shape {x.data.shape} != model contract {expected}")
    out = _forward_clamped(params, config, x.data, x.mask)
    return SICSequence(data=out, mask=x.mask,
                       start_day=x.start_day + config.T)


def predict_recursive(params: ModelParams, config: FcnetConfig,
                      x: SICSequence, steps: int) -> SICSequence:
    """Feed each predicted window back as input, ``steps`` extra times.

    Emits exactly (steps + 1) * T' days; requires T' == T so outputs are
    valid inputs.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if config.T_prime != config.T:
        raise ConfigError(
            f"recursive prediction needs T' == T, got {config.T_prime} != {config.T}")
    window = predict(params, config, x)
    chunks = [window.data]
    for _ in range(steps):
        window = predict(params, config, window)
        chunks.append(window.data)
    return SICSequence(data=np.concatenate(chunks, axis=0), mask=x.mask,
                       start_day=x.start_day + config.T)
