"""Optimization loop: AdamW updates, one-cycle LR schedule, validation.

Training is deterministic per seed (fixed batch order), logs per-step
losses as CSV, clips the global gradient norm at 1.0 to survive the
log-singular region of the frequency loss early on, and retains the
best-validation-MAE parameters. Divergence (non-finite or exploding loss)
aborts the loop while keeping the last good checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .config import FcnetConfig, TrainConfig
from .errors import NumericError, UsageError
from .losses import total_loss
from .model import ModelParams, forward_batch, init_params
from .tensor import Tensor, no_grad, reset_tape

DIVERGENCE_LIMIT = 1e3
GRAD_CLIP_NORM = 1.0


@dataclass
class OptimState:
    """Per-parameter AdamW moment buffers plus hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   **kwargs)


def _decay_exempt(name: str, p) -> bool:
    # biases, norm affines, embeddings and spectral filters are not decayed
    return p.data.ndim == 1 or ".pos" in name or "filter" in name


def adamw_step(params: ModelParams, state: OptimState, lr: float) -> None:
    """Decoupled weight decay, then bias-corrected moment update."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
        if state.weight_decay and not _decay_exempt(name, p):
            p.data *= 1.0 - lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class LrSchedule:
    total_steps: int
    max_lr: float = 1e-3
    warmup_fraction: float = 0.3
    min_lr: float | None = None
    start_factor: float = 0.04

    def __post_init__(self):
        if self.min_lr is None:
            self.min_lr = self.max_lr / 2500.0


def one_cycle_lr(step: int, schedule: LrSchedule) -> float:
    """Cosine ramp start_factor*max -> max over the warmup, then cosine
    anneal max -> min at the final step."""
    total = schedule.total_steps
    if step < 0 or step > total:
        raise UsageError(f"step {step} outside schedule of {total} steps")
    warmup = max(1, int(round(total * schedule.warmup_fraction)))
    if step <= warmup:
        frac = 0.5 * (1.0 - math.cos(math.pi * step / warmup))
        lo = schedule.start_factor * schedule.max_lr
        return lo + (schedule.max_lr - lo) * frac
    frac = 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))
    return schedule.min_lr + (schedule.max_lr - schedule.min_lr) * frac


@dataclass
class TrainResult:
    params: ModelParams          # best-validation parameters
    final_params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_val_mae: float = math.inf
    diverged: bool = False

    def log_csv(self) -> str:
        lines = ["step,lr,total_loss,pred_loss,freq_loss,val_mae"]
        for row in self.log:
            lines.append(
                f"{row['step']},{row['lr']:.8f},{row['total']:.8f},"
                f"{row['pred']:.8f},{row['freq']:.8f},{row['val_mae']:.8f}")
        return "\n".join(lines) + "\n"


def _masked_mae(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    sel = mask.astype(bool)
    return float(np.abs(pred - truth)[..., sel].mean())


def _clip_gradients(params: ModelParams, max_norm: float) -> None:
    total = 0.0
    for p in params.tensors.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.tensors.values():
            if p.grad is not None:
                p.grad *= scale


def train(config: FcnetConfig, train_pairs, val_pairs, mask: np.ndarray,
          train_cfg: TrainConfig, log_every: int = 25,
          max_val_windows: int = 8) -> TrainResult:
    """Minimize the total loss over sliding-window pairs.

    ``train_pairs``/``val_pairs`` are (X, Y, start_day) triples of
    [T,C,H,W] arrays. Returns the best-validation parameters, the final
    parameters and the training log.
    """
    config.validate()
    train_cfg.validate()
    if not train_pairs:
        raise UsageError("training needs at least one (X, Y) pair")
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(config, train_cfg.seed)
    state = OptimState.for_params(params)
    schedule = LrSchedule(total_steps=train_cfg.steps, max_lr=train_cfg.lr)
    lam = config.freq_loss_weight if config.use_freq_loss else 0.0

    val_pairs = list(val_pairs)[:max_val_windows]
    result = TrainResult(params=params.copy(), final_params=params)

    order = rng.permutation(len(train_pairs))
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        xs, ys = [], []
        for _ in range(min(train_cfg.batch, len(train_pairs))):
            if cursor >= len(order):
                order = rng.permutation(len(train_pairs))
                cursor = 0
            x, y, _ = train_pairs[order[cursor]]
            cursor += 1
            xs.append(x)
            ys.append(y)
        return np.stack(xs), np.stack(ys)

    def validate() -> float:
        if not val_pairs:
            return math.nan
        errs = []
        with no_grad():
            for x, y, _ in val_pairs:
                reset_tape()
                pred = forward_batch(Tensor(x[None]), params, config)
                out = np.clip(pred.data[0], 0.0, 1.0)
                out[:, :, mask == 0] = 0.0
                errs.append(_masked_mae(out, y, mask))
        return float(np.mean(errs))

    for step in range(1, train_cfg.steps + 1):
        lr = one_cycle_lr(step, schedule)
        xb, yb = next_batch()
        reset_tape()
        params.zero_grads()
        try:
            pred, freq_out = forward_batch(Tensor(xb), params, config,
                                           want_freq_out=True)
            target = Tensor(yb)
            if freq_out is None:
                freq_out = pred  # branch ablated: spectra supervise the fusion
            total, p_term, f_term = total_loss(pred, target, freq_out, mask, lam)
            total_val = total.item()
            if not math.isfinite(total_val) or total_val > DIVERGENCE_LIMIT:
                result.diverged = True
                break
            total.backward()
            _clip_gradients(params, GRAD_CLIP_NORM)
            adamw_step(params, state, lr)
        except NumericError:
            result.diverged = True
            break

        if step % log_every == 0 or step == train_cfg.steps or step == 1:
            val_mae = validate()
            result.log.append({
                "step": step,
                "lr": lr,
                "total": total_val,
                "pred": p_term.item(),
                "freq": 0.0 if f_term is None else f_term.item(),
                "val_mae": val_mae,
            })
            if math.isnan(val_mae) or val_mae < result.best_val_mae:
                if not math.isnan(val_mae):
                    result.best_val_mae = val_mae
                result.params = params.copy()

    result.final_params = params
    reset_tape()
    return result
