"""Convolutional feature extraction branch.

A Conv/GroupNorm/SiLU encoder (stride 2 on the first two blocks), a stack
of high-frequency enhancement blocks at the bottleneck, and a mirrored
transposed-convolution decoder with additive, resolution-matched skip
connections. Time is folded into the channel axis so every convolution
stays 2D; the enhancement blocks treat that axis as the paper-time axis
for their channel/temporal attentions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    avg_pool2d,
    bilinear_upsample2x,
    conv2d,
    conv_transpose2d,
    group_norm,
    linear,
    op_scope,
)


@dataclass
class ConvBlockParams:
    kernel: Tensor  # encoder [Cout,Cin,3,3]; decoder [Cin,Cout,3,3]
    gamma: Tensor
    beta: Tensor


@dataclass
class ChannelAttentionParams:
    squeeze_w: Tensor  # [C/r, C]
    squeeze_b: Tensor
    excite_w: Tensor   # [C, C/r]
    excite_b: Tensor


@dataclass
class TauParams:
    dw_k: Tensor   # [C, 1, 5, 5]
    dw_b: Tensor
    dwd_k: Tensor  # [C, 1, 7, 7], dilation 3
    dwd_b: Tensor
    pw_k: Tensor   # [C, C, 1, 1]
    pw_b: Tensor
    ta_w: Tensor   # [C, C]
    ta_b: Tensor


@dataclass
class HfebParams:
    ca: ChannelAttentionParams
    tau: TauParams
    fuse_k: Tensor  # [C, C, 1, 1]
    fuse_b: Tensor


@dataclass
class ConvBranchParams:
    enc: list[ConvBlockParams]
    hfeb: list[HfebParams]
    dec: list[ConvBlockParams]
    head_k: Tensor  # [T'*C, width, 3, 3]
    head_b: Tensor


def encoder_forward(x: Tensor, blocks: list[ConvBlockParams],
                    strides: list[int], gn_groups: int):
    """Returns (latent, per-resolution activations for the skips)."""
    H, W = x.shape[-2], x.shape[-1]
    down = 1
    for s in strides:
        down *= s
    if H % down or W % down:
        raise ConfigError(f"grid {H}x{W} not divisible by total stride {down}")
    acts = []
    out = x
    for i, (blk, s) in enumerate(zip(blocks, strides)):
        with op_scope(f"enc{i}"):
            out = conv2d(out, blk.kernel, stride=s, padding=1)
            out = group_norm(out, gn_groups, blk.gamma, blk.beta)
            out = tz.silu(out)
        acts.append(out)
    return acts[-1], acts[:-1]


def _bitexact_high(field: np.ndarray, up: np.ndarray,
                   high: np.ndarray) -> np.ndarray:
    """Nudge ``high`` by <= 2 ulps toward high + up == field bitwise.

    fl(field - up) + up can miss field by one rounding step; the nearest
    representable candidate usually reconstructs exactly. Cells where
    |field| is far below |up| cannot hold the required mantissa bits at
    all (no representable high exists); those keep the correctly rounded
    value of the exact float64 difference.
    """
    exact = field.astype(np.float64) - up.astype(np.float64)
    h0 = exact.astype(high.dtype)
    if np.array_equal(h0 + up, field):
        return h0
    inf = np.array(np.inf, dtype=high.dtype)
    c1 = np.nextafter(h0, inf)
    c2 = np.nextafter(h0, -inf)
    fixed = h0.copy()
    unresolved = np.ones(high.shape, dtype=bool)
    for cand in (h0, c1, c2, np.nextafter(c1, inf), np.nextafter(c2, -inf)):
        hit = unresolved & ((cand + up) == field)
        fixed[hit] = cand[hit]
        unresolved &= ~hit
    return fixed


def freq_separate(field: Tensor):
    """Split into (low at half resolution, high at full resolution).

    The decomposition is additive by construction: field == high +
    upsample(low), bitwise wherever a representable high part exists
    (always, at float64 working precision on concentration-grade data)
    and correctly rounded otherwise.
    """
    H, W = field.shape[-2], field.shape[-1]
    if H % 2 or W % 2:
        raise DimensionError(f"freq_separate needs even extents, got {H}x{W}")
    low = avg_pool2d(field)
    up = bilinear_upsample2x(low)
    high = tz.sub(field, up)
    fixed = _bitexact_high(field.data, up.data, high.data)
    if not np.array_equal(fixed, high.data):
        high = tz.with_values(high, fixed)
    return low, high


def channel_attention(high: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Squeeze-excite gate in (0,1) per channel, broadcast over space."""
    pooled = tz.tmean(high, axis=(2, 3))
    gate = tz.silu(linear(pooled, params.squeeze_w, params.squeeze_b))
    gate = tz.sigmoid(linear(gate, params.excite_w, params.excite_b))
    gate = tz.reshape(gate, (high.shape[0], high.shape[1], 1, 1))
    return tz.mul(high, gate)


def tau_attention(low: Tensor, params: TauParams) -> Tensor:
    """Large-kernel spatial map times per-channel temporal gate.

    The spatial path composes depthwise 5x5, dilated depthwise 7x7
    (dilation 3) and pointwise 1x1 convolutions; the temporal path is a
    fully connected map over globally pooled channels. Their broadcast
    outer product weights the input elementwise.
    """
    B, K = low.shape[0], low.shape[1]
    sa = conv2d(low, params.dw_k, padding=2, groups=K)
    sa = tz.add(sa, tz.reshape(params.dw_b, (1, K, 1, 1)))
    sa = conv2d(sa, params.dwd_k, padding=9, dilation=3, groups=K)
    sa = tz.add(sa, tz.reshape(params.dwd_b, (1, K, 1, 1)))
    sa = conv2d(sa, params.pw_k)
    sa = tz.add(sa, tz.reshape(params.pw_b, (1, K, 1, 1)))
    ta = linear(tz.tmean(low, axis=(2, 3)), params.ta_w, params.ta_b)
    ta = tz.reshape(ta, (B, K, 1, 1))
    return tz.mul(tz.mul(sa, ta), low)


def hfeb_forward(field: Tensor, params: HfebParams) -> Tensor:
    """Frequency split, per-path attention, fuse; no residual is added."""
    low, high = freq_separate(field)
    high = channel_attention(high, params.ca)
    low = tau_attention(low, params.tau)
    combined = tz.add(high, bilinear_upsample2x(low))
    out = conv2d(combined, params.fuse_k)
    return tz.add(out, tz.reshape(params.fuse_b, (1, field.shape[1], 1, 1)))


def decoder_forward(latent: Tensor, skips: list[Tensor],
                    blocks: list[ConvBlockParams], strides: list[int],
                    head_k: Tensor, head_b: Tensor, gn_groups: int) -> Tensor:
    """Mirrored transposed-conv blocks with additive skips, then the head."""
    out = latent
    n = len(blocks)
    for i, (blk, s) in enumerate(zip(blocks, strides)):
        with op_scope(f"dec{i}"):
            out = conv_transpose2d(out, blk.kernel, stride=s, padding=1,
                                   output_padding=s - 1)
            out = group_norm(out, gn_groups, blk.gamma, blk.beta)
            out = tz.silu(out)
        if i < n - 1:
            skip = skips[n - 2 - i]
            if skip.shape != out.shape:
                raise DimensionError(
                    f"skip shape {skip.shape} != decoder activation {out.shape}")
            out = tz.add(out, skip)
    out = conv2d(out, head_k, padding=1)
    return tz.add(out, tz.reshape(head_b, (1, head_b.shape[0], 1, 1)))


def conv_branch_forward(x: Tensor, params: ConvBranchParams, strides: list[int],
                        gn_groups: int, t_out: int, channels: int,
                        use_hfeb: bool = True) -> Tensor:
    """[B,T,C,H,W] -> [B,T',C,H,W] through encoder, HFEB stack, decoder."""
    B, T, C, H, W = x.shape
    folded = tz.reshape(x, (B, T * C, H, W))
    with op_scope("encoder"):
        latent, skips = encoder_forward(folded, params.enc, strides, gn_groups)
    if use_hfeb:
        for i, blk in enumerate(params.hfeb):
            with op_scope(f"hfeb{i}"):
                latent = hfeb_forward(latent, blk)
    with op_scope("decoder"):
        out = decoder_forward(latent, skips, params.dec, strides[::-1],
                              params.head_k, params.head_b, gn_groups)
    return tz.reshape(out, (B, t_out, channels, H, W))
