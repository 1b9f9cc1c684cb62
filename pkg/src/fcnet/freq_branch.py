"""Frequency feature extraction branch.

The sequence is cut into non-overlapping patches, linearly projected into a
token grid with an additive position embedding, run through a stack of
adaptive frequency filter blocks (spectral transform over the token grid,
learnable complex per-bin filter, inverse transform, ConvFFN residual),
and projected back to grid space.

The learnable filter is Hermitian-symmetrized before use so that filtered
spectra of real token fields invert to real fields; without this the
inverse transform would be complex and the branch output undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DimensionError
from .spectral import SpectralField, complex_mul, dft2d, idft2d
from .tensor import Tensor, conv2d, linear, op_scope


@dataclass
class ConvFfnParams:
    fc1_w: Tensor  # [hidden, d]
    fc1_b: Tensor  # [hidden]
    dw_k: Tensor   # [hidden, 1, 3, 3]
    dw_b: Tensor   # [hidden]
    fc2_w: Tensor  # [d, hidden]
    fc2_b: Tensor  # [d]


@dataclass
class AffbParams:
    filter_re: Tensor  # [d, h, w]
    filter_im: Tensor
    ffn: ConvFfnParams


@dataclass
class PatchEmbedParams:
    proj: Tensor  # [d, P*P*C]
    pos: Tensor   # [T, h, w, d]


@dataclass
class FreqBranchParams:
    embed: PatchEmbedParams
    blocks: list[AffbParams]
    deproj: Tensor  # [P*P*C, d]
    time_proj: Tensor | None = None  # [T', T]


def patch_embed(x: Tensor, params: PatchEmbedParams, patch: int) -> Tensor:
    """[B,T,C,H,W] -> token grid [B,T,h,w,d]."""
    B, T, C, H, W = x.shape
    if H % patch or W % patch:
        raise ConfigError(f"patch {patch} does not divide grid {H}x{W}")
    h, w = H // patch, W // patch
    patches = tz.reshape(x, (B, T, C, h, patch, w, patch))
    patches = tz.transpose(patches, (0, 1, 3, 5, 2, 4, 6))
    patches = tz.reshape(patches, (B, T, h, w, C * patch * patch))
    tokens = linear(patches, params.proj)
    return tz.add(tokens, params.pos)


def depatchify(tokens: Tensor, deproj: Tensor, channels: int,
               patch: int) -> Tensor:
    """Token grid [B,T,h,w,d] -> [B,T,C,H,W]; a pure linear map."""
    B, T, h, w, _ = tokens.shape
    flat = linear(tokens, deproj)
    grid = tz.reshape(flat, (B, T, h, w, channels, patch, patch))
    grid = tz.transpose(grid, (0, 1, 4, 2, 5, 3, 6))
    return tz.reshape(grid, (B, T, channels, h * patch, w * patch))


def effective_filter(filter_re: Tensor, filter_im: Tensor) -> SpectralField:
    """Hermitian-symmetrized filter: 0.5 * (W + conj(W(-u mod h, -v mod w)))."""
    h, w = filter_re.shape[-2], filter_re.shape[-1]
    idx_h = (-np.arange(h)) % h
    idx_w = (-np.arange(w)) % w
    re_flip = tz.permute_axis(tz.permute_axis(filter_re, idx_h, -2), idx_w, -1)
    im_flip = tz.permute_axis(tz.permute_axis(filter_im, idx_h, -2), idx_w, -1)
    re = tz.mul(tz.add(filter_re, re_flip), 0.5)
    im = tz.mul(tz.sub(filter_im, im_flip), 0.5)
    return SpectralField(re, im)


def adaptive_filter(tokens: Tensor, filt: SpectralField) -> Tensor:
    """Per-channel spectral filtering of the token grid.

    tokens [B,T,h,w,d], filter (re, im) of shape [d,h,w]; the filter must be
    Hermitian-symmetric (see :func:`effective_filter`) so the result is real.
    """
    planes = tz.transpose(tokens, (0, 1, 4, 2, 3))  # [B,T,d,h,w]
    spec = dft2d(planes)
    filtered = complex_mul(filt, spec)
    spatial = idft2d(filtered)
    return tz.transpose(spatial, (0, 1, 3, 4, 2))


def conv_ffn(s: Tensor, params: ConvFfnParams) -> Tensor:
    """FC -> 3x3 depthwise conv -> SiLU -> FC over the token grid."""
    B, T, h, w, d = s.shape
    hidden = params.fc1_w.shape[0]
    x = linear(s, params.fc1_w, params.fc1_b)
    x = tz.reshape(x, (B * T, h, w, hidden))
    x = tz.transpose(x, (0, 3, 1, 2))
    x = conv2d(x, params.dw_k, padding=1, groups=hidden)
    x = tz.add(x, tz.reshape(params.dw_b, (1, hidden, 1, 1)))
    x = tz.silu(x)
    x = tz.transpose(x, (0, 2, 3, 1))
    x = tz.reshape(x, (B, T, h, w, hidden))
    return linear(x, params.fc2_w, params.fc2_b)


def affb_forward(tokens: Tensor, params: AffbParams) -> Tensor:
    filt = effective_filter(params.filter_re, params.filter_im)
    s = adaptive_filter(tokens, filt)
    return tz.add(conv_ffn(s, params.ffn), s)


def freq_branch_forward(x: Tensor, params: FreqBranchParams, patch: int,
                        channels: int, t_out: int) -> Tensor:
    """[B,T,C,H,W] -> [B,T',C,H,W] through the full branch."""
    if not params.blocks:
        raise ConfigError("the filter block stack must contain at least one block")
    T = x.shape[1]
    if t_out != T and params.time_proj is None:
        raise ConfigError(
            f"T'={t_out} differs from T={T} but no time projection is configured")
    tokens = patch_embed(x, params.embed, patch)
    for i, blk in enumerate(params.blocks):
        with op_scope(f"affb{i}"):
            tokens = affb_forward(tokens, blk)
    out = depatchify(tokens, params.deproj, channels, patch)
    if params.time_proj is not None:
        if params.time_proj.shape != (t_out, T):
            raise DimensionError(
                f"time projection {params.time_proj.shape} != ({t_out}, {T})")
        moved = tz.transpose(out, (0, 2, 3, 4, 1))  # [B,C,H,W,T]
        moved = linear(moved, params.time_proj)
        out = tz.transpose(moved, (0, 4, 1, 2, 3))
    return out
