"""Differentiable 2D discrete Fourier transform pair and spectrum helpers.

Spectra are stored as (re, im) tensor pairs so the tape never has to know
about complex numbers. The forward transform is unnormalized
(f(u,v) = sum_xy E(x,y) exp(-j 2pi (ux/H + vy/W))); the inverse carries
the 1/(HW) factor. Power-of-two extents take an iterative radix-2
Cooley-Tukey path, everything else falls back to direct summation via a
precomputed twiddle matrix; both paths are kept and tested against each
other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import NumericError
from .tensor import Tensor

# Inverse reconstructions of Hermitian spectra must be real up to this
# relative residue; anything larger means a non-Hermitian spectrum was fed
# where a real output was promised.
IMAG_RESIDUE_TOL = 1e-3


@dataclass
class SpectralField:
    """Real/imaginary pair with identical shapes, trailing axes (H, W)."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(
                f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape


# ---------------------------------------------------------------------------
# numpy-level transform engine (float64 internally)
# ---------------------------------------------------------------------------

_BITREV: dict[int, np.ndarray] = {}
_TWIDDLE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bitrev(n: int) -> np.ndarray:
    idx = _BITREV.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            idx[i] = r
        _BITREV[n] = idx
    return idx


def _fft1_pow2(re: np.ndarray, im: np.ndarray, sign: int):
    """Iterative radix-2 transform along the last axis (length 2^k)."""
    n = re.shape[-1]
    if n == 1:
        return re.copy(), im.copy()
    br = _bitrev(n)
    re = np.ascontiguousarray(re[..., br])
    im = np.ascontiguousarray(im[..., br])
    size = 2
    while size <= n:
        half = size // 2
        ang = (sign * 2.0 * np.pi / size) * np.arange(half)
        wr = np.cos(ang)
        wi = np.sin(ang)
        rv = re.reshape(re.shape[:-1] + (n // size, size))
        iv = im.reshape(im.shape[:-1] + (n // size, size))
        er = rv[..., :half]
        ei = iv[..., :half]
        odr = rv[..., half:]
        odi = iv[..., half:]
        tr = odr * wr - odi * wi
        ti = odr * wi + odi * wr
        ner = er + tr
        nei = ei + ti
        nor_ = er - tr
        noi = ei - ti
        rv[..., :half] = ner
        iv[..., :half] = nei
        rv[..., half:] = nor_
        iv[..., half:] = noi
        size *= 2
    return re, im


def _twiddle(n: int, sign: int):
    key = (n, sign)
    mats = _TWIDDLE.get(key)
    if mats is None:
        u = np.arange(n)
        ang = sign * 2.0 * np.pi * np.outer(u, u) / n
        mats = (np.cos(ang), np.sin(ang))
        _TWIDDLE[key] = mats
    return mats


def _fft1_direct(re: np.ndarray, im: np.ndarray, sign: int):
    """O(n^2) summation along the last axis; the non-power-of-two path."""
    mr, mi = _twiddle(re.shape[-1], sign)
    out_re = re @ mr.T - im @ mi.T
    out_im = re @ mi.T + im @ mr.T
    return out_re, out_im


def _fft1(re, im, sign, force_direct=False):
    if not force_direct and _is_pow2(re.shape[-1]):
        return _fft1_pow2(re, im, sign)
    return _fft1_direct(re, im, sign)


def _cfft2(re: np.ndarray, im: np.ndarray, sign: int, force_direct=False):
    """Unnormalized complex 2D transform over the trailing two axes."""
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    re, im = _fft1(re, im, sign, force_direct)
    re = re.swapaxes(-1, -2)
    im = im.swapaxes(-1, -2)
    re, im = _fft1(re, im, sign, force_direct)
    return re.swapaxes(-1, -2), im.swapaxes(-1, -2)


def dft2_direct(spatial: np.ndarray):
    """Direct-summation forward transform (kept as the slow reference path)."""
    return _cfft2(spatial, np.zeros_like(spatial), -1, force_direct=True)


# ---------------------------------------------------------------------------
# tape primitives
# ---------------------------------------------------------------------------

def dft2d(spatial: Tensor) -> SpectralField:
    """Forward transform of a real field over its trailing two axes."""
    dt = spatial.data.dtype
    fre, fim = _cfft2(spatial.data, np.zeros_like(spatial.data), -1)
    tracked = tz._tracking(spatial)
    out_re = Tensor(fre.astype(dt), requires_grad=tracked)
    out_im = Tensor(fim.astype(dt), requires_grad=tracked)
    tz._check("dft2d", out_re.data)
    tz._check("dft2d", out_im.data)
    if tracked:
        def backward(g_re, g_im):
            # adjoint of the unnormalized forward map is the +j transform
            br, _ = _cfft2(g_re, g_im, +1)
            tz._accum(spatial, br.astype(dt))

        tz.active_tape().record((out_re, out_im), backward)
    return SpectralField(out_re, out_im)


def idft2d(spectrum: SpectralField) -> Tensor:
    """Inverse transform back to a real field.

    The imaginary residue is asserted small and discarded; a large residue
    signals a non-Hermitian spectrum and raises :class:`NumericError`.
    """
    re, im = spectrum.re, spectrum.im
    H, W = re.shape[-2], re.shape[-1]
    scale = 1.0 / (H * W)
    sre, sim = _cfft2(re.data, im.data, +1)
    sre *= scale
    sim *= scale
    bad = np.abs(sim) >= IMAG_RESIDUE_TOL * (1.0 + np.abs(sre))
    if np.any(bad):
        worst = float(np.abs(sim).max())
        raise NumericError(
            f"idft2d: imaginary residue {worst:.3g} exceeds tolerance; "
            "spectrum is not Hermitian-symmetric")
    dt = re.data.dtype
    tracked = tz._tracking(re, im)
    out = Tensor(sre.astype(dt), requires_grad=tracked)
    tz._check("idft2d", out.data)
    if tracked:
        def backward(g):
            br, bi = _cfft2(g, np.zeros_like(g), -1)
            if re.requires_grad:
                tz._accum(re, (br * scale).astype(dt))
            if im.requires_grad:
                tz._accum(im, (bi * scale).astype(dt))

        tz.active_tape().record((out,), backward)
    return out


def power(spectrum: SpectralField) -> Tensor:
    """|f|^2 per bin: re^2 + im^2."""
    return tz.add(tz.mul(spectrum.re, spectrum.re),
                  tz.mul(spectrum.im, spectrum.im))


def complex_mul(a: SpectralField, b: SpectralField) -> SpectralField:
    """Elementwise complex product (ac - bd, ad + bc); broadcasts."""
    re = tz.sub(tz.mul(a.re, b.re), tz.mul(a.im, b.im))
    im = tz.add(tz.mul(a.re, b.im), tz.mul(a.im, b.re))
    return SpectralField(re, im)


def spectrum_sub(a: SpectralField, b: SpectralField) -> SpectralField:
    return SpectralField(tz.sub(a.re, b.re), tz.sub(a.im, b.im))


def _negfreq_index(n: int) -> np.ndarray:
    return (-np.arange(n)) % n


def conj_reflect(field: SpectralField) -> SpectralField:
    """conj(f((H-u) mod H, (W-v) mod W)), the Hermitian mirror of a spectrum."""
    re = tz.permute_axis(field.re, _negfreq_index(field.shape[-2]), axis=-2)
    re = tz.permute_axis(re, _negfreq_index(field.shape[-1]), axis=-1)
    im = tz.permute_axis(field.im, _negfreq_index(field.shape[-2]), axis=-2)
    im = tz.permute_axis(im, _negfreq_index(field.shape[-1]), axis=-1)
    return SpectralField(re, tz.neg(im))


def hermitian_residual(field: SpectralField) -> float:
    """Max deviation from f(u,v) == conj(f(-u mod H, -v mod W))."""
    h = conj_reflect(field)
    dre = np.abs(field.re.data - h.re.data).max()
    dim = np.abs(field.im.data - h.im.data).max()
    return float(max(dre, dim))
