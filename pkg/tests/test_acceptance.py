"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. Criteria are
property-based plus scaled-down trend checks; tolerances are pinned here
and never loosened at runtime.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from fcnet import reset_tape
from fcnet.cli import main as cli_main
from fcnet.config import FcnetConfig, TrainConfig
from fcnet.conv_branch import freq_separate
from fcnet.data import (
    SICSequence,
    chronological_split,
    read_sicg,
    synth_generate,
    window,
    write_sicg,
)
from fcnet.forecast import predict, predict_recursive
from fcnet.freq_branch import effective_filter
from fcnet.losses import freq_loss, pred_loss, spectral_weights, total_loss
from fcnet.metrics import bacc, mae, nse, rmse
from fcnet.model import (
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from fcnet.spectral import (
    spectrum_sub,
    SpectralField,
    complex_mul,
    dft2d,
    hermitian_residual,
    idft2d,
    power,
)
from fcnet.tensor import (
    Tensor,
    avg_pool2d,
    bilinear_upsample2x,
    conv2d,
    conv_transpose2d,
    dilate2,
    flip_last2,
    group_norm,
    linear,
    matmul,
    permute_axis,
    rsqrt,
    sigmoid,
    silu,
    transpose,
    tsum,
)
from fcnet.trainer import train

from oracles import FD_EPS, dft2_loops, finite_diff_grad


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


def _passed(num: int, text: str) -> None:
    print(f"PASS [criterion {num}] {text}")


def _rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def _weights(shape, seed):
    return Tensor(_rand(shape, seed), dtype=np.float64)


# ---------------------------------------------------------------------------
# criterion 1: gradient integrity
# ---------------------------------------------------------------------------

def _fd_check(fn, tensors, coords_per_tensor=4, rtol=1e-3, seed=0):
    """Tape gradient vs central finite differences on sampled coordinates.

    Returns (fraction within rtol, worst relative error).
    """
    reset_tape()
    loss = fn(*tensors)
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = []
    for idx, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        n = t.data.size
        k = min(coords_per_tensor, n)
        coords = rng.choice(n, size=k, replace=False)
        fd = finite_diff_grad(fn, tensors, idx, coords, eps=FD_EPS)
        an = (np.zeros(n) if t.grad is None else t.grad.reshape(-1))[coords]
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
        errors.extend(np.abs(an - fd) / denom)
    errors = np.asarray(errors)
    return float(np.mean(errors < rtol)), float(errors.max())


def _op_registry():
    """Every differentiable operation with a scalar-loss harness."""
    w = _weights

    def t(shape, seed):
        return Tensor(_rand(shape, seed), requires_grad=True, dtype=np.float64)

    hermit = effective_filter(t((2, 4, 4), 90), t((2, 4, 4), 91))
    hr = Tensor(hermit.re.data.copy())
    hi = Tensor(hermit.im.data.copy())

    return [
        ("add", lambda a, b: tsum((a + b) * w((3, 4), 1)), [t((3, 4), 2), t((4,), 3)]),
        ("sub", lambda a, b: tsum((a - b) * w((3, 4), 4)), [t((3, 4), 5), t((3, 1), 6)]),
        ("mul", lambda a, b: tsum((a * b) * w((3, 4), 7)), [t((3, 4), 8), t((4,), 9)]),
        ("neg", lambda a: tsum((-a) * w((3, 4), 10)), [t((3, 4), 11)]),
        ("rsqrt", lambda a: tsum(rsqrt(a, 2.0) * w((3, 3), 12)), [t((3, 3), 13)]),
        ("sigmoid", lambda a: tsum(sigmoid(a) * w((3, 4), 14)), [t((3, 4), 15)]),
        ("silu", lambda a: tsum(silu(a) * w((3, 4), 16)), [t((3, 4), 17)]),
        ("sum", lambda a: tsum(tsum(a, axis=(0, 2)) * w((3,), 18)), [t((2, 3, 4), 19)]),
        ("mean", lambda a: tsum(a.mean(axis=1) * w((2, 4), 20)), [t((2, 3, 4), 21)]),
        ("reshape", lambda a: tsum(a.reshape(6, 4) * w((6, 4), 22)), [t((2, 3, 4), 23)]),
        ("transpose", lambda a: tsum(transpose(a, (2, 0, 1)) * w((4, 2, 3), 24)),
         [t((2, 3, 4), 25)]),
        ("flip_last2", lambda a: tsum(flip_last2(a) * w((2, 3, 3), 26)),
         [t((2, 3, 3), 27)]),
        ("permute_axis", lambda a: tsum(
            permute_axis(a, np.array([2, 0, 1, 3]), 1) * w((2, 4, 3), 28)),
         [t((2, 4, 3), 29)]),
        ("matmul", lambda a, b: tsum(matmul(a, b) * w((2, 3, 4), 30)),
         [t((2, 3, 5), 31), t((5, 4), 32)]),
        ("linear", lambda x, wt, b: tsum(linear(x, wt, b) * w((3, 2), 33)),
         [t((3, 4), 34), t((2, 4), 35), t((2,), 36)]),
        ("conv2d", lambda x, k: tsum(conv2d(x, k, stride=2, padding=1) * w((1, 2, 3, 3), 37)),
         [t((1, 3, 5, 5), 38), t((2, 3, 3, 3), 39)]),
        ("conv2d_grouped_dilated", lambda x, k: tsum(
            conv2d(x, k, padding=2, dilation=2, groups=2) * w((1, 2, 6, 6), 40)),
         [t((1, 2, 6, 6), 41), t((2, 1, 3, 3), 42)]),
        ("conv_transpose2d", lambda x, k: tsum(
            conv_transpose2d(x, k, stride=2, padding=1, output_padding=1)
            * w((1, 2, 8, 8), 43)),
         [t((1, 3, 4, 4), 44), t((3, 2, 3, 3), 45)]),
        ("dilate2", lambda x: tsum(dilate2(x, 2, 1) * w((1, 1, 6, 6), 46)),
         [t((1, 1, 3, 3), 47)]),
        ("avg_pool2d", lambda x: tsum(avg_pool2d(x) * w((1, 2, 2, 2), 48)),
         [t((1, 2, 4, 4), 49)]),
        ("bilinear_upsample2x", lambda x: tsum(
            bilinear_upsample2x(x) * w((1, 1, 8, 8), 50)),
         [t((1, 1, 4, 4), 51)]),
        ("group_norm", lambda x, g, b: tsum(
            group_norm(x, 2, g, b) * w((2, 4, 3, 3), 52)),
         [t((2, 4, 3, 3), 53), t((4,), 54), t((4,), 55)]),
        ("dft2d_power", lambda x: tsum(power(dft2d(x)) * w((4, 4), 56)),
         [t((4, 4), 57)]),
        ("idft2d", lambda x: tsum(
            idft2d(complex_mul(SpectralField(hr, hi), dft2d(x))) * w((4, 4), 58)),
         [t((4, 4), 59)]),
        ("freq_separate", lambda x: tsum(freq_separate(x)[1] * w((1, 1, 4, 4), 60))
                                    + tsum(freq_separate(x)[0] * w((1, 1, 2, 2), 61)),
         [t((1, 1, 4, 4), 62)]),
    ]


GRADCHECK_CONFIG = FcnetConfig(T=2, T_prime=2, C=1, H=8, W=8, patch=2,
                               embed_dim=4, affb_blocks=2, hfeb_blocks=1,
                               encoder_depth=2, width=8)


def test_criterion_1_gradient_integrity():
    started = time.monotonic()
    worst_overall = 0.0
    for name, fn, tensors in _op_registry():
        frac, worst = _fd_check(fn, tensors)
        assert frac >= 0.95, f"{name}: only {frac:.1%} of coords within 1e-3"
        assert worst < 1e-2, f"{name}: worst relative error {worst:.3g}"
        worst_overall = max(worst_overall, worst)

    # full model at 8x8 / T=2: float64 oracle run with healthy random
    # parameter scales so finite differences are well conditioned
    config = GRADCHECK_CONFIG.validate()
    params = init_params(config, seed=0)
    rng = np.random.default_rng(1)
    for t in params.tensors.values():
        t.data = rng.normal(0.0, 0.3, size=t.shape)
        t.requires_grad = True
    x = _rand((1, 2, 1, 8, 8), 2, lo=0.0, hi=1.0)
    y = _rand((1, 2, 1, 8, 8), 3, lo=0.0, hi=1.0)
    mask = np.ones((8, 8), np.uint8)
    tensors = list(params.tensors.values())

    # spectral weights are gradient-locked, so the differentiated function
    # holds them at their base-point values; the FD oracle must difference
    # that same frozen-weight function
    truth = Tensor(y, dtype=np.float64)
    _, s0 = forward_batch(Tensor(x, dtype=np.float64), params, config,
                          want_freq_out=True)
    frozen_w = spectral_weights(dft2d(truth), dft2d(s0)).w
    planes = float(np.prod(y.shape[:3]))

    def model_loss(*ps):
        for name, t in zip(params.tensors, ps):
            params.tensors[name] = t
        pred, freq_out = forward_batch(Tensor(x, dtype=np.float64), params,
                                       config, want_freq_out=True)
        p_term = pred_loss(pred, truth, mask)
        dist = power(spectrum_sub(dft2d(truth), dft2d(freq_out)))
        f_term = (dist * frozen_w).sum() * (1.0 / (64.0 * planes))
        return p_term + f_term * 0.1

    frac, worst = _fd_check(model_loss, tensors, coords_per_tensor=3)
    assert frac >= 0.95, f"full model: only {frac:.1%} of coords within 1e-3"
    elapsed = time.monotonic() - started
    assert elapsed < 120.0, f"gradient integrity took {elapsed:.0f}s"
    _passed(1, f"all ops + full model match finite differences "
               f"(worst op err {worst_overall:.2e}, model 95th within 1e-3, "
               f"{elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 2: spectral correctness
# ---------------------------------------------------------------------------

def test_criterion_2_spectral_correctness():
    for side in (8, 16):
        x = _rand((side, side), seed=side)
        f = dft2d(Tensor(x, dtype=np.float64))
        ref = dft2_loops(x)
        assert np.abs(f.re.data - ref.real).max() < 1e-4
        assert np.abs(f.im.data - ref.imag).max() < 1e-4
        back = idft2d(f)
        assert np.abs(back.data - x).max() < 1e-4
        lhs = (x ** 2).sum()
        rhs = power(f).data.sum() / (side * side)
        assert abs(lhs - rhs) / lhs < 1e-4
        assert hermitian_residual(f) < 1e-4
    _passed(2, "forward matches the double-sum oracle at 8x8 and 16x16; "
               "inverse round-trips; Parseval and Hermitian symmetry hold")


# ---------------------------------------------------------------------------
# criterion 3: loss law
# ---------------------------------------------------------------------------

def test_criterion_3_loss_law():
    g = dft2d(Tensor(_rand((8, 8), 70, 0.0, 1.0).astype(np.float32)))
    assert freq_loss(g, g).item() == 0.0
    p = dft2d(Tensor(_rand((8, 8), 71, 0.0, 1.0).astype(np.float32)))
    assert freq_loss(g, p).item() > 0.0

    two = SpectralField(Tensor(np.array([[np.exp(-1.0), np.exp(-3.0)]])),
                        Tensor(np.zeros((1, 2))))
    zero = SpectralField(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    w = spectral_weights(two, zero).w.data
    np.testing.assert_allclose(w, [[1.0 / 3.0, 1.0]], rtol=1e-6)

    x = Tensor(_rand((8, 8), 72, 0.0, 1.0), requires_grad=True,
               dtype=np.float64)
    weights = spectral_weights(g, dft2d(x))
    assert not weights.w.requires_grad
    (weights.w * weights.w).sum().backward()
    assert x.grad is None  # tape independence of the weighting

    truth = Tensor(_rand((2, 1, 8, 8), 73, 0.0, 1.0).astype(np.float32))
    pred = Tensor(_rand((2, 1, 8, 8), 74, 0.0, 1.0).astype(np.float32))
    s_out = Tensor(_rand((2, 1, 8, 8), 75, 0.0, 1.0).astype(np.float32))
    mask = np.ones((8, 8), np.uint8)
    total, p_term, f_term = total_loss(pred, truth, s_out, mask, lam=0.0)
    assert f_term is None
    assert total.item() == pred_loss(pred, truth, mask).item()
    _passed(3, "freq loss zero iff spectra equal; {e^-1, e^-3} -> {1/3, 1}; "
               "weights carry no gradient; lambda=0 total equals pred loss")


# ---------------------------------------------------------------------------
# criterion 4: high/low decomposition
# ---------------------------------------------------------------------------

def test_criterion_4_hfeb_decomposition():
    # bitwise reconstruction at the float64 oracle precision on
    # concentration-grade (float32-valued) fields
    x32 = _rand((2, 2, 8, 8), 80, 0.0, 1.0).astype(np.float32)
    x = Tensor(x32, dtype=np.float64)
    low, high = freq_separate(x)
    recon = high.data + bilinear_upsample2x(low).data
    assert np.array_equal(recon, x.data)

    const = Tensor(np.full((1, 1, 8, 8), 0.4))
    low, high = freq_separate(const)
    total_e = float((const.data ** 2).sum())
    low_e = float((bilinear_upsample2x(low).data ** 2).sum())
    assert abs(low_e - total_e) / total_e < 1e-12
    assert float((high.data ** 2).sum()) == 0.0

    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    board = Tensor(((-1.0) ** (i + j)).astype(np.float64)[None, None])
    low, high = freq_separate(board)
    ratio = float((high.data ** 2).sum()) / float((board.data ** 2).sum())
    assert ratio >= 0.90
    _passed(4, f"decomposition reconstructs bitwise; constants route 100% "
               f"low, Nyquist checkerboard routes {ratio:.1%} high")


# ---------------------------------------------------------------------------
# criterion 5: metric identities
# ---------------------------------------------------------------------------

def test_criterion_5_metric_identities():
    mask = np.ones((8, 8), np.uint8)
    rng = np.random.default_rng(85)
    for _ in range(20):
        g = rng.uniform(0, 1, size=(3, 1, 8, 8))
        p = np.clip(g + rng.normal(0, 0.1, g.shape), 0, 1)
        assert rmse(p, g, mask)[1] >= mae(p, g, mask)[1]
    g = rng.uniform(0, 1, size=(3, 1, 8, 8))
    assert nse(g, g, mask) == pytest.approx(1.0)
    p_mean = np.full_like(g, g.mean())
    assert nse(p_mean, g, mask) == pytest.approx(0.0, abs=1e-12)

    active = np.ones((8, 8), bool)
    zeros = np.zeros((8, 8), bool)
    assert bacc(zeros, zeros, active) == pytest.approx(100.0)
    assert bacc(zeros, ~zeros, active) == pytest.approx(0.0)
    active100 = np.zeros((10, 10), bool)
    active100[:, :] = True
    pred_b = np.zeros((10, 10), bool)
    truth_b = pred_b.copy()
    truth_b[3] = True  # 10 of 100 active cells disagree -> 90%
    assert bacc(pred_b, truth_b, active100) == pytest.approx(90.0)
    _passed(5, "RMSE >= MAE; NSE identities; BACC endpoint and substitution "
               "examples hold")


# ---------------------------------------------------------------------------
# criterion 6: overfit convergence
# ---------------------------------------------------------------------------

def test_criterion_6_overfit_convergence():
    started = time.monotonic()
    config = FcnetConfig(T=4, T_prime=4, H=16, W=16).validate()  # default arch
    fields, mask = synth_generate(16, 16, 16, seed=21)
    pairs = window(fields, 4, 4, stride=1)[:1]
    result = train(config, pairs, [], mask,
                   TrainConfig(steps=300, batch=1, lr=1e-3, seed=0),
                   log_every=25)
    assert not result.diverged
    first = result.log[0]["pred"]
    last = result.log[-1]["pred"]
    elapsed = time.monotonic() - started
    assert last < 0.10 * first, f"pred loss only fell to {last / first:.1%}"
    assert elapsed < 300.0, f"overfit run took {elapsed:.0f}s"
    _passed(6, f"single-pair pred loss fell to {last / first:.2%} of its "
               f"initial value in 300 steps ({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 8: round trips and format contracts
# ---------------------------------------------------------------------------

def test_criterion_8_roundtrips_and_idempotence(tmp_path):
    rng = np.random.default_rng(95)
    data = rng.uniform(0, 1, size=(3, 1, 16, 16)).astype(np.float32)
    gmask = (rng.random((16, 16)) > 0.25).astype(np.uint8)
    data[:, :, gmask == 0] = 0.0
    seq = SICSequence(data=data, mask=gmask, start_day=11)
    sicg = tmp_path / "seq.sicg"
    write_sicg(seq, sicg)
    back = read_sicg(sicg)
    assert np.array_equal(back.data, seq.data)
    assert np.array_equal(back.mask, seq.mask)

    import struct

    golden = (b"SICG" + struct.pack("<H", 1)
              + struct.pack("<5I", 1, 1, 2, 2, 3)
              + bytes([1, 1, 1, 1]) + struct.pack("<4f", 0.0, 0.5, 1.0, 0.25))
    gpath = tmp_path / "golden.sicg"
    gpath.write_bytes(golden)
    gseq = read_sicg(gpath)
    np.testing.assert_array_equal(gseq.data[0, 0], [[0.0, 0.5], [1.0, 0.25]])

    config = GRADCHECK_CONFIG.validate()
    params = init_params(config, seed=5)
    ck = tmp_path / "m.fcnc"
    save_checkpoint(params, ck)
    loaded = load_checkpoint(ck, config)
    for name in params.tensors:
        assert np.array_equal(loaded.tensors[name].data,
                              params.tensors[name].data)

    # CLI idempotence: byte-identical outputs on rerun with the same seed
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert cli_main(["synth", "--days", "40", "--size", "16x16",
                         "--seed", "4", "--out", str(out)]) == 0
        outs.append(b"".join(p.read_bytes() for p in sorted(out.glob("*.sicg"))))
    assert outs[0] == outs[1]

    cfg_doc = {
        "model": {"T": 4, "T_prime": 4, "H": 16, "W": 16, "patch": 4,
                  "embed_dim": 8, "affb_blocks": 1, "hfeb_blocks": 1,
                  "encoder_depth": 2, "lambda": 0.1},
        "train": {"steps": 8, "batch": 2, "lr": 0.001, "seed": 2},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    blobs = []
    for sub in ("t1", "t2"):
        ck2 = tmp_path / sub / "m.fcnc"
        assert cli_main(["train", "--data", str(tmp_path / "a"),
                         "--config", str(cfg_path), "--out", str(ck2),
                         "--stride", "2"]) == 0
        blobs.append(ck2.read_bytes())
    assert blobs[0] == blobs[1]
    _passed(8, "SICG and checkpoint round-trips are bitwise; the golden "
               "fixture parses exactly; synth and train are byte-idempotent")


# ---------------------------------------------------------------------------
# criterion 9: recursive contract
# ---------------------------------------------------------------------------

def test_criterion_9_recursive_contract():
    config = FcnetConfig(T=14, T_prime=14, H=16, W=16, patch=4, embed_dim=8,
                         affb_blocks=1, hfeb_blocks=1, encoder_depth=2,
                         width=8).validate()
    params = init_params(config, seed=6)
    fields, mask = synth_generate(20, 16, 16, seed=7)
    seq = SICSequence(data=fields[:14], mask=mask, start_day=0)
    out = predict_recursive(params, config, seq, steps=3)
    assert out.days == 56  # (3 + 1) * 14 lead days
    direct = predict(params, config, seq)
    np.testing.assert_array_equal(out.data[:14], direct.data)
    _passed(9, "k=3 with T'=14 emits exactly 56 days and its first window "
               "equals predict bitwise")
