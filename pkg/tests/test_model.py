"""Model assembly: forward contracts, init determinism, checkpoints."""

import numpy as np
import pytest

from fcnet import ConfigError, FormatError, reset_tape
from fcnet.config import FcnetConfig
from fcnet.model import (
    fcnet_forward,
    forward_batch,
    init_params,
    load_checkpoint,
    param_specs,
    save_checkpoint,
)
from fcnet.tensor import Tensor, tsum

SMALL = FcnetConfig(T=2, T_prime=2, C=1, H=16, W=16, patch=4, embed_dim=8,
                    affb_blocks=2, hfeb_blocks=1, encoder_depth=2, width=8)


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


def rand_input(config, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (config.T, config.C, config.H, config.W)
    if batch is not None:
        shape = (batch,) + shape
    return Tensor(rng.uniform(0.0, 1.0, size=shape).astype(np.float32))


def test_forward_shape_contract_default_scale():
    config = FcnetConfig(T=14, T_prime=14, H=64, W=64, affb_blocks=1,
                         hfeb_blocks=1, encoder_depth=4).validate()
    params = init_params(config, seed=0)
    out = fcnet_forward(rand_input(config, seed=1), params, config)
    assert out.shape == (14, 1, 64, 64)


def test_forward_is_deterministic():
    params = init_params(SMALL, seed=3)
    x = rand_input(SMALL, seed=4)
    a = fcnet_forward(x, params, SMALL).data
    reset_tape()
    b = fcnet_forward(x, params, SMALL).data
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_bad_shape():
    params = init_params(SMALL, seed=5)
    bad = Tensor(np.zeros((3, 1, 16, 16), np.float32))
    with pytest.raises(ConfigError):
        fcnet_forward(bad, params, SMALL)


def test_ablation_affb_ignores_freq_parameters():
    config_off = FcnetConfig(**{**SMALL.__dict__, "use_affb": False})
    params = init_params(config_off, seed=6)
    x = rand_input(config_off, seed=7)
    base = fcnet_forward(x, params, config_off).data.copy()
    for name, t in params.tensors.items():
        if name.startswith("freq."):
            t.data += 123.0
    reset_tape()
    perturbed = fcnet_forward(x, params, config_off).data
    np.testing.assert_array_equal(base, perturbed)


def test_ablation_hfeb_ignores_attention_parameters():
    config_off = FcnetConfig(**{**SMALL.__dict__, "use_hfeb": False})
    params = init_params(config_off, seed=8)
    x = rand_input(config_off, seed=9)
    base = fcnet_forward(x, params, config_off).data.copy()
    for name, t in params.tensors.items():
        if ".hfeb" in name:
            t.data += 55.0
    reset_tape()
    np.testing.assert_array_equal(
        base, fcnet_forward(x, params, config_off).data)


def test_toggling_branches_changes_output():
    params = init_params(SMALL, seed=10)
    x = rand_input(SMALL, seed=11)
    full = fcnet_forward(x, params, SMALL).data.copy()
    for flag in ("use_affb", "use_hfeb"):
        cfg = FcnetConfig(**{**SMALL.__dict__, flag: False})
        p2 = init_params(cfg, seed=10)
        reset_tape()
        ablated = fcnet_forward(x, p2, cfg).data
        assert not np.array_equal(full, ablated), flag


def test_gradient_reaches_every_parameter_group():
    params = init_params(SMALL, seed=12)
    xb = rand_input(SMALL, seed=13, batch=2)
    pred = forward_batch(xb, params, SMALL)
    tsum(pred * pred).backward()
    dead = [name for name, t in params.tensors.items()
            if t.grad is None or not np.any(t.grad != 0.0)]
    assert dead == []


def test_batched_and_single_forward_agree():
    params = init_params(SMALL, seed=14)
    x = rand_input(SMALL, seed=15)
    single = fcnet_forward(x, params, SMALL).data
    reset_tape()
    xb = Tensor(x.data[None])
    batched = forward_batch(xb, params, SMALL).data[0]
    np.testing.assert_allclose(single, batched, atol=0)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_same_seed_bitwise_identical():
    a = init_params(SMALL, seed=20)
    b = init_params(SMALL, seed=20)
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data,
                                      b.tensors[name].data)


def test_init_different_seed_differs():
    a = init_params(SMALL, seed=21)
    b = init_params(SMALL, seed=22)
    assert any(not np.array_equal(a.tensors[n].data, b.tensors[n].data)
               for n in a.tensors)


def test_init_forward_bounded_over_seeds():
    for seed in range(10):
        params = init_params(SMALL, seed=seed)
        reset_tape()
        out = fcnet_forward(rand_input(SMALL, seed=100 + seed), params, SMALL)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() < 10.0


def test_parameter_count_is_locked():
    # regression lock for the default configuration
    config = FcnetConfig().validate()
    count = sum(int(np.prod(shape)) for _, shape, _, _ in param_specs(config))
    assert count == 901_350


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = init_params(SMALL, seed=30)
    path = tmp_path / "model.fcnc"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, SMALL)
    assert loaded.fingerprint == params.fingerprint
    assert list(loaded.tensors) == list(params.tensors)
    for name in params.tensors:
        np.testing.assert_array_equal(loaded.tensors[name].data,
                                      params.tensors[name].data)


def test_checkpoint_truncated_file_rejected(tmp_path):
    params = init_params(SMALL, seed=31)
    path = tmp_path / "model.fcnc"
    save_checkpoint(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.fcnc"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_fingerprint_mismatch_refused(tmp_path):
    params = init_params(SMALL, seed=32)
    path = tmp_path / "model.fcnc"
    save_checkpoint(params, path)
    other = FcnetConfig(**{**SMALL.__dict__, "embed_dim": 16})
    with pytest.raises(FormatError):
        load_checkpoint(path, other)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        FcnetConfig(H=48, W=48).validate()  # not a power of two
    with pytest.raises(ConfigError):
        FcnetConfig(H=64, W=64, patch=5).validate()
    with pytest.raises(ConfigError):
        FcnetConfig(T=4, T_prime=6).validate()
    with pytest.raises(ConfigError):
        FcnetConfig(width=30).validate()  # not divisible by gn groups


def test_ablation_orthogonality_on_crafted_params():
    # zeroed frequency branch: toggling use_affb changes nothing
    params = init_params(SMALL, seed=40)
    for name, t in params.tensors.items():
        if name.startswith("freq."):
            t.data[:] = 0.0
    x = rand_input(SMALL, seed=41)
    cfg_off = FcnetConfig(**{**SMALL.__dict__, "use_affb": False})
    p_off = init_params(cfg_off, seed=40)
    for name, t in p_off.tensors.items():
        t.data = params.tensors[name].data.copy()
    on = fcnet_forward(x, params, SMALL).data
    reset_tape()
    off = fcnet_forward(x, p_off, cfg_off).data
    np.testing.assert_allclose(on, off, atol=1e-6)

    # identity-crafted attention blocks: toggling use_hfeb is a no-op
    # (sigmoid(50) saturates to a unit gate in float32)
    params = init_params(SMALL, seed=42)
    for i in range(SMALL.hfeb_blocks):
        p = f"conv.hfeb{i}"
        for suffix in ("ca.squeeze_w", "ca.squeeze_b", "ca.excite_w",
                       "tau.dw_k", "tau.dwd_k", "tau.pw_k", "tau.ta_w",
                       "tau.dw_b", "tau.dwd_b", "fuse_b", "tau.ta_b",
                       "tau.pw_b"):
            params.tensors[f"{p}.{suffix}"].data[:] = 0.0
        params.tensors[f"{p}.ca.excite_b"].data[:] = 50.0
        params.tensors[f"{p}.tau.pw_b"].data[:] = 1.0
        params.tensors[f"{p}.tau.ta_b"].data[:] = 1.0
        k = params.tensors[f"{p}.tau.dw_k"]
        k.data[:, 0, 2, 2] = 1.0
        kd = params.tensors[f"{p}.tau.dwd_k"]
        kd.data[:, 0, 3, 3] = 1.0
        fuse = params.tensors[f"{p}.fuse_k"]
        fuse.data[:] = 0.0
        fuse.data[np.arange(8), np.arange(8), 0, 0] = 1.0
    cfg_off = FcnetConfig(**{**SMALL.__dict__, "use_hfeb": False})
    p_off = init_params(cfg_off, seed=42)
    for name, t in p_off.tensors.items():
        t.data = params.tensors[name].data.copy()
    x = rand_input(SMALL, seed=43)
    on = fcnet_forward(x, params, SMALL).data
    reset_tape()
    off = fcnet_forward(x, p_off, cfg_off).data
    np.testing.assert_allclose(on, off, atol=1e-5)


def test_numeric_error_names_offending_layer():
    from fcnet import NumericError

    params = init_params(SMALL, seed=50)
    params.tensors["conv.enc1.k"].data[0, 0, 0, 0] = np.inf
    x = rand_input(SMALL, seed=51)
    with np.errstate(invalid="ignore"), pytest.raises(NumericError) as err:
        fcnet_forward(x, params, SMALL)
    assert "conv_branch" in str(err.value)
    assert "enc1" in str(err.value)
