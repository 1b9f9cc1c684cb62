"""Full model assembly: parameters, forward pass, checkpoints.

Both branches are fused by elementwise sum and refined by two depthwise
3x3 convolutions with SiLU between them plus an identity residual (so a
near-zero refinement does not destroy the fused prediction at init).
Ablation flags skip branch execution; the parameter set is identical
either way, which keeps checkpoints interchangeable across ablations of
the same architecture.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .config import FcnetConfig
from .conv_branch import (
    ChannelAttentionParams,
    ConvBlockParams,
    ConvBranchParams,
    HfebParams,
    TauParams,
    conv_branch_forward,
)
from .errors import ConfigError, DimensionError, FormatError
from .freq_branch import (
    AffbParams,
    ConvFfnParams,
    FreqBranchParams,
    PatchEmbedParams,
    freq_branch_forward,
)
from .tensor import Tensor, conv2d, op_scope

CHECKPOINT_MAGIC = b"FCNC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Named, ordered parameter collection tied to one config fingerprint."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    fingerprint: int = 0

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams(fingerprint=self.fingerprint)
        for name, t in self.tensors.items():
            out.tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

def param_specs(config: FcnetConfig):
    """Yield (name, shape, init_kind, fan_in) in a fixed, stable order."""
    cfg = config
    h, w = cfg.token_grid
    d = cfg.embed_dim
    ppc = cfg.patch * cfg.patch * cfg.C
    hidden = d * cfg.ffn_ratio
    specs = [
        ("freq.patch.proj", (d, ppc), "weight", ppc),
        ("freq.patch.pos", (cfg.T, h, w, d), "embedding", None),
    ]
    for i in range(cfg.affb_blocks):
        p = f"freq.affb{i}"
        specs += [
            (f"{p}.filter_re", (d, h, w), "filter", None),
            (f"{p}.filter_im", (d, h, w), "filter", None),
            (f"{p}.ffn.fc1_w", (hidden, d), "weight", d),
            (f"{p}.ffn.fc1_b", (hidden,), "zeros", None),
            (f"{p}.ffn.dw_k", (hidden, 1, 3, 3), "weight", 9),
            (f"{p}.ffn.dw_b", (hidden,), "zeros", None),
            (f"{p}.ffn.fc2_w", (d, hidden), "weight", hidden),
            (f"{p}.ffn.fc2_b", (d,), "zeros", None),
        ]
    # faint init: the fusion starts dominated by the conv branch and the
    # frequency branch fades in as its output projection grows
    specs.append(("freq.depatch.proj", (ppc, d), "weight_faint", d))
    if cfg.time_projection:
        specs.append(("freq.timeproj.w", (cfg.T_prime, cfg.T), "weight", cfg.T))

    wd = cfg.width
    tc_in = cfg.T * cfg.C
    tc_out = cfg.T_prime * cfg.C
    for i in range(cfg.encoder_depth):
        cin = tc_in if i == 0 else wd
        specs += [
            (f"conv.enc{i}.k", (wd, cin, 3, 3), "weight", cin * 9),
            (f"conv.enc{i}.gamma", (wd,), "ones", None),
            (f"conv.enc{i}.beta", (wd,), "zeros", None),
        ]
    red = wd // cfg.ca_reduction
    for i in range(cfg.hfeb_blocks):
        p = f"conv.hfeb{i}"
        specs += [
            (f"{p}.ca.squeeze_w", (red, wd), "weight", wd),
            (f"{p}.ca.squeeze_b", (red,), "zeros", None),
            (f"{p}.ca.excite_w", (wd, red), "weight", red),
            (f"{p}.ca.excite_b", (wd,), "zeros", None),
            (f"{p}.tau.dw_k", (wd, 1, 5, 5), "weight", 25),
            (f"{p}.tau.dw_b", (wd,), "zeros", None),
            (f"{p}.tau.dwd_k", (wd, 1, 7, 7), "weight", 49),
            (f"{p}.tau.dwd_b", (wd,), "zeros", None),
            (f"{p}.tau.pw_k", (wd, wd, 1, 1), "weight", wd),
            (f"{p}.tau.pw_b", (wd,), "zeros", None),
            (f"{p}.tau.ta_w", (wd, wd), "weight", wd),
            (f"{p}.tau.ta_b", (wd,), "zeros", None),
            (f"{p}.fuse_k", (wd, wd, 1, 1), "weight", wd),
            (f"{p}.fuse_b", (wd,), "zeros", None),
        ]
    for i in range(cfg.encoder_depth):
        specs += [
            (f"conv.dec{i}.k", (wd, wd, 3, 3), "weight", wd * 9),
            (f"conv.dec{i}.gamma", (wd,), "ones", None),
            (f"conv.dec{i}.beta", (wd,), "zeros", None),
        ]
    specs += [
        ("conv.head.k", (tc_out, wd, 3, 3), "weight", wd * 9),
        ("conv.head.b", (tc_out,), "zeros", None),
        ("refine.dw1_k", (tc_out, 1, 3, 3), "weight", 9),
        ("refine.dw1_b", (tc_out,), "zeros", None),
        ("refine.dw2_k", (tc_out, 1, 3, 3), "weight", 9),
        ("refine.dw2_b", (tc_out,), "zeros", None),
    ]
    return specs


def init_params(config: FcnetConfig, seed: int) -> ModelParams:
    """Deterministic initialization: weights N(0, 0.02/sqrt(fan_in)),
    spectral filters and position embeddings N(0, 0.02), norms at identity."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams(fingerprint=config.fingerprint())
    for name, shape, kind, fan_in in param_specs(config):
        if kind == "weight":
            data = rng.normal(0.0, 0.02 / np.sqrt(fan_in), size=shape)
        elif kind == "weight_faint":
            data = rng.normal(0.0, 0.0002 / np.sqrt(fan_in), size=shape)
        elif kind in ("filter", "embedding"):
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        else:  # pragma: no cover
            raise ValueError(f"unknown init kind {kind}")
        params.tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    return params


def _get(params: ModelParams, name: str) -> Tensor:
    try:
        return params.tensors[name]
    except KeyError as exc:
        raise ConfigError(f"parameter {name!r} missing; config mismatch?") from exc


def bind_freq_params(params: ModelParams, config: FcnetConfig) -> FreqBranchParams:
    blocks = []
    for i in range(config.affb_blocks):
        p = f"freq.affb{i}"
        blocks.append(AffbParams(
            filter_re=_get(params, f"{p}.filter_re"),
            filter_im=_get(params, f"{p}.filter_im"),
            ffn=ConvFfnParams(
                fc1_w=_get(params, f"{p}.ffn.fc1_w"),
                fc1_b=_get(params, f"{p}.ffn.fc1_b"),
                dw_k=_get(params, f"{p}.ffn.dw_k"),
                dw_b=_get(params, f"{p}.ffn.dw_b"),
                fc2_w=_get(params, f"{p}.ffn.fc2_w"),
                fc2_b=_get(params, f"{p}.ffn.fc2_b"),
            )))
    return FreqBranchParams(
        embed=PatchEmbedParams(proj=_get(params, "freq.patch.proj"),
                               pos=_get(params, "freq.patch.pos")),
        blocks=blocks,
        deproj=_get(params, "freq.depatch.proj"),
        time_proj=(params.tensors.get("freq.timeproj.w")
                   if config.time_projection else None),
    )


def bind_conv_params(params: ModelParams, config: FcnetConfig) -> ConvBranchParams:
    enc = [ConvBlockParams(kernel=_get(params, f"conv.enc{i}.k"),
                           gamma=_get(params, f"conv.enc{i}.gamma"),
                           beta=_get(params, f"conv.enc{i}.beta"))
           for i in range(config.encoder_depth)]
    dec = [ConvBlockParams(kernel=_get(params, f"conv.dec{i}.k"),
                           gamma=_get(params, f"conv.dec{i}.gamma"),
                           beta=_get(params, f"conv.dec{i}.beta"))
           for i in range(config.encoder_depth)]
    hfeb = []
    for i in range(config.hfeb_blocks):
        p = f"conv.hfeb{i}"
        hfeb.append(HfebParams(
            ca=ChannelAttentionParams(
                squeeze_w=_get(params, f"{p}.ca.squeeze_w"),
                squeeze_b=_get(params, f"{p}.ca.squeeze_b"),
                excite_w=_get(params, f"{p}.ca.excite_w"),
                excite_b=_get(params, f"{p}.ca.excite_b")),
            tau=TauParams(
                dw_k=_get(params, f"{p}.tau.dw_k"),
                dw_b=_get(params, f"{p}.tau.dw_b"),
                dwd_k=_get(params, f"{p}.tau.dwd_k"),
                dwd_b=_get(params, f"{p}.tau.dwd_b"),
                pw_k=_get(params, f"{p}.tau.pw_k"),
                pw_b=_get(params, f"{p}.tau.pw_b"),
                ta_w=_get(params, f"{p}.tau.ta_w"),
                ta_b=_get(params, f"{p}.tau.ta_b")),
            fuse_k=_get(params, f"{p}.fuse_k"),
            fuse_b=_get(params, f"{p}.fuse_b")))
    return ConvBranchParams(enc=enc, hfeb=hfeb, dec=dec,
                            head_k=_get(params, "conv.head.k"),
                            head_b=_get(params, "conv.head.b"))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def refine(fused: Tensor, params: ModelParams) -> Tensor:
    """Two depthwise 3x3 convs with SiLU between, plus identity residual."""
    B, T, C, H, W = fused.shape
    k1 = _get(params, "refine.dw1_k")
    k2 = _get(params, "refine.dw2_k")
    b1 = _get(params, "refine.dw1_b")
    b2 = _get(params, "refine.dw2_b")
    tc = T * C
    z = tz.reshape(fused, (B, tc, H, W))
    r = conv2d(z, k1, padding=1, groups=tc)
    r = tz.add(r, tz.reshape(b1, (1, tc, 1, 1)))
    r = tz.silu(r)
    r = conv2d(r, k2, padding=1, groups=tc)
    r = tz.add(r, tz.reshape(b2, (1, tc, 1, 1)))
    return tz.reshape(tz.add(z, r), (B, T, C, H, W))


def forward_batch(xb: Tensor, params: ModelParams, config: FcnetConfig,
                  want_freq_out: bool = False):
    """Run the full model on [B,T,C,H,W]; returns the prediction and,
    optionally, the frequency-branch output needed by the frequency loss."""
    expected = (xb.shape[0], config.T, config.C, config.H, config.W)
    if xb.shape != expected:
        raise ConfigError(f"input shape {tuple(xb.shape)} != expected {expected}")
    if params.fingerprint != config.fingerprint():
        raise ConfigError("parameter fingerprint does not match the config")

    with op_scope("conv_branch"):
        conv_out = conv_branch_forward(
            xb, bind_conv_params(params, config), config.encoder_strides(),
            config.gn_groups, config.T_prime, config.C,
            use_hfeb=config.use_hfeb)
    freq_out = None
    if config.use_affb:
        with op_scope("freq_branch"):
            freq_out = freq_branch_forward(
                xb, bind_freq_params(params, config), config.patch, config.C,
                config.T_prime)
        fused = tz.add(conv_out, freq_out)
    else:
        fused = conv_out
    with op_scope("refine"):
        pred = refine(fused, params)
    if want_freq_out:
        return pred, freq_out
    return pred


def fcnet_forward(x: Tensor, params: ModelParams, config: FcnetConfig) -> Tensor:
    """Single-sequence forward: [T,C,H,W] -> [T',C,H,W]."""
    if x.ndim != 4:
        raise DimensionError(f"expected a [T,C,H,W] sequence, got {x.shape}")
    xb = tz.reshape(x, (1,) + tuple(x.shape))
    out = forward_batch(xb, params, config)
    return tz.reshape(out, tuple(out.shape[1:]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Bit-exact format: magic, version, fingerprint, then named tensors."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", params.fingerprint)
    blob += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", t.ndim)
        blob += struct.pack(f"<{t.ndim}I", *t.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, config: FcnetConfig | None = None) -> ModelParams:
    """Load a checkpoint; refuses mismatched magic/version/fingerprint."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc

    view = memoryview(blob)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {off}")
        chunk = view[off: off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic; not an FCNC file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (fingerprint,) = struct.unpack("<I", take(4, "fingerprint"))
    if config is not None and fingerprint != config.fingerprint():
        raise FormatError(
            f"checkpoint fingerprint {fingerprint:#010x} does not match the "
            f"config fingerprint {config.fingerprint():#010x}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    params = ModelParams(fingerprint=fingerprint)
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        payload = take(4 * n, f"payload of {name!r}")
        data = np.frombuffer(payload, dtype="<f4").reshape(shape)
        params.tensors[name] = Tensor(data.astype(np.float32),
                                      requires_grad=True)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after tensor data")
    return params
