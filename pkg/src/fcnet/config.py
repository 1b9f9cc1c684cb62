"""Model/training configuration, JSON schema handling and fingerprinting.

The JSON surface is versioned and strict: unknown keys are hard errors
because silently absorbed typos are the classic reproducibility killer.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

CONFIG_SCHEMA_VERSION = 1


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class FcnetConfig:
    """Architecture hyperparameters and ablation switches."""

    T: int = 14
    T_prime: int = 14
    C: int = 1
    H: int = 64
    W: int = 64
    patch: int = 4
    embed_dim: int = 64
    affb_blocks: int = 8
    hfeb_blocks: int = 8
    encoder_depth: int = 4
    width: int = 32
    ffn_ratio: int = 4
    ca_reduction: int = 4
    gn_groups: int = 4
    freq_loss_weight: float = 0.1
    use_affb: bool = True
    use_hfeb: bool = True
    use_freq_loss: bool = True
    time_projection: bool = False

    def validate(self) -> "FcnetConfig":
        if min(self.T, self.T_prime, self.C, self.H, self.W) < 1:
            raise ConfigError("T, T', C, H, W must all be positive")
        if not (_is_pow2(self.H) and _is_pow2(self.W)):
            raise ConfigError(f"H and W must be powers of two, got {self.H}x{self.W}")
        if self.H % self.patch or self.W % self.patch:
            raise ConfigError(
                f"patch size {self.patch} must divide H={self.H} and W={self.W}")
        if self.T_prime != self.T and not self.time_projection:
            raise ConfigError("T' != T requires time_projection=true")
        if self.use_affb and self.affb_blocks < 1:
            raise ConfigError("affb_blocks must be >= 1 when the branch is enabled")
        if self.use_hfeb and self.hfeb_blocks < 1:
            raise ConfigError("hfeb_blocks must be >= 1 when the stack is enabled")
        if self.encoder_depth < 2:
            raise ConfigError("encoder_depth must be >= 2")
        down = 2 ** sum(1 for s in self.encoder_strides() if s == 2)
        if self.H % (2 * down) or self.W % (2 * down):
            raise ConfigError(
                f"grid {self.H}x{self.W} incompatible with encoder downsampling x{down}")
        if self.width % self.gn_groups:
            raise ConfigError("width must be divisible by gn_groups")
        if self.width % self.ca_reduction:
            raise ConfigError("width must be divisible by ca_reduction")
        if self.embed_dim < 1 or self.ffn_ratio < 1:
            raise ConfigError("embed_dim and ffn_ratio must be positive")
        if self.freq_loss_weight < 0:
            raise ConfigError("lambda must be non-negative")
        return self

    def encoder_strides(self) -> list[int]:
        # stride-2 on the first two blocks: the attention stack runs at 1/4 res
        return [2 if i < 2 else 1 for i in range(self.encoder_depth)]

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.H // self.patch, self.W // self.patch

    def canonical_text(self) -> str:
        fields = dataclasses.asdict(self)
        return "\n".join(f"{k}={fields[k]!r}" for k in sorted(fields))

    def fingerprint(self) -> int:
        return fnv1a32(self.canonical_text().encode("utf-8"))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        return self


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


_MODEL_KEYS = {
    "T": "T",
    "T_prime": "T_prime",
    "C": "C",
    "H": "H",
    "W": "W",
    "patch": "patch",
    "embed_dim": "embed_dim",
    "affb_blocks": "affb_blocks",
    "hfeb_blocks": "hfeb_blocks",
    "encoder_depth": "encoder_depth",
    "lambda": "freq_loss_weight",
}
_TRAIN_KEYS = {"steps", "batch", "lr", "seed"}
_ABLATION_KEYS = {"use_affb", "use_hfeb", "use_freq_loss"}


def load_config_json(path) -> tuple[FcnetConfig, TrainConfig]:
    """Parse and validate the strict {model, train, ablation} schema."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    version = raw.pop("version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {version}")
    unknown = set(raw) - {"model", "train", "ablation"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    model_kwargs = {}
    for key, value in raw.get("model", {}).items():
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown model config field: {key!r}")
        model_kwargs[_MODEL_KEYS[key]] = value
    for key, value in raw.get("ablation", {}).items():
        if key not in _ABLATION_KEYS:
            raise ConfigError(f"unknown ablation config field: {key!r}")
        model_kwargs[key] = bool(value)

    train_section = raw.get("train", {})
    for key in train_section:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown train config field: {key!r}")

    try:
        model = FcnetConfig(**model_kwargs).validate()
        train = TrainConfig(**train_section).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return model, train


def dump_config_json(model: FcnetConfig, train: TrainConfig, path) -> None:
    doc = {
        "version": CONFIG_SCHEMA_VERSION,
        "model": {
            "T": model.T,
            "T_prime": model.T_prime,
            "C": model.C,
            "H": model.H,
            "W": model.W,
            "patch": model.patch,
            "embed_dim": model.embed_dim,
            "affb_blocks": model.affb_blocks,
            "hfeb_blocks": model.hfeb_blocks,
            "encoder_depth": model.encoder_depth,
            "lambda": model.freq_loss_weight,
        },
        "train": {
            "steps": train.steps,
            "batch": train.batch,
            "lr": train.lr,
            "seed": train.seed,
        },
        "ablation": {
            "use_affb": model.use_affb,
            "use_hfeb": model.use_hfeb,
            "use_freq_loss": model.use_freq_loss,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
