"""Synthetic daily concentration archives, bit-exact grid I/O, windowing.

The generator is a desk-scale stand-in for a satellite concentration
record: a central cap whose radius follows a one-year cosine, a few
drifting anomaly blobs, and band-limited noise concentrated at the cap
edge, behind a fixed irregular land mask. It reproduces the structure the
model exploits (seasonality, sharp edges, slow drift) while staying fully
deterministic per seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, UsageError

SICG_MAGIC = b"SICG"
SICG_VERSION = 1

YEAR_DAYS = 365.0
LAND_FRACTION = 0.25


@dataclass
class SICSequence:
    """Daily fields [T,C,H,W] in [0,1] with a shared land/ocean mask."""

    data: np.ndarray          # float32 [T,C,H,W]
    mask: np.ndarray          # uint8 [H,W], 1 = ocean
    start_day: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.data.ndim != 4:
            raise UsageError(f"sequence data must be [T,C,H,W], got {self.data.shape}")
        if self.mask.shape != self.data.shape[-2:]:
            raise UsageError(
                f"mask {self.mask.shape} does not match grid {self.data.shape[-2:]}")

    @property
    def days(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class DatasetSplit:
    """Chronological, disjoint day-index intervals [start, stop)."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def validate(self) -> "DatasetSplit":
        t, v, s = self.train, self.val, self.test
        if not (t[0] <= t[1] <= v[0] <= v[1] <= s[0] <= s[1]):
            raise ConfigError(f"split intervals must be ordered: {self}")
        return self


def chronological_split(days: int, train_frac: float = 0.7,
                        val_frac: float = 0.15) -> DatasetSplit:
    train_end = int(days * train_frac)
    val_end = int(days * (train_frac + val_frac))
    return DatasetSplit((0, train_end), (train_end, val_end),
                        (val_end, days)).validate()


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _smooth_noise(rng: np.random.Generator, h: int, w: int,
                  cutoff: float) -> np.ndarray:
    """Band-limited white noise: keep spectral radii below cutoff * Nyquist."""
    spec = rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))
    fu = np.fft.fftfreq(h)[:, None]
    fv = np.fft.fftfreq(w)[None, :]
    keep = np.sqrt(fu ** 2 + fv ** 2) <= cutoff * 0.5
    field = np.fft.ifft2(spec * keep).real
    field /= max(np.abs(field).max(), 1e-12)
    return field


def synth_generate(days: int, h: int, w: int, seed: int):
    """Deterministic archive of daily fields plus a fixed land mask.

    Returns (fields [days,1,h,w] float32 in [0,1], mask [h,w] uint8).
    """
    if days < 1:
        raise ConfigError("days must be positive")
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ConfigError(f"grid extents must be powers of two, got {h}x{w}")
    rng = np.random.default_rng(seed)

    land_field = _smooth_noise(rng, h, w, cutoff=0.18)
    mask = (land_field > np.quantile(land_field, LAND_FRACTION)).astype(np.uint8)

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy = h / 2 + rng.uniform(-h / 16, h / 16)
    cx = w / 2 + rng.uniform(-w / 16, w / 16)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)

    base_radius = 0.40 * min(h, w)
    swing = 0.34 * min(h, w)
    edge_width = 0.05 * min(h, w)

    # anomaly blobs drift along closed one-year loops plus a small jittery
    # walk, so the archive repeats at lag 365 and decorrelates at lag 182
    n_blobs = int(rng.integers(2, 6))
    blob_anchor = rng.uniform([h * 0.2, w * 0.2], [h * 0.8, w * 0.8],
                              size=(n_blobs, 2))
    blob_loop = rng.uniform(0.08, 0.18, size=n_blobs) * min(h, w)
    blob_phase = rng.uniform(0.0, 2 * np.pi, size=n_blobs)
    blob_amp = rng.uniform(0.15, 0.3, size=n_blobs)
    blob_sigma = rng.uniform(0.05, 0.1, size=n_blobs) * min(h, w)
    blob_sign = rng.choice([-1.0, 1.0], size=n_blobs)
    jitter = np.zeros((n_blobs, 2))
    jitter_rho = 0.95

    # band-limited edge noise: a few narrow-band plane waves whose phases
    # lap an odd number of times per year (periodic at lag 365 and
    # anti-phased at lag 182), plus a weak broadband AR(1) component
    n_waves = 4
    wave_freq = (rng.uniform(1 / 16, 1 / 4, size=(n_waves, 2))
                 * rng.choice([-1.0, 1.0], size=(n_waves, 2)))
    wave_amp = rng.uniform(0.08, 0.16, size=n_waves)
    wave_laps = rng.choice([1, 3], size=n_waves)
    wave_phase0 = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    wave_grid = [2 * np.pi * (wave_freq[k, 0] * yy + wave_freq[k, 1] * xx)
                 for k in range(n_waves)]

    noise = _smooth_noise(rng, h, w, cutoff=0.45)
    noise_rho = 0.92

    fields = np.empty((days, 1, h, w), dtype=np.float32)
    for day in range(days):
        phase = 2 * np.pi * day / YEAR_DAYS
        radius = base_radius + swing * np.cos(phase)
        cap = 1.0 / (1.0 + np.exp((dist - radius) / edge_width))

        anomalies = np.zeros((h, w))
        for b in range(n_blobs):
            py = (blob_anchor[b, 0] + blob_loop[b] * np.cos(phase + blob_phase[b])
                  + jitter[b, 0])
            px = (blob_anchor[b, 1] + blob_loop[b] * np.sin(phase + blob_phase[b])
                  + jitter[b, 1])
            d2 = (yy - py) ** 2 + (xx - px) ** 2
            anomalies += (blob_sign[b] * blob_amp[b]
                          * np.exp(-d2 / (2 * blob_sigma[b] ** 2)))

        waves = np.zeros((h, w))
        for k in range(n_waves):
            waves += wave_amp[k] * np.cos(
                wave_grid[k] + wave_phase0[k] + phase * wave_laps[k])

        edge_weight = np.exp(-((dist - radius) ** 2) / (2 * (2 * edge_width) ** 2))
        field = cap + anomalies + (waves + 0.15 * noise) * edge_weight
        field = np.clip(field, 0.0, 1.0)
        field[mask == 0] = 0.0
        fields[day, 0] = field.astype(np.float32)

        jitter = jitter_rho * jitter + rng.normal(0.0, 0.1, size=jitter.shape)
        fresh = _smooth_noise(rng, h, w, cutoff=0.45)
        noise = noise_rho * noise + np.sqrt(1 - noise_rho ** 2) * fresh

    return fields, mask


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def window(fields: np.ndarray, t_in: int, t_out: int, stride: int,
           day_range: tuple[int, int] | None = None):
    """Sliding (X, Y) training pairs; no pair crosses the range boundary.

    X covers days [s, s+t_in), Y covers [s+t_in, s+t_in+t_out). Returns a
    list of (x_fields, y_fields, start_day) triples.
    """
    if stride < 1:
        raise UsageError("stride must be positive")
    lo, hi = day_range if day_range is not None else (0, fields.shape[0])
    span = t_in + t_out
    if hi - lo < span:
        raise UsageError(
            f"range of {hi - lo} days cannot hold a {t_in}->{t_out} window")
    pairs = []
    for start in range(lo, hi - span + 1, stride):
        pairs.append((fields[start: start + t_in],
                      fields[start + t_in: start + span], start))
    return pairs


# ---------------------------------------------------------------------------
# SICG file format
# ---------------------------------------------------------------------------

def write_sicg(seq: SICSequence, path) -> None:
    """Little-endian: magic, u16 version, u32 T/C/H/W/start_day, mask bytes,
    then float32 payload in [t, c, row, col] order."""
    t, c, h, w = seq.data.shape
    blob = bytearray()
    blob += SICG_MAGIC
    blob += struct.pack("<H", SICG_VERSION)
    blob += struct.pack("<5I", t, c, h, w, seq.start_day)
    blob += seq.mask.astype(np.uint8).tobytes()
    blob += np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_sicg(path) -> SICSequence:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc

    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated SICG file: needed {n} bytes for {what} at offset {off}")
        chunk = blob[off: off + n]
        off += n
        return chunk

    if take(4, "magic") != SICG_MAGIC:
        raise FormatError("bad magic; not a SICG file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != SICG_VERSION:
        raise FormatError(f"unsupported SICG version {version}")
    t, c, h, w, start_day = struct.unpack("<5I", take(20, "header extents"))
    mask = np.frombuffer(take(h * w, "mask payload"), dtype=np.uint8)
    mask = mask.reshape(h, w)
    if not np.all((mask == 0) | (mask == 1)):
        raise FormatError("mask bytes must be 0 or 1")
    n = t * c * h * w
    payload = take(4 * n, "field payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after payload")
    return SICSequence(data=data.astype(np.float32), mask=mask.copy(),
                       start_day=start_day)


# ---------------------------------------------------------------------------
# archive directories (shards)
# ---------------------------------------------------------------------------

SHARD_DAYS = 365


def write_archive(fields: np.ndarray, mask: np.ndarray, out_dir) -> list:
    """Write an archive as year-sized SICG shards; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, start in enumerate(range(0, fields.shape[0], SHARD_DAYS)):
        chunk = fields[start: start + SHARD_DAYS]
        path = out / f"shard_{i:04d}.sicg"
        write_sicg(SICSequence(data=chunk, mask=mask, start_day=start), path)
        paths.append(path)
    return paths


def read_archive(in_dir):
    """Concatenate all shards of a directory back into (fields, mask)."""
    from pathlib import Path

    paths = sorted(Path(in_dir).glob("*.sicg"))
    if not paths:
        raise FormatError(f"no .sicg shards found in {in_dir}")
    chunks = []
    mask = None
    expected_day = None
    for path in paths:
        seq = read_sicg(path)
        if mask is None:
            mask = seq.mask
        elif not np.array_equal(mask, seq.mask):
            raise FormatError(f"shard {path} mask differs from the archive mask")
        if expected_day is not None and seq.start_day != expected_day:
            raise FormatError(
                f"shard {path} starts at day {seq.start_day}, expected {expected_day}")
        expected_day = seq.start_day + seq.days
        chunks.append(seq.data)
    return np.concatenate(chunks, axis=0), mask
