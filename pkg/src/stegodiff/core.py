"""Shared value types, seeded randomness, config, and array serialization.

Everything stochastic in this codebase draws through SeededRng so that a
run is fully determined by (seed, stream_id) pairs. Streams are backed by
the counter-based Philox generator keyed on (seed, stream_id), which makes
distinct streams non-overlapping by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"STDA"
ARRAY_VERSION = 1

# Pixel convention: images live in [0, 1], so PSNR's max intensity is 1.
MAX_PIXEL = 1.0


class CorruptArrayError(IOError):
    """Raised when an array file fails header or length validation."""


def stable_stream_id(*parts) -> int:
    """Hash arbitrary labels into a 64-bit stream id, stable across runs.

    Python's builtin hash() is salted per process; this uses blake2b.
    """
    raw = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


class SeededRng:
    """A named random stream, reproducible from (seed, stream_id).

    Two instances built with the same pair replay the identical draw
    sequence; distinct stream_ids give independent Philox streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *tags) -> "SeededRng":
        """Derive a sub-stream from hashable tags (stage name, item index...)."""
        return SeededRng(self.seed, stable_stream_id(self.stream_id, *tags))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(len(seq)))]

    def torch_seed(self) -> int:
        """A 63-bit seed for torch derived from this stream."""
        return int(self._gen.integers(0, 2**63 - 1))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"


def gaussian_sample(rng: SeededRng, shape) -> np.ndarray:
    """I.i.d. draws from N(0, 1), deterministic given the rng's identity."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("gaussian_sample: shape must have at least one dimension")
    if any(s <= 0 for s in shape):
        raise ValueError(f"gaussian_sample: shape entries must be positive, got {shape}")
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# Images

@dataclass
class ImageTensor:
    """A (C, H, W) float image in [0, 1], optionally tagged with a class label."""

    data: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        validate_image(self.data)

    @property
    def shape(self):
        return self.data.shape


def validate_image(arr: np.ndarray):
    if arr.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {arr.shape}")
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ValueError(f"image channels must be 1 or 3, got {c}")
    if h < 8 or w < 8:
        raise ValueError(f"image spatial dims must be >= 8, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]; clamp first")


def clamp_pixels(arr: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1]; identity on already-valid data."""
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Array file format: magic | version | dtype | ndim | shape | raw LE bytes

def save_array(path, array: np.ndarray):
    path = Path(path)
    array = np.ascontiguousarray(array)
    dtype_str = array.dtype.str.encode("ascii")  # includes byte order, e.g. '<f8'
    header = ARRAY_MAGIC
    header += struct.pack("<B", ARRAY_VERSION)
    header += struct.pack("<B", len(dtype_str)) + dtype_str
    header += struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}q", *array.shape)
    payload = array.astype(array.dtype.newbyteorder("<")).tobytes()
    path.write_bytes(header + payload)


def load_array(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    try:
        if raw[:4] != ARRAY_MAGIC:
            raise CorruptArrayError(f"{path}: bad magic")
        off = 4
        (version,) = struct.unpack_from("<B", raw, off)
        off += 1
        if version != ARRAY_VERSION:
            raise CorruptArrayError(f"{path}: unsupported version {version}")
        (dlen,) = struct.unpack_from("<B", raw, off)
        off += 1
        dtype = np.dtype(raw[off : off + dlen].decode("ascii"))
        off += dlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, off)
        off += 8 * ndim
        expected = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        payload = raw[off:]
        if len(payload) != expected:
            raise CorruptArrayError(
                f"{path}: payload length {len(payload)} != expected {expected}"
            )
        return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, TypeError) as exc:
        raise CorruptArrayError(f"{path}: malformed header ({exc})") from exc


def save_state(dir_path, arrays: dict):
    """Persist a name -> array mapping as one file per array plus an index."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    for name in names:
        save_array(dir_path / f"{name}.arr", arrays[name])
    (dir_path / "index.json").write_text(json.dumps(names, indent=1))


def load_state(dir_path) -> dict:
    dir_path = Path(dir_path)
    names = json.loads((dir_path / "index.json").read_text())
    return {name: load_array(dir_path / f"{name}.arr") for name in names}


# ---------------------------------------------------------------------------
# Run configuration

@dataclass
class RunConfig:
    """Top-level knobs for a full pipeline run."""

    image_size: int = 32
    latent_channels: int = 4
    ddim_steps: int = 50
    guidance_scale: float = 2.0
    snr_db_list: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    seed: int = 0
    captioner_backend: str = "template"
    paraphraser_backend: str = "template"
    feature_backend: str = "seeded-conv"

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not all(np.isfinite(s) for s in self.snr_db_list):
            raise ValueError("snr_db_list entries must be finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())
