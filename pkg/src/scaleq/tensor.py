"""Dense NCHW tensors, deterministic random streams, and moment statistics.

Tensors are plain ``numpy.ndarray`` values in batch-channel-row-column
layout, float64 by default (float32 opt-in for speed experiments).  All
functions here are pure; arrays are treated as immutable after creation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64

_MAGIC = b"SEQT"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _check_nchw(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D NCHW tensor, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream: same (seed, stream) gives bit-identical
    sequences independent of scheduling.  Named substreams are derived by
    hashing, so per-branch / per-trial streams stay reproducible."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = ((self.seed & 0xFFFFFFFFFFFFFFFF) << 64) | (self.stream & 0xFFFFFFFFFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, name) -> "Rng":
        digest = hashlib.sha256(f"{self.stream}/{name}".encode()).digest()
        return Rng(self.seed, int.from_bytes(digest[:8], "little"))


def randn(shape, mean: float = 0.0, std: float = 1.0, rng: Rng | None = None,
          dtype=DEFAULT_DTYPE) -> np.ndarray:
    """i.i.d. normal tensor with the given mean/std, deterministic under rng."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all dimensions must be positive, got {shape}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    gen = (rng or Rng(0)).generator()
    out = gen.standard_normal(size=shape, dtype=np.float64) * std + mean
    return out.astype(dtype, copy=False)


@dataclass(frozen=True)
class Moments:
    """Population mean/variance (divide by n) over `count` elements."""

    mean: float
    variance: float
    count: int

    def merge(self, other: "Moments") -> "Moments":
        """Combine moments of two disjoint samples (Chan's parallel update)."""
        n = self.count + other.count
        if n == 0:
            return Moments(0.0, 0.0, 0)
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = (self.variance * self.count + other.variance * other.count
              + delta * delta * self.count * other.count / n)
        return Moments(mean, m2 / n, n)


def moments(x: np.ndarray) -> Moments:
    """Two-pass population moments of all elements."""
    x = np.asarray(x)
    n = x.size
    mean = float(np.mean(x, dtype=np.float64))
    var = float(np.mean(np.square(x - mean, dtype=np.float64), dtype=np.float64))
    return Moments(mean, var, n)


def channel_moments(x: np.ndarray) -> list[Moments]:
    """Moments over the N x H x W slice of each channel."""
    _check_nchw(x)
    n, c, h, w = x.shape
    xt = np.asarray(x, dtype=np.float64).transpose(1, 0, 2, 3).reshape(c, -1)
    means = xt.mean(axis=1)
    variances = np.mean(np.square(xt - means[:, None]), axis=1)
    return [Moments(float(m), float(v), n * h * w) for m, v in zip(means, variances)]


def concat_channels(xs) -> np.ndarray:
    """Concatenate along the channel axis; all inputs must share N, H, W."""
    xs = [_check_nchw(np.asarray(x)) for x in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != n or x.shape[2] != h or x.shape[3] != w:
            raise ShapeError(
                f"batch/spatial mismatch: {x.shape} vs {(n, '*', h, w)}")
    return np.concatenate(xs, axis=1)


def save_tensor(path, x: np.ndarray) -> None:
    """Write a tensor in the flat binary format: magic 'SEQT', u32 version,
    u32 dtype tag, 4 dims as u64, then raw little-endian element data."""
    x = _check_nchw(np.asarray(x))
    tag = _DTYPE_TAGS.get(x.dtype)
    if tag is None:
        raise ValueError(f"unsupported dtype {x.dtype}")
    header = struct.pack("<4sII4Q", _MAGIC, _VERSION, tag, *x.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(x).astype(x.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(struct.calcsize("<4sII4Q"))
        magic, version, tag, n, c, h, w = struct.unpack("<4sII4Q", header)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported version {version}")
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise ValueError(f"unknown dtype tag {tag}")
        data = np.frombuffer(f.read(), dtype=dtype.newbyteorder("<"))
    if data.size != n * c * h * w:
        raise ValueError("payload length does not match header dims")
    return data.astype(dtype).reshape(n, c, h, w)
