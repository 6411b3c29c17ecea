"""Dense f32 tensor substrate.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32. The
operations here are the ones the inference path needs; each returns a fresh
array and refuses to let NaN/Inf escape.

``matmul`` uses a compiled fixed-order kernel rather than BLAS so results are
bit-reproducible and match a naive triple loop exactly.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path

import numba
import numpy as np

F32 = np.float32

RNG_ALGORITHM = "numpy.PCG64 via SeedSequence(seed, spawn_key=(blake2b64(purpose), index))"

DTEN_MAGIC = b"DTEN"
DTEN_VERSION = 1


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{op}: non-finite values in result")
    return x


def tensor(values, shape=None) -> np.ndarray:
    """Build a float32 tensor from nested sequences or a flat list plus shape."""
    arr = np.asarray(values, dtype=F32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"dimensions must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=F32)


# -- RNG -------------------------------------------------------------------


def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2b(purpose.encode(), digest_size=8).digest(), "little")


def substream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, index)``.

    Streams are bit-identical across runs and platforms for the same triple and
    statistically independent across distinct triples.
    """
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_purpose_key(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def randn(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(F32)


# -- Ops ---------------------------------------------------------------------


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    # i-p-j order: every out[i, j] still sums over p = 0..k-1 in sequence.
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a = np.ascontiguousarray(a, dtype=F32)
    b = np.ascontiguousarray(b, dtype=F32)
    return _finite(_matmul_kernel(a, b), "matmul")


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return matmul(x, w) + b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    width = x.shape[-1]
    if gamma.shape[-1] != width or beta.shape[-1] != width:
        raise ShapeError(f"gamma/beta {gamma.shape}/{beta.shape} do not match last axis {width}")
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    xhat = centred / np.sqrt(var + F32(eps))
    return _finite(xhat * gamma + beta, "layer_norm")


_GELU_C = F32(math.sqrt(2.0 / math.pi))
_GELU_K = F32(0.044715)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    inner = _GELU_C * (x + _GELU_K * x * x * x)
    return _finite(F32(0.5) * x * (F32(1.0) + np.tanh(inner)), "gelu")


def silu(x: np.ndarray) -> np.ndarray:
    return _finite(x / (F32(1.0) + np.exp(-x)), "silu")


def add(a: np.ndarray, b) -> np.ndarray:
    if isinstance(b, np.ndarray) and b.shape != a.shape and b.ndim != 0:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _finite(a + b, "add")


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return _finite(a * F32(s), "scale")


# -- DTEN files ----------------------------------------------------------------


def encode_dten(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    header = DTEN_MAGIC + struct.pack("<BI", DTEN_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.tobytes()


def decode_dten(buf: bytes) -> np.ndarray:
    if buf[:4] != DTEN_MAGIC:
        raise ValueError("not a DTEN file (bad magic)")
    version, rank = struct.unpack_from("<BI", buf, 4)
    if version != DTEN_VERSION:
        raise ValueError(f"unsupported DTEN version {version}")
    offset = 9
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = math.prod(dims)
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise ValueError(f"DTEN payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").astype(F32).reshape(dims)


def save_dten(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_dten(x))


def load_dten(path) -> np.ndarray:
    return decode_dten(Path(path).read_bytes())
