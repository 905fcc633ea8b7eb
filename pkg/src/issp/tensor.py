"""Dense array kernels and the deterministic PRNG.

Tensors are plain row-major numpy arrays. :func:`im2col` gives the reference
``(C*kh*kw) x (Ho*Wo)`` unfold; training runs on channels-last batches through
:func:`patches_nhwc`, which turns a convolution into ``cols[L, k*k*C] @ W``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadGeometry, BadRange, DimensionMismatch

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, pad: int, stride: int) -> int:
    if pad < 0 or stride < 1 or k < 1:
        raise BadGeometry(f"invalid geometry k={k} pad={pad} stride={stride}")
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise BadGeometry(f"size {size} with k={k} pad={pad} stride={stride} gives a non-integral output")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Unfold a single ``C x H x W`` image into ``(C*kh*kw) x (Ho*Wo)`` columns.

    Rows are ordered (channel, kernel-row, kernel-col); column ``j`` is output
    pixel ``j`` in row-major order. Reads outside the image are zero.
    """
    if x.ndim != 3:
        raise DimensionMismatch(f"im2col expects C x H x W, got shape {x.shape}")
    cols, _ = im2col_batch(x[:, None], kh, kw, pad, stride)
    return cols


def im2col_batch(x: np.ndarray, kh: int, kw: int, pad: int = 0, stride: int = 1):
    """Channel-major batched unfold: ``(C, N, H, W) -> (C*kh*kw, N*Ho*Wo)``.

    Returns the columns and the output geometry ``(N, Ho, Wo)``.
    """
    c, n, h, w = x.shape
    ho = conv_output_size(h, kh, pad, stride)
    wo = conv_output_size(w, kw, pad, stride)
    if pad:
        xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    out = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return out.reshape(c * kh * kw, n * ho * wo), (n, ho, wo)


def col2im_batch(cols: np.ndarray, x_shape, kh: int, kw: int, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back onto the image."""
    c, n, h, w = x_shape
    ho = conv_output_size(h, kh, pad, stride)
    wo = conv_output_size(w, kw, pad, stride)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(state: int) -> tuple[int, int]:
    """Scalar reference step: returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Hash a seed and integer keys into an independent 64-bit stream seed."""
    s = seed & MASK64
    for key in keys:
        _, s = splitmix64(s ^ ((key * GOLDEN_GAMMA) & MASK64))
        _, s = splitmix64(s)
    return s


@dataclass
class Rng:
    """splitmix64 generator. ``state`` is the seed; ``counter`` counts draws.

    Draw ``i`` (1-based) is ``mix(state + i * gamma)``, so a block of draws is
    computed in one vectorized pass and is bit-identical to the scalar loop.
    """

    state: int
    counter: int = 0

    def __post_init__(self):
        self.state &= MASK64

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GOLDEN_GAMMA)
            out = _mix64(z)
        self.counter += n
        return out

    def random(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) with 53 bits of resolution."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` draws from ``range(high)``."""
        return np.minimum((self.random(n) * high).astype(np.int64), high - 1)

    def child(self, *keys: int) -> "Rng":
        return Rng(derive_seed(self.state, *keys))


def rng_uniform(rng: Rng, lo: float, hi: float, n: int) -> np.ndarray:
    if not lo < hi:
        raise BadRange(f"need lo < hi, got [{lo}, {hi})")
    out = lo + (hi - lo) * rng.random(n)
    # guard the rounding of lo + (hi-lo)*u landing exactly on hi
    return np.where(out < hi, out, np.nextafter(hi, lo))


def patches_nhwc(x: np.ndarray, k: int, pad: int, stride: int = 1):
    """Channels-last unfold: ``(N, H, W, C) -> (N*Ho*Wo, k*k*C)`` with features
    in (kernel-row, kernel-col, channel) order. Returns ``(cols, (ho, wo))``."""
    n, h, w, c = x.shape
    ho = conv_output_size(h, k, pad, stride)
    wo = conv_output_size(w, k, pad, stride)
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, k, k, c), (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, k * k * c), (ho, wo)


def fold_nhwc(cols: np.ndarray, x_shape, k: int, pad: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`patches_nhwc`: scatter-add patches back onto the image."""
    n, h, w, c = x_shape
    ho = conv_output_size(h, k, pad, stride)
    wo = conv_output_size(w, k, pad, stride)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, :, i, j]
    return out[:, pad:pad + h, pad:pad + w]


def tune_malloc() -> None:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Each training step allocates several multi-MB buffers; returning them to
    the OS and faulting them back in roughly doubles the step time.
    """
    global _MALLOC_TUNED
    if _MALLOC_TUNED:
        return
    _MALLOC_TUNED = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 31)  # M_TRIM_THRESHOLD (clamped by glibc if needed)
        libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
    except (OSError, AttributeError):
        pass


_MALLOC_TUNED = False
