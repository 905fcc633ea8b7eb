"""CSR export of a frozen sparse model and a sparse forward path.

Sparse model file (``ISSPs1``), little-endian::

    b"ISSPs1"
    u32 header length, UTF-8 JSON header: model config and the layer table
        (name, kind, rows, cols, nnz, weight shape)
    per layer: i32 row_ptr[rows+1], i32 col_idx[nnz], f32 vals[nnz], f32 bias[rows]
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import _Reader, atomic_write, read_header
from .errors import (CheckpointError, ConfigError, CorrectnessFailure, DimensionMismatch,
                     MaskWeightDisagreement, NotFrozen)
from .nn import Model, ModelConfig
from .tensor import im2col_batch

MAGIC = b"ISSPs1"


@dataclass
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray
    _plan: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def validate(self) -> "CsrMatrix":
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,) or rp[0] != 0 or rp[-1] != ci.size or ci.size != self.vals.size:
            raise CheckpointError("CSR row_ptr is inconsistent with nnz")
        if np.any(np.diff(rp) < 0):
            raise CheckpointError("CSR row_ptr is not non-decreasing")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.cols:
                raise CheckpointError("CSR column index out of range")
            # strictly increasing inside each row: every step up except at row starts
            steps = np.diff(ci)
            starts = np.zeros(ci.size, bool)
            starts[rp[1:-1][rp[1:-1] < ci.size]] = True
            if np.any((steps <= 0) & ~starts[1:]):
                raise CheckpointError("CSR column indices not strictly increasing within a row")
        return self

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.vals.dtype)
        rows = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.vals
        return out


def dense_to_csr(w2: np.ndarray) -> CsrMatrix:
    rows, cols = w2.shape
    r, c = np.nonzero(w2)
    row_ptr = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=rows), out=row_ptr[1:])
    return CsrMatrix(rows, cols, row_ptr, c.astype(np.int64), w2[r, c]).validate()


def to_csr(w: np.ndarray, mask, frozen: bool = True) -> CsrMatrix:
    """Lossless CSR of ``w`` flattened to ``rows x (rest)``.

    ``mask`` is a :class:`~issp.pruning.LayerMask` or a boolean keep array; a
    nonzero weight at a masked position is an error.
    """
    if not frozen:
        raise NotFrozen("mask is not frozen")
    keep = mask.keep() if hasattr(mask, "keep") else mask
    keep = np.asarray(keep, bool).reshape(-1)
    flat = w.reshape(-1)
    if keep.size != flat.size:
        raise DimensionMismatch(f"mask of {keep.size} entries for {flat.size} weights")
    bad = np.count_nonzero(flat[~keep])
    if bad:
        raise MaskWeightDisagreement(f"{bad} nonzero weight(s) at masked positions")
    return dense_to_csr(w.reshape(w.shape[0], -1))


def _slot_plan(a: CsrMatrix):
    """Entries regrouped by their position inside the row ("slot").

    Rows are sorted by length, longest first, so the rows owning slot ``l``
    are a prefix of that order; one gather then feeds a few prefix adds.
    """
    if a._plan is None:
        lens = np.diff(a.row_ptr)
        order = np.argsort(-lens, kind="stable")
        sorted_lens = lens[order]
        counts = [int(np.count_nonzero(sorted_lens > l)) for l in range(int(lens.max(initial=0)))]
        pos = [a.row_ptr[order[:m]] + l for l, m in enumerate(counts)]
        pos = np.concatenate(pos) if pos else np.zeros(0, np.int64)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        a._plan = (counts, a.col_idx[pos], a.vals[pos][:, None], inverse)
    return a._plan


def csr_matmul(a: CsrMatrix, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for dense ``b`` of shape ``(a.cols, n)``.

    Each output row sums its products in ascending column order.
    """
    if b.shape[0] != a.cols:
        raise DimensionMismatch(f"CSR {a.rows}x{a.cols} times {b.shape}")
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    counts, cols, vals, inverse = _slot_plan(a)
    out = np.zeros((a.rows, b.shape[1]), dtype=np.result_type(a.vals, b))
    if a.nnz:
        prod = np.take(b, cols, axis=0)
        prod *= vals
        start = 0
        for m in counts:
            out[:m] += prod[start:start + m]
            start += m
        out = out[inverse]
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------- sparse model


class SparseModel(Model):
    """Same graph as :class:`Model`; conv and linear layers run on CSR weights."""

    def __init__(self, cfg: ModelConfig, csr: dict[str, CsrMatrix], biases: dict[str, np.ndarray]):
        super().__init__(cfg, np.float32)
        self.csr = csr
        for name in self.prunable_names:
            p = self.params[name]
            p.w = csr[name].to_dense().reshape(p.w.shape).astype(np.float32)
            p.b = np.asarray(biases[name], np.float32)

    @classmethod
    def from_model(cls, model: Model, masks) -> "SparseModel":
        if masks is None or not masks.frozen:
            raise NotFrozen("export needs a frozen mask")
        csr, biases = {}, {}
        for name in model.prunable_names:
            p = model.params[name]
            csr[name] = to_csr(p.w, masks.layers[name], masks.frozen)
            biases[name] = p.b.copy()
        return cls(model.cfg, csr, biases)

    def dense_model(self) -> Model:
        """Dense model holding the masked weights (the reference path)."""
        m = Model(self.cfg, np.float32)
        for name in self.prunable_names:
            m.params[name].w[...] = self.params[name].w
            m.params[name].b[...] = self.params[name].b
        return m

    @property
    def nnz(self) -> int:
        return sum(c.nnz for c in self.csr.values())

    @property
    def n_weights(self) -> int:
        return sum(self.params[n].w.size for n in self.prunable_names)

    def _conv(self, spec, x):
        # activations are channels-last; the CSR rows want channel-major columns
        xc = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
        y = sparse_conv_forward(xc, self.csr[spec.name], self.params[spec.name].b,
                                spec.hyper["k"], spec.hyper["pad"])
        return np.ascontiguousarray(y.transpose(1, 2, 3, 0)), None

    def _linear(self, spec, x):
        return csr_matmul(self.csr[spec.name], x) + self.params[spec.name].b[:, None], None


def sparse_conv_forward(x, layer: CsrMatrix, b, k: int, pad: int = 1, stride: int = 1):
    """Convolution as im2col followed by CSR x dense; ``x`` is ``(C, N, H, W)`` or ``(C, H, W)``."""
    single = x.ndim == 3
    if single:
        x = x[:, None]
    cols, (n, ho, wo) = im2col_batch(x, k, k, pad, stride)
    y = csr_matmul(layer, cols)
    if b is not None:
        y += b[:, None]
    y = y.reshape(layer.rows, n, ho, wo)
    return y[:, 0] if single else y


# ---------------------------------------------------------------- file format


def save_sparse(path, sm: SparseModel) -> None:
    layers = []
    for s in sm.layers:
        if s.prunable:
            c = sm.csr[s.name]
            layers.append({"name": s.name, "kind": s.kind, "rows": c.rows, "cols": c.cols,
                           "nnz": c.nnz, "w_shape": list(sm.params[s.name].w.shape)})
    header = json.dumps({"model": dataclasses.asdict(sm.cfg), "layers": layers}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for lay in layers:
        c = sm.csr[lay["name"]]
        buf.write(np.asarray(c.row_ptr, "<i4").tobytes())
        buf.write(np.asarray(c.col_idx, "<i4").tobytes())
        buf.write(np.asarray(c.vals, "<f4").tobytes())
        buf.write(np.asarray(sm.params[lay["name"]].b, "<f4").tobytes())
    atomic_write(path, buf.getvalue())


def load_sparse(path) -> SparseModel:
    try:
        rd = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    header = read_header(rd, MAGIC)
    try:
        cfg = ModelConfig(**header["model"])
        cfg.validate()
        layers = header["layers"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt sparse header: {exc}") from exc
    csr, biases = {}, {}
    for lay in layers:
        rows, cols, nnz = lay["rows"], lay["cols"], lay["nnz"]
        rp = rd.array("<i4", (rows + 1,)).astype(np.int64)
        ci = rd.array("<i4", (nnz,)).astype(np.int64)
        vals = rd.array("<f4", (nnz,)).astype(np.float32)
        biases[lay["name"]] = rd.array("<f4", (rows,)).astype(np.float32)
        csr[lay["name"]] = CsrMatrix(rows, cols, rp, ci, vals).validate()
    if rd.pos != len(rd.data):
        raise CheckpointError("trailing bytes in sparse model file")
    sm = SparseModel(cfg, csr, biases)
    if [l["name"] for l in layers] != sm.prunable_names:
        raise CheckpointError("sparse layer table does not match the architecture")
    return sm


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchReport:
    dense_ns: int
    sparse_ns: int
    speedup: float
    nnz_fraction: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _median_ns(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def time_pair(dense_fn, sparse_fn, nnz_fraction: float, reps: int, atol: float) -> BenchReport:
    """Check both callables agree within ``atol``, warm up, then time medians."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    d, s = dense_fn(), sparse_fn()
    diff = float(np.max(np.abs(np.asarray(d, np.float64) - np.asarray(s, np.float64)))) if np.size(d) else 0.0
    if not diff <= atol:
        raise CorrectnessFailure(f"sparse and dense outputs differ by {diff:g} > {atol:g}")
    dense_ns = _median_ns(dense_fn, reps)
    sparse_ns = _median_ns(sparse_fn, reps)
    return BenchReport(dense_ns, sparse_ns, dense_ns / max(sparse_ns, 1), nnz_fraction)


def bench_compare(model: Model, sparse_model: SparseModel, x: np.ndarray, reps: int = 9) -> BenchReport:
    return time_pair(lambda: model.forward(x), lambda: sparse_model.forward(x),
                     sparse_model.nnz / sparse_model.n_weights, reps, 1e-5)


def bench_matmul(a: CsrMatrix, b: np.ndarray, reps: int = 9) -> BenchReport:
    """CSR x dense against the dense matmul of the same (masked) matrix."""
    dense = a.to_dense()
    scale = max(1.0, float(np.max(np.abs(dense @ b)))) if a.nnz else 1.0
    return time_pair(lambda: dense @ b, lambda: csr_matmul(a, b),
                     a.nnz / (a.rows * a.cols), reps, 1e-6 * scale)
