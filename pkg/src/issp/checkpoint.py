"""Binary checkpoint format (``ISSPv1``).

Layout, all little-endian::

    b"ISSPv1"
    u32 header length, then a UTF-8 JSON header: resolved run config and the
        layer table (count, name, kind, weight and bias shapes)
    per parameter layer: f32 w, b, adam_m(w), adam_v(w), adam_m(b), adam_v(b)
    mask payload: u8 present; if present u8 frozen, f64 fill, then per
        prunable layer u32 pruned_count, u32[pruned_count] sorted indices, f32 tau
    train state: u64 k, u64 adam_t, f64 lr, beta1, beta2, eps, eta,
        u64 rng_state, u64 rng_counter
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, from_dict
from .errors import CheckpointError, ConfigError
from .nn import AdamState, Model
from .pruning import LayerMask, MaskState, TrainState
from .tensor import Rng

MAGIC = b"ISSPv1"
_SCALARS = struct.Struct("<QQdddddQQ")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_checkpoint(state: TrainState, cfg: RunConfig) -> bytes:
    model = state.model
    layers = [
        {"name": s.name, "kind": s.kind, "w_shape": list(model.params[s.name].w.shape),
         "b_shape": list(model.params[s.name].b.shape)}
        for s in model.layers if s.prunable
    ]
    header = json.dumps({"config": cfg.to_dict(), "layer_count": len(layers), "layers": layers},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for lay in layers:
        p = model.params[lay["name"]]
        for arr in (p.w, p.b, p.mw, p.vw, p.mb, p.vb):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    masks = state.masks
    if masks is None:
        buf.write(b"\x00")
    else:
        buf.write(struct.pack("<BBd", 1, int(masks.frozen), masks.fill))
        for lay in layers:
            lm = masks.layers[lay["name"]]
            buf.write(struct.pack("<I", lm.pruned.size))
            buf.write(np.asarray(lm.pruned, dtype="<u4").tobytes())
            buf.write(struct.pack("<f", lm.tau))
    a = state.adam
    buf.write(_SCALARS.pack(state.k, a.t, a.lr, a.beta1, a.beta2, a.eps, state.eta,
                            state.rng.state, state.rng.counter))
    return buf.getvalue()


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    atomic_write(path, encode_checkpoint(state, cfg))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).reshape(shape)


def read_header(rd: _Reader, magic: bytes) -> dict:
    if rd.take(len(magic)) != magic:
        raise CheckpointError(f"bad magic; expected {magic!r}")
    (hlen,) = rd.unpack("<I")
    try:
        return json.loads(rd.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc


def decode_checkpoint(data: bytes) -> tuple[TrainState, RunConfig]:
    rd = _Reader(data)
    header = read_header(rd, MAGIC)
    try:
        cfg = from_dict(header["config"]).validate()
        layers = header["layers"]
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    model = Model(cfg.model)
    if [l["name"] for l in layers] != model.prunable_names or header.get("layer_count") != len(layers):
        raise CheckpointError("layer table does not match the model architecture")
    for lay in layers:
        p = model.params[lay["name"]]
        if list(p.w.shape) != lay["w_shape"] or list(p.b.shape) != lay["b_shape"]:
            raise CheckpointError(f"shape mismatch in layer {lay['name']}")
        for attr, shape in (("w", p.w.shape), ("b", p.b.shape), ("mw", p.w.shape),
                            ("vw", p.w.shape), ("mb", p.b.shape), ("vb", p.b.shape)):
            setattr(p, attr, rd.array("<f4", shape).astype(np.float32))
    (present,) = rd.unpack("<B")
    masks = None
    if present == 1:
        frozen, fill = rd.unpack("<Bd")
        masks = MaskState(frozen=bool(frozen), fill=fill)
        for lay in layers:
            (count,) = rd.unpack("<I")
            idx = rd.array("<u4", (count,)).astype(np.int64)
            (tau,) = rd.unpack("<f")
            n = model.params[lay["name"]].w.size
            if count and (idx.max() >= n or np.any(np.diff(idx) <= 0)):
                raise CheckpointError(f"invalid mask indices in layer {lay['name']}")
            masks.layers[lay["name"]] = LayerMask(n, idx, tau)
    elif present != 0:
        raise CheckpointError("corrupt mask flag")
    k, t, lr, b1, b2, eps, eta, rs, rc = rd.unpack(_SCALARS.format)
    if rd.pos != len(data):
        raise CheckpointError("trailing bytes after train state")
    state = TrainState(k, model, masks, AdamState(b1, b2, eps, t, lr), Rng(rs, rc), eta)
    return state, cfg


def load_checkpoint(path) -> tuple[TrainState, RunConfig]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
