"""Miniature SR backbones with hand-written forward/backward passes.

Image layers take channels-last batches ``(N, H, W, C)``; a single
``C x H x W`` image is accepted too and treated as a batch of one. Each
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` consumes
that cache.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .tensor import Rng, fold_nhwc, patches_nhwc, rng_uniform

PRUNABLE_KINDS = ("conv2d", "linear")
LAYER_KINDS = ("conv2d", "linear", "relu", "pixel_shuffle", "residual_add")


# ---------------------------------------------------------------- layers


def _to_nhwc(x):
    """A single ``C x H x W`` image becomes a channels-last batch of one."""
    if x.ndim == 3:
        return x.transpose(1, 2, 0)[None], True
    return x, False


def _from_nhwc(y, single):
    return np.ascontiguousarray(y[0].transpose(2, 0, 1)) if single else y


def conv2d_forward(x, w, b=None, pad=1, stride=1):
    """Convolution (cross-correlation) of a channels-last batch ``(N, H, W, Ci)``
    or a single ``Ci x H x W`` image with ``w`` of shape ``(Co, Ci, k, k)``."""
    x, single = _to_nhwc(x)
    co, ci, kh, kw = w.shape
    if x.shape[3] != ci:
        raise ShapeMismatch(f"input has {x.shape[3]} channels, kernel expects {ci}")
    if kh != kw:
        raise ShapeMismatch(f"square kernels only, got {kh}x{kw}")
    cols, (ho, wo) = patches_nhwc(x, kh, pad, stride)
    y = cols @ w.transpose(2, 3, 1, 0).reshape(-1, co)
    if b is not None:
        y += b
    y = y.reshape(x.shape[0], ho, wo, co)
    cache = (x.shape, cols, w, b is not None, pad, stride, single)
    return _from_nhwc(y, single), cache


def conv2d_backward(dy, cache, need_dx=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False."""
    x_shape, cols, w, has_bias, pad, stride, single = cache
    if single:
        dy = dy.transpose(1, 2, 0)[None]
    dy = np.ascontiguousarray(dy)
    co, ci, k, _ = w.shape
    dy2 = dy.reshape(-1, co)
    dw = (dy2.T @ cols).reshape(co, k, k, ci).transpose(0, 3, 1, 2)
    # a ones-vector product reduces over rows far faster than ndarray.sum here
    db = np.ones(dy2.shape[0], dy.dtype) @ dy2 if has_bias else None
    dx = None
    if need_dx:
        if stride == 1 and pad <= k - 1:
            # transposed conv: full correlation of dy with the flipped kernel
            wf = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, ci)
            dcols, _ = patches_nhwc(dy, k, k - 1 - pad, 1)
            dx = (dcols @ wf).reshape(x_shape)
        else:
            dcols = dy.reshape(-1, co) @ w.transpose(0, 2, 3, 1).reshape(co, -1)
            dx = fold_nhwc(dcols, x_shape, k, pad, stride)
        dx = _from_nhwc(dx, single)
    return dx, np.ascontiguousarray(dw), db


def linear_forward(x, w, b=None):
    """``y = w @ x + b`` for ``x`` of shape ``(n_in,)`` or ``(n_in, N)``."""
    if x.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"input length {x.shape[0]} != weight columns {w.shape[1]}")
    y = w @ x
    if b is not None:
        y = y + (b if x.ndim == 1 else b[:, None])
    return y, (x, w, b is not None)


def linear_backward(dy, cache, need_dx=True):
    x, w, has_bias = cache
    if x.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy() if has_bias else None
    else:
        dw = dy @ x.T
        db = dy.sum(axis=1) if has_bias else None
    dx = w.T @ dy if need_dx else None
    return dx, dw, db


def relu_forward(x):
    pos = x > 0
    return x * pos, pos


def relu_backward(dy, cache):
    return dy * cache


def pixel_shuffle(x, s):
    """``(C*s*s) x H x W -> C x sH x sW`` with ``y[c, s*h+i, s*w+j] = x[c*s*s + i*s + j, h, w]``.

    Channels-last batches ``(N, H, W, C*s*s) -> (N, sH, sW, C)`` use the same map.
    """
    x, single = _to_nhwc(x)
    n, h, w, cs = x.shape
    if cs % (s * s):
        raise ShapeMismatch(f"{cs} channels not divisible by {s}^2")
    c = cs // (s * s)
    y = x.reshape(n, h, w, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * s, w * s, c)
    return _from_nhwc(y, single)


def pixel_unshuffle(y, s):
    y, single = _to_nhwc(y)
    n, hs, ws, c = y.shape
    if hs % s or ws % s:
        raise ShapeMismatch(f"spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    x = y.reshape(n, h, s, w, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, c * s * s)
    return _from_nhwc(x, single)


def mse_loss(pred, target):
    """Mean squared error over every element and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * (2.0 / diff.size)
    return loss, grad.astype(pred.dtype, copy=False)


# ---------------------------------------------------------------- model


@dataclass
class ModelConfig:
    arch: str = "mini_edsr"
    n_blocks: int = 2
    channels: int = 16
    scale: int = 2
    hidden: int = 64  # mini_mlp only
    patch: int = 16  # mini_mlp only: fixed LR input size
    init: str = "kaiming_uniform"

    def validate(self):
        if self.arch not in ("mini_edsr", "mini_mlp"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.n_blocks < 0 or self.channels < 1 or self.hidden < 1 or self.patch < 1:
            raise ConfigError("model sizes must be positive")
        if self.init != "kaiming_uniform":
            raise ConfigError(f"unknown init {self.init!r}")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    hyper: dict = field(default_factory=dict)

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS


@dataclass
class ParamTensor:
    w: np.ndarray
    b: np.ndarray | None = None
    gw: np.ndarray | None = None
    gb: np.ndarray | None = None
    mw: np.ndarray | None = None
    vw: np.ndarray | None = None
    mb: np.ndarray | None = None
    vb: np.ndarray | None = None

    def __post_init__(self):
        z = np.zeros_like
        self.gw = z(self.w) if self.gw is None else self.gw
        self.mw = z(self.w) if self.mw is None else self.mw
        self.vw = z(self.w) if self.vw is None else self.vw
        if self.b is not None:
            self.gb = z(self.b) if self.gb is None else self.gb
            self.mb = z(self.b) if self.mb is None else self.mb
            self.vb = z(self.b) if self.vb is None else self.vb

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.w.shape[1:]))


def build_layers(cfg: ModelConfig) -> list[LayerSpec]:
    cfg.validate()
    s = cfg.scale
    if cfg.arch == "mini_edsr":
        c = cfg.channels
        layers = [LayerSpec("conv2d", "head", {"cin": 3, "cout": c, "k": 3, "pad": 1})]
        body_start = len(layers)
        for i in range(cfg.n_blocks):
            start = len(layers)
            layers += [
                LayerSpec("conv2d", f"body.{i}.conv1", {"cin": c, "cout": c, "k": 3, "pad": 1}),
                LayerSpec("relu", f"body.{i}.relu"),
                LayerSpec("conv2d", f"body.{i}.conv2", {"cin": c, "cout": c, "k": 3, "pad": 1}),
                LayerSpec("residual_add", f"body.{i}.add", {"skip": start}),
            ]
        layers += [
            LayerSpec("conv2d", "body_end", {"cin": c, "cout": c, "k": 3, "pad": 1}),
            LayerSpec("residual_add", "long_skip", {"skip": body_start}),
            LayerSpec("conv2d", "tail", {"cin": c, "cout": 3 * s * s, "k": 3, "pad": 1}),
            LayerSpec("pixel_shuffle", "upsample", {"scale": s}),
        ]
        return layers
    p, hid = cfg.patch, cfg.hidden
    return [
        LayerSpec("linear", "fc1", {"n_in": 3 * p * p, "n_out": hid, "in_shape": (3, p, p)}),
        LayerSpec("relu", "relu1"),
        LayerSpec("linear", "fc2", {"n_in": hid, "n_out": hid}),
        LayerSpec("relu", "relu2"),
        LayerSpec("linear", "fc3", {"n_in": hid, "n_out": 3 * s * s * p * p, "out_shape": (3 * s * s, p, p)}),
        LayerSpec("pixel_shuffle", "upsample", {"scale": s}),
    ]


class Model:
    """A layer list interpreted as a small feed-forward graph with skip adds.

    ``residual_add`` with ``skip=j`` adds the tensor that entered layer ``j``.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.layers = build_layers(cfg)
        self.params: dict[str, ParamTensor] = {}
        for spec in self.layers:
            h = spec.hyper
            if spec.kind == "conv2d":
                w = np.zeros((h["cout"], h["cin"], h["k"], h["k"]), self.dtype)
                self.params[spec.name] = ParamTensor(w, np.zeros(h["cout"], self.dtype))
            elif spec.kind == "linear":
                w = np.zeros((h["n_out"], h["n_in"]), self.dtype)
                self.params[spec.name] = ParamTensor(w, np.zeros(h["n_out"], self.dtype))

    @property
    def prunable_names(self) -> list[str]:
        return [s.name for s in self.layers if s.prunable]

    def param_list(self) -> list[ParamTensor]:
        return [self.params[n] for n in self.prunable_names]

    def astype(self, dtype) -> "Model":
        other = Model(self.cfg, dtype)
        for name, p in self.params.items():
            q = other.params[name]
            for attr in ("w", "b", "mw", "vw", "mb", "vb"):
                src = getattr(p, attr)
                if src is not None:
                    setattr(q, attr, src.astype(dtype))
        return other

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    # -- forward / backward

    def _run(self, x, keep_cache):
        inputs, caches = [], []
        for spec in self.layers:
            inputs.append(x)
            h = spec.hyper
            cache = None
            if spec.kind == "conv2d":
                x, cache = self._conv(spec, x)
            elif spec.kind == "linear":
                if "in_shape" in h:
                    x = x.transpose(3, 1, 2, 0).reshape(-1, x.shape[0])
                x, cache = self._linear(spec, x)
                if "out_shape" in h:
                    c, hh, ww = h["out_shape"]
                    x = np.ascontiguousarray(x.reshape(c, hh, ww, -1).transpose(3, 1, 2, 0))
            elif spec.kind == "relu":
                x, cache = relu_forward(x)
            elif spec.kind == "pixel_shuffle":
                x = pixel_shuffle(x, h["scale"])
            elif spec.kind == "residual_add":
                x = x + inputs[h["skip"]]
            caches.append(cache if keep_cache else None)
        return x, inputs, caches

    def _conv(self, spec, x):
        p = self.params[spec.name]
        return conv2d_forward(x, p.w, p.b, spec.hyper["pad"], 1)

    def _linear(self, spec, x):
        p = self.params[spec.name]
        return linear_forward(x, p.w, p.b)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N x 3 x H x W input, got {x.shape}")
        if self.cfg.arch == "mini_mlp" and x.shape[2:] != (self.cfg.patch, self.cfg.patch):
            raise ShapeMismatch(f"mini_mlp needs {self.cfg.patch}x{self.cfg.patch} inputs, got {x.shape[2:]}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``(N, 3, h, w) -> (N, 3, s*h, s*w)``."""
        self._check_input(x)
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        y, _, _ = self._run(x, keep_cache=False)
        return y.transpose(0, 3, 1, 2)

    def forward_backward(self, lr: np.ndarray, hr: np.ndarray) -> float:
        """MSE loss over the batch; weight and bias gradients land in ``params``."""
        self._check_input(lr)
        s = self.cfg.scale
        if hr.shape != (lr.shape[0], 3, lr.shape[2] * s, lr.shape[3] * s):
            raise ShapeMismatch(f"HR {hr.shape} does not match LR {lr.shape} at scale {s}")
        if lr.shape[0] == 0:
            raise ShapeMismatch("empty batch")
        x = np.ascontiguousarray(lr.transpose(0, 2, 3, 1), dtype=self.dtype)
        target = np.ascontiguousarray(hr.transpose(0, 2, 3, 1), dtype=self.dtype)
        y, inputs, caches = self._run(x, keep_cache=True)
        loss, g = mse_loss(y, target)
        self._backward(g, inputs, caches)
        return loss

    def _backward(self, g, inputs, caches):
        pending: dict[int, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            spec, cache, h = self.layers[i], caches[i], self.layers[i].hyper
            need_dx = i > 0
            if spec.kind == "conv2d":
                p = self.params[spec.name]
                g, p.gw[...], db = conv2d_backward(g, cache, need_dx)
                p.gb[...] = db
            elif spec.kind == "linear":
                p = self.params[spec.name]
                if "out_shape" in h:
                    g = g.transpose(3, 1, 2, 0).reshape(-1, g.shape[0])
                g, p.gw[...], db = linear_backward(g, cache, need_dx)
                p.gb[...] = db
                if need_dx and "in_shape" in h:
                    c, hh, ww = h["in_shape"]
                    g = np.ascontiguousarray(g.reshape(c, hh, ww, -1).transpose(3, 1, 2, 0))
            elif spec.kind == "relu":
                g = relu_backward(g, cache)
            elif spec.kind == "pixel_shuffle":
                g = pixel_unshuffle(g, h["scale"])
            elif spec.kind == "residual_add":
                j = h["skip"]
                pending[j] = g if j not in pending else pending[j] + g
            if i in pending and g is not None:
                g = g + pending.pop(i)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    lr: float = 2e-4

    def validate(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0 and self.t >= 0):
            raise ConfigError(f"invalid Adam hyperparameters {self}")


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    if isinstance(params, ParamTensor):
        params = [params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        _adam_update(p.w, p.gw, p.mw, p.vw, b1, b2, c1, c2, state.lr, state.eps)
        if p.b is not None:
            _adam_update(p.b, p.gb, p.mb, p.vb, b1, b2, c1, c2, state.lr, state.eps)


def _adam_update(w, g, m, v, b1, b2, c1, c2, lr, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * np.square(g)
    w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params, lr: float) -> None:
    if isinstance(params, ParamTensor):
        params = [params]
    for p in params:
        p.w -= lr * p.gw
        if p.b is not None:
            p.b -= lr * p.gb


def lr_schedule(k: int, lr0: float, half_every: int) -> float:
    if half_every < 1:
        raise ConfigError("half_every must be >= 1")
    return lr0 * 0.5 ** (k // half_every)


def init_params(model: Model, rng: Rng) -> None:
    """Kaiming-uniform fan-in weights, zero biases and zero Adam moments."""
    for name in model.prunable_names:
        p = model.params[name]
        bound = math.sqrt(6.0 / p.fan_in)
        p.w[...] = rng_uniform(rng, -bound, bound, p.w.size).reshape(p.w.shape)
        for arr in (p.b, p.mw, p.vw, p.mb, p.vb, p.gw, p.gb):
            if arr is not None:
                arr[...] = 0
