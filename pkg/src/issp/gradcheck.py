"""64-bit central finite-difference checks of every layer and the full model.

Backward functions are looked up on the :mod:`issp.nn` module at call time, so
a patched (e.g. deliberately broken) layer is what gets checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Rng

H = 1e-5
LAYER_TOL = 1e-4
LOSS_TOL = 1e-6
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, np.float64).reshape(-1)
    n = np.asarray(numeric, np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x: np.ndarray, h: float = H, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    positions = range(flat.size) if idx is None else idx
    out = np.zeros(len(positions))
    for j, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def _gen(seed: int):
    return np.random.default_rng(Rng(seed).next_u64(1)[0])


def _worst(name, tol, pairs) -> CheckResult:
    return CheckResult(name, max(rel_error(a, n) for a, n in pairs), tol)


def check_conv2d(seed: int = 0, stride: int = 1, name: str = "conv2d") -> CheckResult:
    g = _gen(seed)
    x = g.standard_normal((2, 4, 4)) if stride == 1 else g.standard_normal((2, 5, 5))
    w = g.standard_normal((3, 2, 3, 3))
    b = g.standard_normal(3)
    y, cache = nn.conv2d_forward(x, w, b, 1, stride)
    dy = g.standard_normal(y.shape)
    dx, dw, db = nn.conv2d_backward(dy, cache, True)
    f = lambda: float(np.sum(nn.conv2d_forward(x, w, b, 1, stride)[0] * dy))
    return _worst(name, LAYER_TOL, [(dx, numeric_grad(f, x)), (dw, numeric_grad(f, w)), (db, numeric_grad(f, b))])


def check_linear(seed: int = 1) -> CheckResult:
    g = _gen(seed)
    x, w, b = g.standard_normal((5, 3)), g.standard_normal((4, 5)), g.standard_normal(4)
    y, cache = nn.linear_forward(x, w, b)
    dy = g.standard_normal(y.shape)
    dx, dw, db = nn.linear_backward(dy, cache, True)
    f = lambda: float(np.sum(nn.linear_forward(x, w, b)[0] * dy))
    return _worst("linear", LAYER_TOL, [(dx, numeric_grad(f, x)), (dw, numeric_grad(f, w)), (db, numeric_grad(f, b))])


def check_relu(seed: int = 2) -> CheckResult:
    g = _gen(seed)
    x = g.standard_normal((3, 4, 4))
    x[np.abs(x) < 0.01] = 0.5  # keep away from the kink
    y, cache = nn.relu_forward(x)
    dy = g.standard_normal(y.shape)
    dx = nn.relu_backward(dy, cache)
    f = lambda: float(np.sum(nn.relu_forward(x)[0] * dy))
    return _worst("relu", LAYER_TOL, [(dx, numeric_grad(f, x))])


def check_pixel_shuffle(seed: int = 3) -> CheckResult:
    g = _gen(seed)
    x = g.standard_normal((8, 3, 3))
    dy = g.standard_normal((2, 6, 6))
    dx = nn.pixel_unshuffle(dy, 2)
    f = lambda: float(np.sum(nn.pixel_shuffle(x, 2) * dy))
    return _worst("pixel_shuffle", LAYER_TOL, [(dx, numeric_grad(f, x))])


def check_mse(seed: int = 4) -> CheckResult:
    g = _gen(seed)
    pred, target = g.standard_normal((3, 4, 4)), g.standard_normal((3, 4, 4))
    _, grad = nn.mse_loss(pred, target)
    f = lambda: nn.mse_loss(pred, target)[0]
    return _worst("mse_loss", LOSS_TOL, [(grad, numeric_grad(f, pred))])


def check_model(arch: str = "mini_edsr", seed: int = 5, n_weights: int = 10) -> CheckResult:
    """Spot check ``n_weights`` random weights of every prunable layer of a 64-bit model."""
    cfg = nn.ModelConfig(arch=arch, n_blocks=2, channels=6, scale=2, hidden=8, patch=4)
    model = nn.Model(cfg, np.float64)
    nn.init_params(model, Rng(seed))
    g = _gen(seed)
    for p in model.param_list():
        p.b[...] = 0.1 * g.standard_normal(p.b.shape)
    lr = g.random((2, 3, 4, 4))
    hr = g.random((2, 3, 8, 8))
    model.forward_backward(lr, hr)
    grads = {n: model.params[n].gw.copy() for n in model.prunable_names}
    f = lambda: nn.mse_loss(model.forward(lr), hr)[0]
    pairs = []
    for name in model.prunable_names:
        w = model.params[name].w
        idx = list(g.choice(w.size, size=min(n_weights, w.size), replace=False))
        pairs.append((grads[name].reshape(-1)[idx], numeric_grad(f, w, idx=idx)))
    return _worst(f"model:{arch}", MODEL_TOL, pairs)


def run_all() -> list[CheckResult]:
    return [
        check_conv2d(),
        check_conv2d(stride=2, name="conv2d(stride 2)"),
        check_linear(),
        check_relu(),
        check_pixel_shuffle(),
        check_mse(),
        check_model("mini_edsr"),
        check_model("mini_mlp"),
    ]


def worst_failure(results: list[CheckResult]) -> CheckResult | None:
    failed = [r for r in results if not r.passed]
    return max(failed, key=lambda r: r.error / r.tol) if failed else None
