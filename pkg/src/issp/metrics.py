"""Image quality metrics and the sparsity / trainability diagnostics."""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadChannels, CropTooLarge, NotFrozen, ShapeMismatch, TooSmall

CSV_FIELDS = ("k", "loss", "lr", "layer", "flips_permille", "grad_l2", "grad_var", "zero_fraction")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of an 8-bit ``H x W x 3`` image, in [16, 235]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise BadChannels(f"expected H x W x 3, got {img.shape}")
    rgb = img.astype(np.float64) / 255.0
    return 65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2] + 16.0


def _crop(a, border):
    if border == 0:
        return a
    return a[border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0, border_crop: int = 0) -> float:
    """PSNR in dB after trimming ``border_crop`` pixels per side; ``inf`` if equal."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if border_crop < 0 or 2 * border_crop >= min(a.shape[:2]):
        raise CropTooLarge(f"border_crop={border_crop} for image {a.shape[:2]}")
    d = _crop(np.asarray(a, np.float64), border_crop) - _crop(np.asarray(b, np.float64), border_crop)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over every full 11x11 Gaussian window (sigma 1.5, 8-bit constants)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs a single-channel image of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    g = gaussian_window()
    mu1, mu2 = _filter_valid(a, g), _filter_valid(b, g)
    s11 = _filter_valid(a * a, g) - mu1 * mu1
    s22 = _filter_valid(b * b, g) - mu2 * mu2
    s12 = _filter_valid(a * b, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return float(np.mean(num / den))


def flip_permille(prev_keep: np.ndarray, curr_keep: np.ndarray) -> float:
    """Permille of positions whose important/unimportant designation changed."""
    prev_keep = np.asarray(prev_keep, bool)
    curr_keep = np.asarray(curr_keep, bool)
    if prev_keep.shape != curr_keep.shape:
        raise ShapeMismatch(f"{prev_keep.shape} vs {curr_keep.shape}")
    return 1000.0 * np.count_nonzero(prev_keep != curr_keep) / prev_keep.size


def grad_stats(grad: np.ndarray) -> tuple[float, float]:
    """(L2 norm, population variance) of a gradient tensor."""
    g = np.asarray(grad, np.float64).reshape(-1)
    return float(np.sqrt(np.dot(g, g))), float(np.var(g))


def sparsity_audit(model, masks) -> dict[str, float]:
    if masks is None or not masks.frozen:
        raise NotFrozen("sparsity audit needs frozen masks")
    out = {}
    for name in model.prunable_names:
        w = model.params[name].w
        out[name] = np.count_nonzero(w == 0) / w.size
    return out


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


class MetricLog:
    """Append-only metric CSV, written to a temp file and renamed on close."""

    def __init__(self, path):
        self.path = Path(path)
        self._tmp = self.path.with_name(self.path.name + ".tmp")
        self._fh = open(self._tmp, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(CSV_FIELDS) + "\n")
        self.rows = 0

    def __call__(self, row: dict) -> None:
        self._fh.write(",".join(format_value(row[f]) for f in CSV_FIELDS) + "\n")
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()
            os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if not self._fh.closed:
            self._fh.close()
            self._tmp.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self.abort()
