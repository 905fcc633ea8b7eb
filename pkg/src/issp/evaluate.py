"""Super-resolve images with a trained model and score them on the Y channel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import make_eval_pair, quantize_u8
from .errors import ImageTooSmall, ShapeMismatch
from .metrics import format_value, psnr, rgb_to_y, ssim
from .nn import Model

EVAL_FIELDS = ("image", "psnr", "ssim")


def predict_float(model: Model, lr: np.ndarray) -> np.ndarray:
    """``H x W x 3`` uint8 LR image -> ``sH x sW x 3`` float output on the [0, 255] scale."""
    x = lr.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255.0)
    if model.cfg.arch == "mini_mlp":
        y = _predict_tiled(model, x)
    else:
        y = model.forward(x)
    return y[0].transpose(1, 2, 0).astype(np.float64) * 255.0


def _predict_tiled(model: Model, x: np.ndarray) -> np.ndarray:
    # the MLP sees fixed p x p inputs: cover the image with tiles, edge-padded
    p, s = model.cfg.patch, model.cfg.scale
    _, c, h, w = x.shape
    th, tw = math.ceil(h / p), math.ceil(w / p)
    xp = np.pad(x, ((0, 0), (0, 0), (0, th * p - h), (0, tw * p - w)), mode="edge")
    tiles = xp.reshape(c, th, p, tw, p).transpose(1, 3, 0, 2, 4).reshape(th * tw, c, p, p)
    out = model.forward(tiles)
    y = out.reshape(th, tw, c, s * p, s * p).transpose(2, 0, 3, 1, 4).reshape(1, c, th * s * p, tw * s * p)
    return y[:, :, :h * s, :w * s]


def predict_u8(model: Model, lr: np.ndarray) -> np.ndarray:
    return quantize_u8(predict_float(model, lr))


@dataclass
class EvalRow:
    image: str
    psnr: float
    ssim: float


def score(sr: np.ndarray, hr: np.ndarray, border: int) -> tuple[float, float]:
    """Y-channel PSNR and SSIM of two uint8 images, both shaved by ``border``."""
    if sr.shape != hr.shape:
        raise ShapeMismatch(f"SR {sr.shape} vs HR {hr.shape}")
    ys, yh = rgb_to_y(sr), rgb_to_y(hr)
    p = psnr(ys, yh, border_crop=border)
    if border:
        ys, yh = ys[border:-border, border:-border], yh[border:-border, border:-border]
    return p, ssim(ys, yh)


def evaluate_pairs(model: Model, pairs, border: int) -> list[EvalRow]:
    """``pairs`` yields ``(name, lr_u8, hr_u8)``."""
    s = model.cfg.scale
    rows = []
    for name, lr, hr in pairs:
        if hr.shape[:2] != (lr.shape[0] * s, lr.shape[1] * s):
            raise ShapeMismatch(f"{name}: HR {hr.shape[:2]} is not {s}x LR {lr.shape[:2]}")
        rows.append(EvalRow(name, *score(predict_u8(model, lr), hr, border)))
    return rows


def hr_pairs(images: dict[str, np.ndarray], scale: int, antialias: bool = True):
    """Evaluation pairs with the LR synthesized from each HR image."""
    for name, hr in images.items():
        if min(hr.shape[:2]) < scale * 6:
            raise ImageTooSmall(f"{name}: {hr.shape[:2]} too small to evaluate at scale {scale}")
        lr, hr = make_eval_pair(hr, scale, antialias)
        yield name, lr, hr


def mean_row(rows: list[EvalRow]) -> EvalRow:
    return EvalRow("mean", float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])))


def eval_csv(rows: list[EvalRow]) -> str:
    lines = [",".join(EVAL_FIELDS)]
    for r in rows + [mean_row(rows)]:
        lines.append(f"{r.image},{format_value(r.psnr)},{format_value(r.ssim)}")
    return "\n".join(lines) + "\n"


def eval_table(rows: list[EvalRow], border: int) -> str:
    width = max([len(r.image) for r in rows] + [5])
    out = [f"{'image':<{width}}  {'psnr_db':>9}  {'ssim':>7}"]
    for r in rows + [mean_row(rows)]:
        out.append(f"{r.image:<{width}}  {format_psnr(r.psnr):>9}  {r.ssim:7.4f}")
    out.append(f"(Y channel, border crop {border})")
    return "\n".join(out)


def format_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.3f}"
