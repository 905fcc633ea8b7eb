"""Image I/O, synthetic textures, bicubic LR synthesis, augmentation, patches.

Images at rest are ``H x W x 3`` uint8 arrays. Training samples are float32
``3 x h x w`` arrays in [0, 1].
"""
from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, BadMaxval, DataError, ImageTooSmall, NonSquare, TooSmall,
                     Truncated)
from .tensor import Rng, derive_seed

# ---------------------------------------------------------------- PPM


def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise Truncated("PPM header ended early")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise BadMagic(f"not a binary PPM (magic {buf[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise DataError(f"bad PPM header field {tok!r}") from exc
    w, h, maxval = fields
    if maxval != 255:
        raise BadMaxval(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise DataError(f"bad PPM size {w}x{h}")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise Truncated(f"PPM raster has {len(raster)} of {need} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"save_ppm needs H x W x 3 uint8, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())
    os.replace(tmp, path)


# ---------------------------------------------------------------- synthetic data


def _value_noise(rng: Rng, h: int, w: int, cells: int, channels: int) -> np.ndarray:
    lattice = rng.random((cells + 1) * (cells + 1) * channels).reshape(cells + 1, cells + 1, channels)

    def coords(n):
        t = np.arange(n) * (cells / n)
        i = np.minimum(t.astype(np.int64), cells - 1)
        f = t - i
        return i, f * f * (3 - 2 * f)

    yi, fy = coords(h)
    xi, fx = coords(w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = lattice[yi][:, xi] * (1 - fx) + lattice[yi][:, xi + 1] * fx
    bot = lattice[yi + 1][:, xi] * (1 - fx) + lattice[yi + 1][:, xi + 1] * fx
    return top * (1 - fy) + bot * fy


def synth_texture(rng: Rng, h: int, w: int) -> np.ndarray:
    """Multi-octave coloured value noise with hard edges and a ramp."""
    if h < 16 or w < 16:
        raise TooSmall(f"synthetic textures need at least 16x16, got {h}x{w}")
    img = np.zeros((h, w, 3))
    amp = 1.0
    for octave in range(5):
        cells = 2 ** (octave + 1)
        lum = _value_noise(rng, h, w, cells, 1)
        col = _value_noise(rng, h, w, cells, 3)
        img += amp * (0.7 * lum + 0.3 * col)
        amp *= 0.55
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(3):
        ang, off, step = rng.random(3)
        nx, ny = np.cos(2 * np.pi * ang), np.sin(2 * np.pi * ang)
        side = (xx - w / 2) * nx + (yy - h / 2) * ny > (off - 0.5) * min(h, w)
        tint = rng.random(3) - 0.5
        img += side[..., None] * (0.8 * (step - 0.5) + 0.4 * tint)
    gx, gy = rng.random(2) - 0.5
    img += (gx * xx / w + gy * yy / h)[..., None]
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------- bicubic


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@functools.lru_cache(maxsize=256)
def resize_matrix(in_size: int, out_size: int, antialias: bool = True) -> np.ndarray:
    """``out_size x in_size`` interpolation matrix with edge clamping."""
    if in_size < 1 or out_size < 1:
        raise DataError("resize sizes must be >= 1")
    scale = out_size / in_size
    ks = scale if (antialias and scale < 1) else 1.0
    width = 4.0 / ks
    u = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = ks * cubic(ks * (u[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1).astype(np.int64)
    m = np.zeros((out_size, in_size))
    np.add.at(m, (np.repeat(np.arange(out_size), taps), idx.ravel()), wts.ravel())
    m.setflags(write=False)
    return m


def bicubic_resize_float(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable resize of an ``H x W x C`` array; float64, no rounding."""
    my = resize_matrix(img.shape[0], out_h, antialias)
    mx = resize_matrix(img.shape[1], out_w, antialias)
    rows = np.einsum("oi,ijc->ojc", my, img.astype(np.float64))
    return np.einsum("pj,ojc->opc", mx, rows)


def quantize_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    return quantize_u8(bicubic_resize_float(img, out_h, out_w, antialias))


# ---------------------------------------------------------------- samples


@dataclass
class SamplePair:
    lr: np.ndarray  # 3 x p x p float32 in [0, 1]
    hr: np.ndarray  # 3 x sp x sp
    provenance: dict = field(default_factory=dict)


def u8_to_chw(img: np.ndarray) -> np.ndarray:
    return (img.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def transform(a: np.ndarray, code: int) -> np.ndarray:
    """Apply augmentation ``code`` (rotation ``code % 4`` x 90 deg, then a
    horizontal flip when ``code >= 4``) to a ``C x H x W`` array."""
    a = np.rot90(a, code % 4, axes=(1, 2))
    if code >= 4:
        a = a[:, :, ::-1]
    return np.ascontiguousarray(a)


def augment(pair: SamplePair, rng: Rng | None = None, code: int | None = None) -> SamplePair:
    if pair.lr.shape[1] != pair.lr.shape[2] or pair.hr.shape[1] != pair.hr.shape[2]:
        raise NonSquare("augmentation needs square patches")
    if code is None:
        code = int(rng.integers(8, 1)[0])
    prov = dict(pair.provenance, aug=code)
    return SamplePair(transform(pair.lr, code), transform(pair.hr, code), prov)


def _draw(u: float, high: int) -> int:
    # same map as Rng.integers
    return min(int(u * high), high - 1)


def sample_patches(hr_images, scale: int, p: int, count: int, rng: Rng,
                   augment_patches: bool = False, antialias: bool = True, ids=None,
                   lr_cache: dict | None = None) -> list[SamplePair]:
    """Random scale-aligned HR crops of ``scale*p`` with bicubic LR partners.

    Sample ``i`` draws from its own stream keyed on ``(base, i)``, so the
    result does not depend on the order in which samples are produced.
    ``lr_cache`` memoizes the LR partner of each ``(image, y, x)`` crop.
    """
    if count == 0:
        return []
    sp = scale * p
    for img in hr_images:
        if img.shape[0] < sp or img.shape[1] < sp:
            raise ImageTooSmall(f"HR image {img.shape[:2]} smaller than patch {sp}x{sp}")
    base = int(rng.next_u64(1)[0])
    out = []
    for i in range(count):
        u = Rng(derive_seed(base, i)).random(4 if augment_patches else 3)
        j = _draw(u[0], len(hr_images))
        img = hr_images[j]
        y = scale * _draw(u[1], (img.shape[0] - sp) // scale + 1)
        x = scale * _draw(u[2], (img.shape[1] - sp) // scale + 1)
        crop = img[y:y + sp, x:x + sp]
        key = (j, y, x)
        lr = lr_cache.get(key) if lr_cache is not None else None
        if lr is None:
            lr = u8_to_chw(bicubic_resize(crop, p, p, antialias))
            if lr_cache is not None:
                lr_cache[key] = lr
        src = ids[j] if ids is not None else j
        pair = SamplePair(lr, u8_to_chw(crop), {"source": src, "offset": (y, x), "aug": 0})
        if augment_patches:
            pair = augment(pair, code=_draw(u[3], 8))
        out.append(pair)
    return out


# ---------------------------------------------------------------- datasets


def split_ids(ids, val_fraction: float, seed: int):
    """Hash split into (train, val); both non-empty when there are >= 2 ids."""
    def frac(i):
        digest = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2.0 ** 64

    scored = sorted((frac(i), i) for i in ids)
    val = [i for f, i in scored if f < val_fraction]
    train = [i for f, i in scored if f >= val_fraction]
    if len(ids) >= 2 and not val:
        val = [scored[0][1]]
        train = [i for _, i in scored[1:]]
    elif len(ids) >= 2 and not train:
        train = [scored[-1][1]]
        val = [i for _, i in scored[:-1]]
    order = {i: n for n, i in enumerate(ids)}
    return sorted(train, key=order.get), sorted(val, key=order.get)


def read_manifest(path) -> list[Path]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def synthetic_images(n: int, size: int, seed: int) -> dict[str, np.ndarray]:
    return {f"synth{i:04d}": synth_texture(Rng(derive_seed(seed, i)), size, size) for i in range(n)}


def load_images(paths) -> dict[str, np.ndarray]:
    out = {}
    for p in paths:
        if not Path(p).is_file():
            raise DataError(f"image not found: {p}")
        out[str(p)] = load_ppm(p)
    return out


def make_eval_pair(hr: np.ndarray, scale: int, antialias: bool = True):
    """Crop HR to a multiple of ``scale`` and synthesize its LR partner (both uint8)."""
    h = hr.shape[0] - hr.shape[0] % scale
    w = hr.shape[1] - hr.shape[1] % scale
    hr = hr[:h, :w]
    return bicubic_resize(hr, h // scale, w // scale, antialias), hr


class PatchSampler:
    """Deterministic training batches: batch ``k`` depends only on (seed, k)."""

    def __init__(self, images: dict[str, np.ndarray], scale: int, patch: int, batch: int,
                 seed: int, augment_patches: bool = True, antialias: bool = True):
        if not images:
            raise DataError("training set is empty")
        self.ids = list(images)
        self.images = [images[i] for i in self.ids]
        self.scale, self.patch, self.batch_size = scale, patch, batch
        self.seed = seed
        self.augment_patches, self.antialias = augment_patches, antialias
        self._lr_cache: dict = {}
        sp = scale * patch
        for i, img in zip(self.ids, self.images):
            if img.shape[0] < sp or img.shape[1] < sp:
                raise ImageTooSmall(f"{i}: {img.shape[:2]} smaller than HR patch {sp}x{sp}")

    def pairs(self, k: int) -> list[SamplePair]:
        return sample_patches(self.images, self.scale, self.patch, self.batch_size,
                              Rng(derive_seed(self.seed, k)), self.augment_patches,
                              self.antialias, self.ids, self._lr_cache)

    def batch(self, k: int):
        pairs = self.pairs(k)
        return np.stack([p.lr for p in pairs]), np.stack([p.hr for p in pairs])
