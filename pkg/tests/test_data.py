import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from issp.data import (PatchSampler, SamplePair, augment, bicubic_resize, bicubic_resize_float, cubic,
                       decode_ppm, load_ppm, make_eval_pair, sample_patches, save_ppm, split_ids,
                       synth_texture, synthetic_images, u8_to_chw)
from issp.errors import BadMagic, BadMaxval, ImageTooSmall, NonSquare, TooSmall, Truncated
from issp.tensor import Rng


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    save_ppm(img, tmp_path / "a.ppm")
    back = load_ppm(tmp_path / "a.ppm")
    assert back.dtype == np.uint8 and np.array_equal(back, img)


def test_ppm_header_comments():
    raster = bytes(range(12))
    img = decode_ppm(b"P6 # made by hand\n2 2\n# max\n255\n" + raster)
    assert img.shape == (2, 2, 3) and img[1, 1, 2] == 11


def test_ppm_errors():
    with pytest.raises(BadMagic):
        decode_ppm(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(BadMaxval):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(Truncated):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(11))
    with pytest.raises(Truncated):
        decode_ppm(b"P6\n2 2")


def test_synth_texture():
    a = synth_texture(Rng(7), 32, 40)
    assert a.shape == (32, 40, 3) and a.dtype == np.uint8
    assert np.array_equal(a, synth_texture(Rng(7), 32, 40))
    assert np.unique(a).size >= 64
    assert not np.array_equal(a, synth_texture(Rng(8), 32, 40))
    with pytest.raises(TooSmall):
        synth_texture(Rng(0), 15, 32)
    imgs = synthetic_images(3, 24, seed=1)
    assert list(imgs) == ["synth0000", "synth0001", "synth0002"]


def test_cubic_kernel_values():
    x = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    # Keys kernel, a = -0.5
    assert np.allclose(cubic(x), [1.0, 0.5625, 0.0, -0.0625, 0.0, 0.0])
    t = np.linspace(-1, 1, 9)[:, None] + np.arange(-2, 3)[None, :]
    assert np.allclose(cubic(t).sum(axis=1), 1.0)  # partition of unity


def brute_resize(img, oh, ow, antialias=True):
    """Each output pixel as an explicit sum over a 2-D tap window."""
    h, w, c = img.shape
    out = np.zeros((oh, ow, c))

    def taps(o, n_in, n_out):
        s = n_out / n_in
        ks = s if (antialias and s < 1) else 1.0
        u = (o + 0.5) / s - 0.5
        lo = math.floor(u - 2.0 / ks)
        idx = list(range(lo, lo + math.ceil(4.0 / ks) + 2))
        wts = [ks * float(cubic(np.array(ks * (u - i)))) for i in idx]
        tot = sum(wts)
        return [min(max(i, 0), n_in - 1) for i in idx], [v / tot for v in wts]

    for oy in range(oh):
        iy, wy = taps(oy, h, oh)
        for ox in range(ow):
            ix, wx = taps(ox, w, ow)
            acc = np.zeros(c)
            for a, va in zip(iy, wy):
                for b, vb in zip(ix, wx):
                    acc += va * vb * img[a, b]
            out[oy, ox] = acc
    return np.floor(np.clip(out, 0, 255) + 0.5).astype(np.uint8)


@pytest.mark.parametrize("shape,out", [((12, 10), (6, 5)), ((9, 9), (3, 3)), ((5, 6), (10, 12))])
def test_bicubic_matches_2d_oracle(shape, out):
    img = np.random.default_rng(3).integers(0, 256, shape + (3,)).astype(np.uint8)
    got = bicubic_resize(img, *out).astype(int)
    want = brute_resize(img, *out).astype(int)
    assert np.max(np.abs(got - want)) <= 1


def test_bicubic_constant_identity_and_linear():
    c = np.full((10, 14, 3), 77, np.uint8)
    assert np.array_equal(bicubic_resize(c, 5, 7), np.full((5, 7, 3), 77, np.uint8))
    img = np.random.default_rng(4).integers(0, 256, (8, 6, 3)).astype(np.uint8)
    assert np.array_equal(bicubic_resize(img, 8, 6), img)
    # the kernel reproduces linear ramps away from the borders
    ramp = np.tile(np.arange(32, dtype=float)[None, :, None], (4, 1, 1))
    up = bicubic_resize_float(ramp, 4, 64, antialias=False)[0, 8:-8, 0]
    u = (np.arange(64)[8:-8] + 0.5) / 2 - 0.5
    assert np.allclose(up, u, atol=1e-12)


@given(st.integers(0, 2**32), st.integers(8, 20), st.integers(8, 20))
def test_bicubic_separable(seed, h, w):
    img = np.random.default_rng(seed).random((h, w, 2)) * 255
    both = bicubic_resize_float(img, h // 2, w // 2)
    rows_first = bicubic_resize_float(bicubic_resize_float(img, h // 2, w), h // 2, w // 2)
    cols_first = bicubic_resize_float(bicubic_resize_float(img, h, w // 2), h // 2, w // 2)
    assert np.allclose(both, rows_first, rtol=0, atol=1e-9)
    assert np.allclose(both, cols_first, rtol=0, atol=1e-9)


def test_augment_codes_corners():
    lr = np.arange(3 * 4 * 4, dtype=np.float32).reshape(3, 4, 4)
    hr = np.arange(3 * 8 * 8, dtype=np.float32).reshape(3, 8, 8)
    pair = SamplePair(lr, hr)
    seen = set()
    for code in range(8):
        out = augment(pair, code=code)
        # the same geometric map moves the LR and HR top-left corners together
        src_lr = np.argwhere(lr[0] == out.lr[0, 0, 0])[0]
        src_hr = np.argwhere(hr[0] == out.hr[0, 0, 0])[0]
        assert tuple(src_lr // 3) == tuple(src_hr // 7)
        assert out.provenance["aug"] == code
        seen.add(out.lr.tobytes())
    assert len(seen) == 8
    twice = augment(augment(pair, code=2), code=2)
    assert np.array_equal(twice.lr, lr) and np.array_equal(twice.hr, hr)
    for code in range(4, 8):
        assert np.array_equal(augment(augment(pair, code=code), code=code).lr, lr)
    with pytest.raises(NonSquare):
        augment(SamplePair(np.zeros((3, 4, 5)), np.zeros((3, 8, 10))), code=0)


def test_sample_patches():
    imgs = [synth_texture(Rng(i), 32, 40) for i in range(3)]
    assert sample_patches(imgs, 2, 8, 0, Rng(1)) == []
    a = sample_patches(imgs, 2, 8, 5, Rng(1), augment_patches=True)
    b = sample_patches(imgs, 2, 8, 5, Rng(1), augment_patches=True)
    for pa, pb in zip(a, b):
        assert pa.lr.shape == (3, 8, 8) and pa.hr.shape == (3, 16, 16)
        assert np.array_equal(pa.lr, pb.lr) and pa.provenance == pb.provenance
        y, x = pa.provenance["offset"]
        assert y % 2 == 0 and x % 2 == 0
    plain = sample_patches(imgs, 2, 8, 5, Rng(1))
    for p in plain:
        y, x = p.provenance["offset"]
        crop = imgs[p.provenance["source"]][y:y + 16, x:x + 16]
        assert np.array_equal(p.hr, u8_to_chw(crop))
        assert np.array_equal(p.lr, u8_to_chw(bicubic_resize(crop, 8, 8)))
    with pytest.raises(ImageTooSmall):
        sample_patches([np.zeros((10, 40, 3), np.uint8)], 2, 8, 1, Rng(0))


def test_sampler_cache_is_transparent():
    images = synthetic_images(4, 24, seed=2)
    cached = PatchSampler(images, 2, 4, 8, seed=9)
    for k in (1, 2, 1, 3):
        lr, hr = cached.batch(k)
        fresh = PatchSampler(images, 2, 4, 8, seed=9).batch(k)
        assert np.array_equal(lr, fresh[0]) and np.array_equal(hr, fresh[1])
    assert cached._lr_cache
    assert not np.array_equal(cached.batch(1)[1], cached.batch(2)[1])


def test_make_eval_pair_crops_to_scale():
    hr = synth_texture(Rng(0), 33, 35)
    lr, hr2 = make_eval_pair(hr, 2)
    assert hr2.shape == (32, 34, 3) and lr.shape == (16, 17, 3)


@given(st.lists(st.integers(0, 10_000), min_size=2, max_size=40, unique=True), st.integers(0, 99))
def test_split_ids(ids, seed):
    train, val = split_ids(ids, 0.25, seed)
    assert train and val
    assert set(train).isdisjoint(val) and set(train) | set(val) == set(ids)
    assert (train, val) == split_ids(ids, 0.25, seed)
    # membership of an id does not depend on which other ids are present
    t2, v2 = split_ids(ids + [10_001, 10_002, 10_003], 0.25, seed)
    if len(val) > 1 and len(train) > 1:
        assert set(val) <= set(v2)
