import numpy as np
import pytest

from conftest import tiny_config
from issp.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from issp.errors import CheckpointError
from issp.experiments import load_dataset, make_sampler
from issp.pruning import init_state, run_training, train_step


def _trained(method="issp", **kw):
    cfg = tiny_config(method, k_p=6, k_ft=4, **kw)
    train, _ = load_dataset(cfg)
    return run_training(cfg, make_sampler(cfg, train)), cfg


def _same_state(a, b):
    for name in a.model.prunable_names:
        pa, pb = a.model.params[name], b.model.params[name]
        for attr in ("w", "b", "mw", "vw", "mb", "vb"):
            assert np.array_equal(getattr(pa, attr), getattr(pb, attr)), (name, attr)
    assert (a.k, a.adam.t, a.adam.lr, a.eta) == (b.k, b.adam.t, b.adam.lr, b.eta)
    assert (a.rng.state, a.rng.counter) == (b.rng.state, b.rng.counter)


@pytest.mark.parametrize("method", ["issp", "scratch", "issr"])
def test_round_trip_bit_exact(tmp_path, method):
    state, cfg = _trained(method)
    save_checkpoint(tmp_path / "c.ckpt", state, cfg)
    back, cfg2 = load_checkpoint(tmp_path / "c.ckpt")
    _same_state(state, back)
    assert cfg2.to_dict() == cfg.to_dict()
    assert back.masks.frozen
    for name, lm in state.masks.layers.items():
        assert np.array_equal(back.masks.layers[name].pruned, lm.pruned)
    data = (tmp_path / "c.ckpt").read_bytes()
    assert encode_checkpoint(back, cfg2) == data


def test_unfrozen_and_maskless_states_round_trip():
    cfg = tiny_config("issp", k_p=6, k_ft=4)
    state = init_state(cfg)
    assert state.masks is None
    _same_state(state, decode_checkpoint(encode_checkpoint(state, cfg))[0])
    train, _ = load_dataset(cfg)
    mid = init_state(cfg)
    sampler = make_sampler(cfg, train)
    keep = {}
    for k in range(1, 4):
        train_step(mid, cfg, *sampler.batch(k), keep)
    back = decode_checkpoint(encode_checkpoint(mid, cfg))[0]
    assert not back.masks.frozen and back.masks.fill == pytest.approx(cfg.prune.alpha)


def test_resume_matches_uninterrupted_run():
    cfg = tiny_config("issp", k_p=6, k_ft=4)
    train, _ = load_dataset(cfg)
    full = run_training(cfg, make_sampler(cfg, train))
    part = init_state(cfg)
    sampler = make_sampler(cfg, train)
    keep = {}
    for k in range(1, 5):
        train_step(part, cfg, *sampler.batch(k), keep)
    resumed, _ = decode_checkpoint(encode_checkpoint(part, cfg))
    resumed = run_training(cfg, make_sampler(cfg, train), state=resumed)
    _same_state(full, resumed)


def test_corruption_is_detected(tmp_path):
    state, cfg = _trained()
    data = encode_checkpoint(state, cfg)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-5])
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXv1" + data[6:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0")
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:6] + b"\xff\xff\x00\x00" + data[10:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
