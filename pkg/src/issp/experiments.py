"""Seeded method sweeps: train, collect mask flips, score held-out PSNR."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import RunConfig
from .data import PatchSampler, load_images, read_manifest, split_ids, synthetic_images
from .errors import DataError
from .evaluate import evaluate_pairs, hr_pairs, mean_row
from .pruning import TAG_DATA, TrainState, run_training
from .tensor import derive_seed, tune_malloc


def load_dataset(cfg: RunConfig) -> tuple[dict, dict]:
    """``(train, val)`` image dicts for a run config."""
    d = cfg.data
    if d.manifest is not None:
        images = load_images(read_manifest(d.manifest))
    else:
        images = synthetic_images(d.synthetic, d.synth_size, d.data_seed)
    if not images:
        raise DataError("dataset is empty")
    if d.val_fraction == 0:
        return images, {}
    train_ids, val_ids = split_ids(list(images), d.val_fraction, d.data_seed)
    return {i: images[i] for i in train_ids}, {i: images[i] for i in val_ids}


def make_sampler(cfg: RunConfig, train: dict) -> PatchSampler:
    d = cfg.data
    return PatchSampler(train, cfg.model.scale, d.patch, d.batch, derive_seed(cfg.seed, TAG_DATA),
                        d.augment, d.antialias)


class FlipRecorder:
    """Metric sink keeping the pruning-stage flips per layer; forwards rows on."""

    def __init__(self, k_p: int, forward=None):
        self.k_p = k_p
        self.forward = forward
        self.flips: dict[str, list[float]] = {}
        self.last_loss = float("nan")
        self.t0 = time.perf_counter()
        self.prune_seconds = 0.0

    def __call__(self, row: dict) -> None:
        if row["k"] <= self.k_p:
            self.flips.setdefault(row["layer"], []).append(row["flips_permille"])
            self.prune_seconds = time.perf_counter() - self.t0
        self.last_loss = row["loss"]
        if self.forward is not None:
            self.forward(row)


@dataclass
class RunResult:
    method: str
    r: float
    seed: int
    psnr: float
    ssim: float
    final_loss: float
    seconds: float
    flips: dict = field(default_factory=dict)  # layer -> pruning-stage flips_permille per iteration
    prune_seconds: float = 0.0

    def median_flips(self) -> dict[str, float]:
        return {k: float(np.median(v)) if v else 0.0 for k, v in self.flips.items()}

    def zero_flip_fraction(self) -> dict[str, float]:
        return {k: float(np.mean(np.asarray(v) == 0)) if v else 1.0 for k, v in self.flips.items()}


def run_experiment(cfg: RunConfig, sink=None, data=None) -> tuple[TrainState, RunResult]:
    """Train one config end to end and score it on the held-out split."""
    tune_malloc()
    cfg.validate()
    train, val = data if data is not None else load_dataset(cfg)
    rec = FlipRecorder(cfg.prune.k_p, sink)
    state = run_training(cfg, make_sampler(cfg, train), rec)
    seconds = time.perf_counter() - rec.t0
    p = s = float("nan")
    if val:
        mean = mean_row(evaluate_pairs(state.model, hr_pairs(val, cfg.model.scale, cfg.data.antialias),
                                       cfg.eval_border))
        p, s = mean.psnr, mean.ssim
    res = RunResult(cfg.prune.method, cfg.prune.r, cfg.seed, p, s, rec.last_loss, seconds, rec.flips,
                    rec.prune_seconds)
    return state, res


def variant(base: RunConfig, method: str, r: float, seed: int, k_ft: int | None = None) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.prune.method, cfg.prune.r, cfg.seed = method, r, seed
    if k_ft is not None:
        cfg.prune.k_ft = k_ft
    cfg.schedule.total_iters = cfg.prune.k_p + cfg.prune.k_ft
    return cfg.validate()


def sweep(base: RunConfig, plan, progress=None) -> list[RunResult]:
    """Run every ``(method, r, seed)`` in ``plan`` on the same dataset split."""
    data = load_dataset(base)
    out = []
    for method, r, seed in plan:
        _, res = run_experiment(variant(base, method, r, seed), data=data)
        out.append(res)
        if progress is not None:
            progress(res)
    return out


def mean_psnr(results, method: str, r: float) -> float:
    vals = [x.psnr for x in results if x.method == method and x.r == r]
    return float(np.mean(vals)) if vals else float("nan")


def save_results(path, results: list[RunResult]) -> None:
    from .checkpoint import atomic_write
    atomic_write(path, json.dumps([asdict(r) for r in results], indent=1).encode())


def load_results(path) -> list[RunResult]:
    with open(path, encoding="utf-8") as fh:
        return [RunResult(**d) for d in json.load(fh)]
