"""Magnitude-ranked sparsity schedules and the sparse training loop.

Methods
-------
scratch     random mask fixed at k=0, trained for the full K iterations
l1_oneshot  magnitude mask on the initial weights, fixed at k=0
iht         unimportant weights zeroed before every forward in the pruning stage
issr        unimportant weights pulled by a growing L2 term in the update
issp        unimportant weights multiplied by ``alpha`` before every forward

Dynamic methods (iht, issr, issp) freeze a binary mask after ``k_p`` iterations
and fine-tune for ``k_ft`` more. Selection is rank based: exactly
``floor(r * n)`` weights per layer are unimportant at every iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AlreadyFrozen, ConfigError, EmptyLayer
from .metrics import flip_permille, grad_stats
from .nn import AdamState, Model, adam_step, init_params, lr_schedule
from .tensor import Rng, derive_seed

METHODS = ("scratch", "l1_oneshot", "iht", "issr", "issp")
BASELINES = ("scratch", "l1_oneshot")

# stream tags for derive_seed
TAG_INIT, TAG_MASK, TAG_DATA = 1, 2, 3


@dataclass
class PruneConfig:
    method: str = "issp"
    r: float = 0.95
    alpha: float = 0.95
    eta0: float = 1e-4
    delta: float = 0.1
    k_eta: int = 100
    eta_growth: str = "mul"  # "mul": eta*(1+delta); "add": eta+delta
    k_p: int = 2000
    k_ft: int = 4000
    seed: int | None = None  # scratch-mask stream; derived from the run seed when None

    @property
    def total_iters(self) -> int:
        return self.k_p + self.k_ft

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"pruning ratio r={self.r} outside [0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} outside (0, 1)")
        if self.eta0 < 0 or self.delta < 0:
            raise ConfigError("eta0 and delta must be non-negative")
        if self.k_eta < 1:
            raise ConfigError("k_eta must be >= 1")
        if self.k_p < 0 or self.k_ft < 0:
            raise ConfigError("k_p and k_ft must be non-negative")
        if self.eta_growth not in ("mul", "add"):
            raise ConfigError(f"unknown eta_growth {self.eta_growth!r}")


def pruned_count(n: int, r: float) -> int:
    """``floor(r * n)``, robust to binary representation (0.29 * 100 -> 29)."""
    return min(n, int(math.floor(r * n + 1e-9)))


@dataclass
class LayerMask:
    n: int
    pruned: np.ndarray  # sorted flat indices of unimportant weights
    tau: float  # smallest kept magnitude (inf when everything is pruned)

    @property
    def pruned_count(self) -> int:
        return int(self.pruned.size)

    def keep(self) -> np.ndarray:
        k = np.ones(self.n, dtype=bool)
        k[self.pruned] = False
        return k

    def values(self, fill: float, dtype=np.float32) -> np.ndarray:
        m = np.ones(self.n, dtype=dtype)
        m[self.pruned] = fill
        return m


@dataclass
class MaskState:
    layers: dict[str, LayerMask] = field(default_factory=dict)
    frozen: bool = False
    fill: float = 0.0  # mask value on unimportant weights (alpha for issp, 0 once frozen)

    def apply(self, model: Model) -> None:
        """Zero every masked position (frozen masks only)."""
        for name, lm in self.layers.items():
            model.params[name].w.reshape(-1)[lm.pruned] = 0


# ---------------------------------------------------------------- per-layer steps


def rank_select(w: np.ndarray, r: float):
    """Indices of the ``floor(r*n)`` smallest ``|w|`` (ties by index) and the
    smallest kept magnitude."""
    a = np.abs(np.asarray(w).reshape(-1))
    n = a.size
    if n == 0:
        raise EmptyLayer("cannot rank an empty layer")
    k = pruned_count(n, r)
    order = np.argsort(a, kind="stable")
    pruned = np.sort(order[:k])
    tau = float(a[order[k]]) if k < n else math.inf
    return pruned, tau


def iht_step(w: np.ndarray, r: float):
    pruned, tau = rank_select(w, r)
    w.reshape(-1)[pruned] = 0
    return pruned, tau


def issp_step(w: np.ndarray, r: float, alpha: float):
    pruned, tau = rank_select(w, r)
    w.reshape(-1)[pruned] *= alpha
    return pruned, tau


def issr_penalty(w: np.ndarray, pruned: np.ndarray, eta: float) -> np.ndarray:
    """The ``2*eta*theta`` pull on unimportant weights, zero elsewhere.

    It is subtracted from the weights directly (not scaled by the learning
    rate): ``theta <- theta - lr*grad - 2*eta*theta``.
    """
    pen = np.zeros_like(w)
    flat = pen.reshape(-1)
    flat[pruned] = (2.0 * eta) * w.reshape(-1)[pruned]
    return pen


def eta_growth(eta: float, delta: float, k: int, k_eta: int, mode: str = "mul") -> float:
    if k > 0 and k % k_eta == 0:
        return eta * (1.0 + delta) if mode == "mul" else eta + delta
    return eta


def freeze_masks(model: Model, masks: MaskState | None, r: float) -> MaskState:
    """Final rank selection on the current weights; pruned weights are zeroed."""
    if masks is not None and masks.frozen:
        raise AlreadyFrozen("masks are already frozen")
    out = MaskState(frozen=True, fill=0.0)
    for name in model.prunable_names:
        w = model.params[name].w
        pruned, tau = rank_select(w, r)
        out.layers[name] = LayerMask(w.size, pruned, tau)
    out.apply(model)
    return out


def baseline_mask(method: str, model: Model, r: float, rng: Rng) -> MaskState:
    if method == "l1_oneshot":
        return freeze_masks(model, None, r)
    if method != "scratch":
        raise ConfigError(f"{method!r} is not a baseline method")
    out = MaskState(frozen=True, fill=0.0)
    for name in model.prunable_names:
        w = model.params[name].w
        n = w.size
        order = np.argsort(rng.random(n), kind="stable")
        pruned = np.sort(order[:pruned_count(n, r)])
        kept = np.abs(np.delete(w.reshape(-1), pruned))
        tau = float(kept.min()) if kept.size else math.inf
        out.layers[name] = LayerMask(n, pruned, tau)
    out.apply(model)
    return out


# ---------------------------------------------------------------- training loop


@dataclass
class TrainState:
    k: int
    model: Model
    masks: MaskState | None
    adam: AdamState
    rng: Rng
    eta: float = 0.0


def _masks_for_stage(layers: dict[str, LayerMask], method: str, alpha: float) -> MaskState:
    fill = {"iht": 0.0, "issp": alpha, "issr": 1.0}[method]
    return MaskState(layers=layers, frozen=False, fill=fill)


def init_state(cfg) -> TrainState:
    """Seeded model, optimizer and masks at k=0 for a :class:`RunConfig`."""
    cfg.validate()
    pc = cfg.prune
    model = Model(cfg.model)
    init_params(model, Rng(derive_seed(cfg.seed, TAG_INIT)))
    adam = AdamState(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, 0, cfg.schedule.lr0)
    masks = None
    if pc.method in BASELINES:
        mask_seed = pc.seed if pc.seed is not None else derive_seed(cfg.seed, TAG_MASK)
        masks = baseline_mask(pc.method, model, pc.r, Rng(mask_seed))
    elif pc.k_p == 0:
        masks = freeze_masks(model, None, pc.r)
    return TrainState(0, model, masks, adam, Rng(cfg.seed), pc.eta0)


def train_step(state: TrainState, cfg, lr_batch, hr_batch, prev_keep: dict) -> list[dict]:
    """One iteration of the schedule; returns the per-layer metric rows."""
    pc = cfg.prune
    model = state.model
    state.k += 1
    k = state.k
    state.adam.lr = lr_schedule(k - 1, cfg.schedule.lr0, cfg.schedule.half_every)
    names = model.prunable_names
    pruning = state.masks is None or not state.masks.frozen
    flips = dict.fromkeys(names, 0.0)
    selected = {}
    if pruning:
        for name in names:
            w = model.params[name].w
            if pc.method == "iht":
                pruned, tau = iht_step(w, pc.r)
            elif pc.method == "issp":
                pruned, tau = issp_step(w, pc.r, pc.alpha)
            else:
                pruned, tau = rank_select(w, pc.r)
            lm = LayerMask(w.size, pruned, tau)
            keep = lm.keep()
            if name in prev_keep:
                flips[name] = flip_permille(prev_keep[name], keep)
            prev_keep[name] = keep
            selected[name] = lm
        state.masks = _masks_for_stage(selected, pc.method, pc.alpha)
    else:
        state.masks.apply(model)

    zero_frac = {n: np.count_nonzero(model.params[n].w == 0) / model.params[n].w.size for n in names}
    loss = model.forward_backward(lr_batch, hr_batch)
    stats = {n: grad_stats(model.params[n].gw) for n in names}

    if pruning and pc.method == "issr":
        for name in names:
            p = model.params[name]
            # raw-gradient form of theta -= 2*eta*theta under a plain lr step
            p.gw += issr_penalty(p.w, selected[name].pruned, state.eta) / state.adam.lr
    adam_step(model.param_list(), state.adam)
    if not pruning:
        state.masks.apply(model)
    if pruning and pc.method == "issr":
        state.eta = eta_growth(state.eta, pc.delta, k, pc.k_eta, pc.eta_growth)
    if pruning and k == pc.k_p:
        state.masks = freeze_masks(model, None, pc.r)

    return [
        {
            "k": k,
            "loss": loss,
            "lr": state.adam.lr,
            "layer": n,
            "flips_permille": flips[n],
            "grad_l2": stats[n][0],
            "grad_var": stats[n][1],
            "zero_fraction": zero_frac[n],
        }
        for n in names
    ]


def run_training(cfg, data, sink: Callable[[dict], None] | None = None, state: TrainState | None = None) -> TrainState:
    """Run a :class:`RunConfig` to ``K = k_p + k_ft`` iterations.

    ``data.batch(k)`` supplies the ``(lr, hr)`` arrays for iteration ``k``;
    every metric row is passed to ``sink``.
    """
    state = state or init_state(cfg)
    prev_keep: dict = {}
    for _ in range(state.k, cfg.prune.total_iters):
        lr_b, hr_b = data.batch(state.k + 1)
        rows = train_step(state, cfg, lr_b, hr_b, prev_keep)
        if sink is not None:
            for row in rows:
                sink(row)
    if state.masks is None or not state.masks.frozen:
        state.masks = freeze_masks(state.model, state.masks, cfg.prune.r)
    return state
