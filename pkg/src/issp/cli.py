"""Command line: train, eval, export-sparse, bench, gradcheck.

Exit codes: 0 ok, 1 check failed, 2 usage/config error, 3 data error,
4 corrupt checkpoint, 5 checkpoint not frozen.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import from_dict, load_config, preset
from .data import load_ppm, read_manifest
from .errors import (CheckpointError, ConfigError, CorrectnessFailure, DataError,
                     MaskWeightDisagreement, NotFrozen)
from .evaluate import eval_csv, eval_table, evaluate_pairs, hr_pairs
from .experiments import load_dataset, make_sampler
from .metrics import MetricLog
from .pruning import METHODS, run_training
from .sparse import SparseModel, bench_compare, bench_matmul, dense_to_csr, load_sparse, save_sparse
from .tensor import Rng, tune_malloc

EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_CKPT, EXIT_NOT_FROZEN = 1, 2, 3, 4, 5


def _err(msg: str) -> None:
    print(f"issp: error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- train


def resolve_config(args):
    """Flags beat ``ISSP_SEED``, which beats the config file, which beats defaults."""
    cfg = load_config(args.config) if args.config else preset(args.preset)
    env_seed = os.environ.get("ISSP_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"ISSP_SEED must be an integer, got {env_seed!r}") from exc
    overrides = {
        ("prune", "method"): args.method, ("prune", "r"): args.r, ("prune", "alpha"): args.alpha,
        ("prune", "k_p"): args.k_p, ("prune", "k_ft"): args.k_ft,
        ("data", "manifest"): args.manifest, ("data", "synthetic"): args.synthetic,
    }
    for (section, name), value in overrides.items():
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    if args.k_p is not None or args.k_ft is not None:
        cfg.schedule.total_iters = cfg.prune.k_p + cfg.prune.k_ft
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    # round-trip through the dict form so flag values get the same checks as files
    return from_dict(cfg.to_dict()).validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tune_malloc()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_dataset(cfg)
    sampler = make_sampler(cfg, train)
    atomic_write(out / "config.resolved", cfg.to_json().encode())
    with MetricLog(out / "metrics.csv") as log:
        state = run_training(cfg, sampler, log)
    save_checkpoint(out / "final.ckpt", state, cfg)
    last = state.k
    print(f"trained {cfg.prune.method} r={cfg.prune.r} for {last} iterations -> {out}")
    return 0


# ---------------------------------------------------------------- eval


def read_pairs_manifest(path):
    """Lines of ``lr.ppm hr.ppm``; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pairs manifest not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}: expected 'lr hr' per line, got {line!r}")
        lr, hr = (Path(p) if Path(p).is_absolute() else path.parent / p for p in parts)
        for p in (lr, hr):
            if not p.is_file():
                raise DataError(f"image not found: {p}")
        out.append((hr.stem, load_ppm(lr), load_ppm(hr)))
    return out


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    scale = cfg.model.scale
    if args.scale is not None and args.scale != scale:
        raise ConfigError(f"checkpoint is scale {scale}, --scale {args.scale} requested")
    border = cfg.eval_border if args.border is None else args.border
    if args.pairs:
        pairs = read_pairs_manifest(args.pairs)
    elif args.images:
        from .data import load_images
        pairs = list(hr_pairs(load_images(read_manifest(args.images)), scale, cfg.data.antialias))
    else:
        _, val = load_dataset(cfg)
        if not val:
            raise DataError("the checkpoint's dataset has no held-out split; pass --images or --pairs")
        pairs = list(hr_pairs(val, scale, cfg.data.antialias))
    rows = evaluate_pairs(state.model, pairs, border)
    print(eval_table(rows, border))
    if args.csv:
        atomic_write(args.csv, eval_csv(rows).encode())
    return 0


# ---------------------------------------------------------------- sparse


def cmd_export(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    if state.masks is None or not state.masks.frozen:
        raise NotFrozen(f"{args.checkpoint} holds no frozen mask (still in the pruning stage)")
    sm = SparseModel.from_model(state.model, state.masks)
    save_sparse(args.out, sm)
    print(f"exported {sm.nnz}/{sm.n_weights} nonzero weights -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(Rng(args.seed).next_u64(1)[0])
    if args.sparse:
        sm = load_sparse(args.sparse)
        cfg = sm.cfg
        size = cfg.patch if cfg.arch == "mini_mlp" else args.size
        x = rng.random((1, 3, size, size)).astype(np.float32)
        report = bench_compare(sm.dense_model(), sm, x, args.reps)
    else:
        n = args.matmul
        w = rng.standard_normal((n, n)).astype(np.float32)
        drop = rng.permutation(n * n)[: int(np.floor(args.r * n * n + 1e-9))]
        w.reshape(-1)[drop] = 0
        b = rng.standard_normal((n, n)).astype(np.float32)
        report = bench_matmul(dense_to_csr(w), b, args.reps)
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all()
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<18} rel_err={r.error:.3e} tol={r.tol:.0e}")
    worst = gradcheck.worst_failure(results)
    if worst is not None:
        _err(f"gradient check failed; worst layer: {worst.name} (rel_err={worst.error:.3e})")
        return EXIT_FAIL
    return 0


# ---------------------------------------------------------------- parser


def _reps(value: str) -> int:
    n = int(value)
    if n < 3:
        raise argparse.ArgumentTypeError("--reps must be >= 3")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="issp", description="Sparse super-resolution training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run; writes final.ckpt, metrics.csv, config.resolved")
    t.add_argument("--config", help="JSON run config (default: the chosen preset)")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--r", type=float, help="pruning ratio")
    t.add_argument("--alpha", type=float, help="shrink factor for issp")
    t.add_argument("--k-p", type=int, dest="k_p", help="pruning-stage iterations")
    t.add_argument("--k-ft", type=int, dest="k_ft", help="fine-tune iterations")
    t.add_argument("--seed", type=int)
    t.add_argument("--manifest", help="text file listing training PPM images")
    t.add_argument("--synthetic", type=int, help="number of synthetic images when no manifest is given")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM on the Y channel")
    e.add_argument("checkpoint")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--images", help="manifest of HR PPM images (LR is synthesized)")
    src.add_argument("--pairs", help="manifest of 'lr.ppm hr.ppm' lines")
    e.add_argument("--scale", type=int)
    e.add_argument("--border", type=int, help="pixels shaved per side (default: the scale)")
    e.add_argument("--csv", help="write per-image results here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-sparse", help="write the frozen model as CSR layers")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    b = sub.add_parser("bench", help="time sparse against dense inference")
    which = b.add_mutually_exclusive_group(required=True)
    which.add_argument("--sparse", help="sparse model file from export-sparse")
    which.add_argument("--matmul", type=int, help="benchmark a random N x N CSR matmul core instead")
    b.add_argument("--r", type=float, default=0.99, help="sparsity of the --matmul core")
    b.add_argument("--reps", type=_reps, default=9)
    b.add_argument("--size", type=int, default=32, help="LR input side for --sparse")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="64-bit finite-difference check of every layer")
    g.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except DataError as exc:
        _err(str(exc))
        return EXIT_DATA
    except (CheckpointError, MaskWeightDisagreement) as exc:
        _err(str(exc))
        return EXIT_CKPT
    except NotFrozen as exc:
        _err(str(exc))
        return EXIT_NOT_FROZEN
    except CorrectnessFailure as exc:
        _err(str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
