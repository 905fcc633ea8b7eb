"""Seeded method sweep at desk scale.

    python scripts/run_sweep.py --out sweep.json
    python scripts/run_sweep.py --methods issp iht --ratios 0.95 --seeds 42 --k-ft 0

Writes every run (PSNR, SSIM, final loss, per-layer pruning-stage flips) to
JSON and prints a per-method summary table.
"""
import argparse
import time

import numpy as np

from issp.config import load_config, preset
from issp.experiments import load_dataset, run_experiment, save_results, variant
from issp.pruning import METHODS


def summarize(results):
    print(f"\n{'method':<11}{'r':>6}{'runs':>6}{'psnr':>9}{'+-':>7}{'ssim':>8}{'med flips':>11}")
    keys = sorted({(x.method, x.r) for x in results}, key=lambda k: (k[1], METHODS.index(k[0])))
    for method, r in keys:
        rs = [x for x in results if (x.method, x.r) == (method, r)]
        p = np.array([x.psnr for x in rs])
        flips = np.median([np.median(list(x.median_flips().values()) or [0]) for x in rs])
        print(f"{method:<11}{r:>6}{len(rs):>6}{p.mean():>9.3f}{p.std():>7.3f}"
              f"{np.mean([x.ssim for x in rs]):>8.4f}{flips:>11.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base JSON config (default: desk preset)")
    ap.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    ap.add_argument("--ratios", nargs="+", type=float, default=[0.95, 0.99])
    ap.add_argument("--seeds", nargs="+", type=int, default=[42, 43, 44])
    ap.add_argument("--k-ft", type=int, dest="k_ft", help="override fine-tune iterations (0: pruning stage only)")
    ap.add_argument("--out", default="sweep.json")
    args = ap.parse_args()

    base = load_config(args.config) if args.config else preset("desk")
    data = load_dataset(base)
    results = []
    t0 = time.perf_counter()
    for r in args.ratios:
        for seed in args.seeds:
            for method in args.methods:
                _, res = run_experiment(variant(base, method, r, seed, args.k_ft), data=data)
                results.append(res)
                save_results(args.out, results)
                print(f"{method:<11} r={r} seed={seed} psnr={res.psnr:.4f} ssim={res.ssim:.4f} "
                      f"loss={res.final_loss:.5f} ({res.seconds:.0f}s)", flush=True)
    summarize(results)
    print(f"\n{len(results)} runs in {(time.perf_counter() - t0) / 60:.1f} min -> {args.out}")


if __name__ == "__main__":
    main()
