#!/usr/bin/env python3
"""Overfit the toy generator on a handful of synthetic pairs, in one or both modes.

    python scripts/overfit.py --mode both --pairs 4 --max-steps 2000
"""
import argparse

from vitgan.experiments import OVERFIT_MAX_STEPS, OVERFIT_THRESHOLD, overfit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=["cgan_l1", "l1_only", "both"], default="both")
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--max-steps", type=int, default=OVERFIT_MAX_STEPS)
    p.add_argument("--threshold", type=float, default=OVERFIT_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write the per-step L1 of each mode to this CSV")
    args = p.parse_args()

    modes = ["cgan_l1", "l1_only"] if args.mode == "both" else [args.mode]
    results = []
    for mode in modes:
        r = overfit(mode, seed=args.seed, pairs=args.pairs, max_steps=args.max_steps,
                    threshold=args.threshold)
        results.append(r)
        status = "reached" if r.reached else "NOT reached"
        print(f"{mode:8s} L1 {r.final_l1:.4f} at step {r.steps} ({status} < {args.threshold}), "
              f"{r.seconds:.0f}s", flush=True)
    if args.trace:
        with open(args.trace, "w") as f:
            f.write("mode,step,g_l1\n")
            for r in results:
                for i, v in enumerate(r.trace, 1):
                    f.write(f"{r.mode},{i},{v!r}\n")
    raise SystemExit(0 if all(r.reached for r in results) else 1)


if __name__ == "__main__":
    main()
