"""Directional ablation: SAC-ISK vs SAC-S vs no-SAC, and multi-head vs single-head loss.

    python3 scripts/run_ablation.py --out runs/ablation
    python3 scripts/run_ablation.py --seeds 0 1 --epochs 5 --out runs/quick

Finished runs with a matching config are reused, so an interrupted sweep
picks up where it stopped.
"""

import argparse
import json
import logging

from threadpoolctl import threadpool_limits

from sacseg.ablation import ARMS, AblationConfig, ordering_holds, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--scale", type=float, default=1 / 16)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--arms", nargs="+", choices=sorted(ARMS), default=list(ARMS))
    ap.add_argument("--no-resume", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = AblationConfig(seeds=tuple(args.seeds), epochs=args.epochs, scale=args.scale,
                         dtype=args.dtype, arms=tuple(args.arms))
    with threadpool_limits(limits=1):
        report = run_ablation(cfg, args.out, resume=not args.no_resume)
    for arm, values in report["miou"].items():
        print(f"{arm:<22} median {report['median'][arm]:.4f}  " +
              " ".join(f"{v:.4f}" for v in values))
    if set(args.arms) == set(ARMS):
        print(json.dumps(ordering_holds(report)))
    print(f"total {report['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
