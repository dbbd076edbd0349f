"""Parameter and MAC overhead of each SAC variant on a preset network.

    python3 scripts/cost_table.py --preset ssgv3-21 --hw 64 2048
"""

import argparse

from sacseg.cost import format_table, write_outputs
from sacseg.network import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=sorted(PRESETS), default="ssgv3-21")
    ap.add_argument("--hw", type=int, nargs=2, default=(64, 2048))
    ap.add_argument("--out", default="runs/cost")
    args = ap.parse_args()
    print(format_table(write_outputs(PRESETS[args.preset](input_hw=tuple(args.hw)), args.out)))


if __name__ == "__main__":
    main()
