"""Run the four ablation tables on synthetic data and print them.

Usage: python3 scripts/run_ablation.py [--config configs/ablation_synthetic.yaml] [--out ablation]
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from brainfuse.ablation import TABLES
from brainfuse.cli import main as cli_main

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation_synthetic.yaml"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--matrix", default="tables")
    p.add_argument("--out", default="ablation")
    p.add_argument("--seed", type=int)
    args = p.parse_args()
    argv = ["ablate", "--config", args.config, "--matrix", args.matrix, "--out", args.out,
            "--log-level", "INFO"]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    code = cli_main(argv)
    if code:
        raise SystemExit(code)
    for name in TABLES:
        path = Path(args.out) / f"{name}.csv"
        if path.exists():
            print(f"\n== {name}")
            for row in csv.reader(path.open()):
                print("  ".join(f"{c:>22}" if i == 0 else f"{c:>12}" for i, c in enumerate(row)))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    main()
