"""Overfit two synthetic 16^3 cases with and without a feature extractor.

Trains the Base configuration and the no-feature-extractor variant for the
same number of steps, then scores the final weights on the training cases.

Usage: python3 scripts/run_overfit.py [--config configs/overfit.yaml] [--out overfit.json]
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

from brainfuse.config import ExperimentConfig, load_config
from brainfuse.data import synth_cases
from brainfuse.metrics import aggregate
from brainfuse.train import train_fold

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "overfit.yaml"


def overfit(cfg: ExperimentConfig, extractor: str, on_epoch=None) -> dict:
    s = cfg.synthetic
    cases = synth_cases(s.n_cases, s.seed, s)
    switches = dataclasses.replace(cfg.switches, feature_extractor=extractor)
    t0 = time.time()
    res = train_fold(cases, cases, switches, cfg.train, cfg.network, cfg.semantic,
                     cfg.preprocess, cfg.augment, on_epoch=on_epoch)
    agg = aggregate(res.val_reports)
    return {
        "extractor": extractor, "steps": res.steps, "seconds": round(time.time() - t0, 1),
        "final_loss": res.final_loss,
        "dice": {r: agg.means[f"{r}_dice"] for r in ("wt", "tc", "et")},
        "degenerate": res.degenerate,
    }


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--seed", type=int)
    p.add_argument("--extractors", default="base,none")
    p.add_argument("--out", default="overfit.json")
    args = p.parse_args()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set_seed(args.seed)

    def progress(epoch, loss):
        if epoch % 25 == 0:
            print(f"  epoch {epoch} loss {loss:.4f}", flush=True)

    results = []
    for ext in args.extractors.split(","):
        r = overfit(cfg, ext, progress)
        print(json.dumps(r), flush=True)
        results.append(r)
    Path(args.out).write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
