"""Command-line entry point.

Exit codes: 0 success, 2 configuration error (bad flag, bad config file),
3 data error (missing or corrupt inputs). Failures print one JSON object
on a single stderr line: ``{"error": <kind>, "exit_code": n, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .ablation import TABLES, run_ablation
from .checkpoint import load_checkpoint
from .config import ABLATION_TABLE_NAMES, ExperimentConfig, from_dict, load_config, load_switches
from .data import load_array, load_dataset, load_manifest, save_array, save_dataset, synth_cases, synth_generate
from .errors import ConfigError, DataError
from .metrics import aggregate, evaluate_case, threshold_regions, write_reports_csv, write_reports_json
from .model import AblationSwitches, FusionSegmenter
from .preprocess import preprocess_case
from .segnet import NetworkConfig, describe
from .semantic import SemanticConfig
from .train import cross_validate, predict, prepare_case, train_fold
from .volume import Case, derive_regions, regions_to_labels

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
log = logging.getLogger("brainfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


def _cases(args, cfg: ExperimentConfig) -> list[Case]:
    """Cases from ``--manifest``, or the configured synthetic cohort when absent."""
    if getattr(args, "manifest", None):
        return load_dataset(load_manifest(args.manifest))
    s = cfg.synthetic
    return synth_cases(s.n_cases, s.seed, s)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _load(args)
    n = args.n if args.n is not None else cfg.synthetic.n_cases
    manifest = synth_generate(n, cfg.synthetic.seed, args.out, cfg.synthetic)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "n_cases": len(manifest.entries)}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load(args)
    cases = [preprocess_case(c, cfg.preprocess) for c in _cases(args, cfg)]
    save_dataset(cases, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "n_cases": len(cases)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    # --switches overrides the config file's switches section
    switches = load_switches(args.switches) if args.switches else cfg.switches
    cases = _cases(args, cfg)
    out = Path(args.out)
    kw = dict(net_cfg=cfg.network, sem_cfg=cfg.semantic, pre_cfg=cfg.preprocess, aug_cfg=cfg.augment)
    if args.single_fold:
        res = train_fold(cases, cases, switches, cfg.train, out_dir=out, **kw)
        reports, summary = res.val_reports, aggregate(res.val_reports)
    else:
        cv = cross_validate(cases, switches, cfg.train, folds_to_run=args.folds_to_run, out_dir=out, **kw)
        _write_json(out / "folds.json", cv.assignment)
        reports, summary = cv.reports, cv.pooled
    write_reports_csv(reports, out / "metrics.csv")
    write_reports_json(reports, out / "metrics.json", summary)
    _write_json(out / "config.json", {"config": cfg.to_dict(), "switches": switches.to_dict()})
    print(json.dumps({"out": str(out), "n_validated": summary.n_cases, "means": summary.means}))
    return EXIT_OK


def model_from_checkpoint(path: str | Path) -> tuple[FusionSegmenter, dict]:
    tensors, meta = load_checkpoint(path)
    try:
        net_cfg = from_dict(NetworkConfig, meta.get("network", {}), "checkpoint.network")
        sem_cfg = from_dict(SemanticConfig, meta.get("semantic", {}), "checkpoint.semantic")
        switches = from_dict(AblationSwitches, meta.get("switches", {}), "checkpoint.switches")
    except ConfigError as exc:
        raise DataError(f"{path}: checkpoint config unreadable ({exc})") from exc
    model = FusionSegmenter(net_cfg, sem_cfg, switches)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise DataError(f"{path}: checkpoint tensors do not fit the model "
                        f"(missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
    return model, meta


def cmd_predict(args) -> int:
    cfg = _load(args)
    model, meta = model_from_checkpoint(args.checkpoint)
    weight = float(meta.get("semantic_weight", 1.0))
    out = Path(args.out)
    cases = _cases(args, cfg)
    for case in cases:
        probs = predict(model, prepare_case(case, model.switches, cfg.preprocess), weight)
        stem = out / f"{case.case_id}_pred"
        if args.probabilities:
            save_array(stem, probs, case.spacing, "probabilities")
        else:
            m = threshold_regions(probs, cfg.train.threshold)
            save_array(stem, regions_to_labels(m[0], m[1], m[2]), case.spacing, "label")
    print(json.dumps({"out": str(out), "n_cases": len(cases)}))
    return EXIT_OK


def load_prediction(pred_dir: str | Path, case: Case) -> np.ndarray:
    """(3, D, H, W) region probabilities from a saved label map or probability volume."""
    arr, _ = load_array(Path(pred_dir) / f"{case.case_id}_pred.json")
    if arr.ndim == 3:
        if arr.shape != case.shape:
            raise DataError(f"prediction for {case.case_id} has shape {arr.shape}, expected {case.shape}")
        return derive_regions(arr).as_array().astype(np.float32)
    if arr.shape != (3,) + case.shape:
        raise DataError(f"prediction for {case.case_id} has shape {arr.shape}, expected {(3,) + case.shape}")
    return arr


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    cases = _cases(args, cfg)
    reports = []
    for case in cases:
        if case.label is None:
            raise DataError(f"case {case.case_id} has no label map to evaluate against")
        probs = load_prediction(args.pred, case)
        reports.append(evaluate_case(probs, case.label, cfg.train.threshold, case.spacing, case.case_id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = aggregate(reports)
    write_reports_csv(reports, out)
    write_reports_json(reports, out.with_suffix(".json"), summary)
    print(json.dumps({"report": str(out), "means": summary.means, "counts": summary.counts}))
    return EXIT_OK


def _matrix(spec: str) -> list[str]:
    if spec in ("tables", "all"):
        return list(ABLATION_TABLE_NAMES)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [n for n in names if n not in TABLES]
    if bad or not names:
        raise ConfigError(f"unknown ablation table(s) {bad}; choose from {list(ABLATION_TABLE_NAMES)}")
    return names


def cmd_ablate(args) -> int:
    cfg = _load(args)
    tables = _matrix(args.matrix) if args.matrix else list(cfg.ablation.tables)
    cases = _cases(args, cfg)
    rows = run_ablation(cases, cfg, tables, args.out)
    print(json.dumps({"out": str(args.out), "tables": {t: len(r) for t, r in rows.items()}}))
    return EXIT_OK


def cmd_describe(args) -> int:
    if args.checkpoint:
        model, meta = model_from_checkpoint(args.checkpoint)
    else:
        cfg = _load(args)
        switches = load_switches(args.switches) if args.switches else cfg.switches
        model, meta = FusionSegmenter(cfg.network, cfg.semantic, switches), {}
    doc = describe(model)
    doc["switches"] = model.switches.to_dict()
    doc["channels"] = list(model.net_cfg.channels)
    if "best_epoch" in meta:
        doc["best_epoch"] = meta["best_epoch"]
    print(json.dumps(doc, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config (all fields optional)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="brainfuse", description="Three-layer fusion brain-tumor segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="normalize and enhance every case")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="cross-validated training")
    s.add_argument("--manifest")
    s.add_argument("--switches", help="'base' or a YAML/JSON file of ablation switches")
    s.add_argument("--out", required=True)
    s.add_argument("--folds-to-run", type=int)
    s.add_argument("--single-fold", action="store_true", help="train and validate on all cases")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="write <case_id>_pred volumes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--probabilities", action="store_true", help="save (3,D,H,W) float maps")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score saved predictions")
    s.add_argument("--pred", required=True)
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="run the ablation tables")
    s.add_argument("--manifest")
    s.add_argument("--matrix", help="'tables', 'all' or a comma list of table names")
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("describe", parents=[common], help="architecture and parameter summary")
    s.add_argument("--checkpoint")
    s.add_argument("--switches")
    s.set_defaults(func=cmd_describe)
    return p


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": kind, "exit_code": code, "type": type(exc).__name__, "message": msg}),
          file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except FloatingPointError as exc:
        return _fail("numeric", 1, exc)


if __name__ == "__main__":
    sys.exit(main())
