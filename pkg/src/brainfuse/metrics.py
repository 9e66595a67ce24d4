"""Dice, HD95 and per-case / aggregate evaluation reports.

Conventions: Dice of two empty masks is 1.0. HD95 of two empty masks is 0,
and undefined (``None``) when exactly one mask is empty. Surfaces are
six-connected (the volume border counts as background); the percentile is
nearest-rank, ``ceil(0.95 * n)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .volume import REGIONS, TISSUES, derive_regions, tissue_masks

CSV_HEADER = ("case_id", "wt_dice", "tc_dice", "et_dice", "wt_hd95", "tc_hd95", "et_hd95",
              "ncr_net_dice", "ed_dice", "et_tissue_dice")
METRIC_KEYS = CSV_HEADER[1:]

_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbour."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        # erosion structure below is 3D
        raise ValueError(f"expected a 3D mask, got {mask.ndim}D")
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def nearest_rank(values: np.ndarray, q: float = 0.95) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(math.ceil(q * len(v)), 1)
    return float(v[k - 1])


def directed_surface_distances(a_surf: np.ndarray, b_surf: np.ndarray, spacing) -> np.ndarray:
    """Distance from every voxel of ``a_surf`` to the nearest voxel of ``b_surf``, in mm."""
    dist = ndimage.distance_transform_edt(~b_surf, sampling=spacing)
    return dist[a_surf]


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    pred, gt = _pair(pred, gt)
    p_any, g_any = pred.any(), gt.any()
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return None
    spacing = tuple(float(s) for s in spacing)
    sp, sg = surface(pred), surface(gt)
    d_pg = directed_surface_distances(sp, sg, spacing)
    d_gp = directed_surface_distances(sg, sp, spacing)
    return max(nearest_rank(d_pg), nearest_rank(d_gp))


@dataclass
class CaseReport:
    case_id: str
    dice: dict[str, float]
    hd95: dict[str, float | None]
    tissue_dice: dict[str, float]

    def row(self) -> dict[str, object]:
        row: dict[str, object] = {"case_id": self.case_id}
        for r in REGIONS:
            row[f"{r}_dice"] = self.dice[r]
        for r in REGIONS:
            row[f"{r}_hd95"] = self.hd95[r]
        row["ncr_net_dice"] = self.tissue_dice["ncr_net"]
        row["ed_dice"] = self.tissue_dice["ed"]
        row["et_tissue_dice"] = self.tissue_dice["et"]
        return row

    def all_background(self) -> bool:
        return all(v is None for v in self.hd95.values()) and not any(self.dice.values())


def threshold_regions(pred_probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    pred_probs = np.asarray(pred_probs)
    if pred_probs.ndim != 4 or pred_probs.shape[0] != 3:
        raise ValueError(f"expected (3, D, H, W) region probabilities, got {pred_probs.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return pred_probs >= threshold


def predicted_tissues(masks: np.ndarray) -> dict[str, np.ndarray]:
    """Decompose thresholded [WT, TC, ET] masks into disjoint tissues.

    ET channel -> ET, TC minus ET -> NCR/NET, WT minus TC -> ED.
    """
    wt, tc, et = masks
    return {"ncr_net": tc & ~et, "ed": wt & ~tc, "et": et}


def evaluate_case(pred_probs: np.ndarray, label: np.ndarray, threshold: float = 0.5,
                  spacing=(1.0, 1.0, 1.0), case_id: str = "") -> CaseReport:
    masks = threshold_regions(pred_probs, threshold)
    gt = derive_regions(label).as_array()
    if masks.shape[1:] != gt.shape[1:]:
        raise ValueError(f"prediction grid {masks.shape[1:]} != label grid {gt.shape[1:]}")
    d = {r: dice(masks[i], gt[i]) for i, r in enumerate(REGIONS)}
    h = {r: hd95(masks[i], gt[i], spacing) for i, r in enumerate(REGIONS)}
    pt, gtt = predicted_tissues(masks), tissue_masks(label)
    t = {k: dice(pt[k], gtt[k]) for k in TISSUES}
    return CaseReport(case_id, d, h, t)


@dataclass
class AggregateReport:
    """Means over defined values; ``counts`` holds the number of defined values."""

    means: dict[str, float | None]
    counts: dict[str, int]
    n_cases: int
    folds: dict[str, "AggregateReport"] = field(default_factory=dict)
    undefined_policy: str = "mean-over-defined"

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "undefined_policy": self.undefined_policy,
            "means": self.means,
            "counts": self.counts,
            "folds": {k: v.to_dict() for k, v in self.folds.items()},
        }


def aggregate(reports: Sequence[CaseReport]) -> AggregateReport:
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    means, counts = {}, {}
    for key in METRIC_KEYS:
        vals = [r.row()[key] for r in reports]
        vals = [float(v) for v in vals if v is not None]
        counts[key] = len(vals)
        means[key] = float(np.mean(vals)) if vals else None
    return AggregateReport(means, counts, len(reports))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_reports_csv(reports: Iterable[CaseReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            row = r.row()
            w.writerow([row["case_id"]] + [_fmt(row[k]) for k in METRIC_KEYS])


def write_reports_json(reports: Iterable[CaseReport], path: str | Path,
                       summary: AggregateReport | None = None) -> None:
    doc = {"cases": [r.row() for r in reports]}
    if summary is not None:
        doc["aggregate"] = summary.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2))


def read_reports_csv(path: str | Path) -> list[dict[str, object]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "case_id" else (None if v == "" else float(v))) for k, v in row.items()}
            for row in rows]
