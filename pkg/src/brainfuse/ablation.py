"""Ablation switch matrix and table emission.

Four tables, each a list of (row label, switches):

* ``fusion_ablation``: remove one fusion layer at a time, plus a plain U-Net.
* ``feature_extraction``: swap the feature extractor.
* ``semantic_ablation``: remove semantic guidance and/or semantic attention.
* ``tissue_analysis``: the semantic rows scored per tissue class.

Identical switch settings are trained once and shared between tables.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ABLATION_TABLE_NAMES, ExperimentConfig
from .metrics import AggregateReport
from .model import AblationSwitches
from .train import CVResult, cross_validate
from .volume import Case

log = logging.getLogger(__name__)

S = AblationSwitches
_SEMANTIC_ROWS = [
    ("Base", S()),
    ("Traditional 3D-2D", S(semantic_guidance=False, semantic_attention=False)),
    ("-Semantic Guidance", S(semantic_guidance=False)),
    ("-Semantic Attention", S(semantic_attention=False)),
]
TABLES: dict[str, list[tuple[str, AblationSwitches]]] = {
    "fusion_ablation": [
        ("Base", S()),
        ("-Pixel Fusion Layer", S(pixel_fusion=False)),
        ("-Feature Fusion Layer", S(feature_extractor="none")),
        ("-Semantic Fusion Layer", S(semantic_fusion=False)),
        ("Traditional 3D-UNet", S(pixel_fusion=False, semantic_fusion=False, feature_extractor="plain_unet")),
    ],
    "feature_extraction": [
        ("Base", S()),
        ("3D ResNet", S(feature_extractor="3d_resnet")),
        ("2D ResNet50", S(feature_extractor="2d_resnet")),
        ("No Feature Extractor", S(feature_extractor="none")),
    ],
    "semantic_ablation": list(_SEMANTIC_ROWS),
    "tissue_analysis": list(_SEMANTIC_ROWS),
}
assert tuple(TABLES) == ABLATION_TABLE_NAMES

_REGION_COLS = ["WT_Dice", "TC_Dice", "ET_Dice", "WT_HD95", "TC_HD95", "ET_HD95"]
HEADERS = {
    "fusion_ablation": ["Model", "Avg_Dice", "Avg_HD95"] + _REGION_COLS,
    "feature_extraction": ["Model", "AVG_Dice", "AVG_HD95"] + _REGION_COLS,
    "semantic_ablation": ["Model", "AVG_Dice", "AVG_HD95"] + _REGION_COLS,
    "tissue_analysis": ["Model", "NCR/NET_Dice", "ED_Dice", "ET_Dice"],
}


def _avg(vals):
    return None if any(v is None for v in vals) else float(np.mean(vals))


def table_row(table: str, label: str, agg: AggregateReport) -> list:
    m = agg.means
    if table == "tissue_analysis":
        return [label, m["ncr_net_dice"], m["ed_dice"], m["et_tissue_dice"]]
    dices = [m["wt_dice"], m["tc_dice"], m["et_dice"]]
    hds = [m["wt_hd95"], m["tc_hd95"], m["et_hd95"]]
    # a region whose HD95 is undefined in any case makes the table cell "-"
    if any(agg.counts[k] < agg.n_cases for k in ("wt_hd95", "tc_hd95", "et_hd95")):
        hds = [None if agg.counts[k] < agg.n_cases else v
               for k, v in zip(("wt_hd95", "tc_hd95", "et_hd95"), hds)]
    return [label, _avg(dices), _avg(hds)] + dices + hds


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.4f}"


def write_table(path: str | Path, table: str, rows: Sequence[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADERS[table])
        for row in rows:
            w.writerow([_cell(v) for v in row])


def run_ablation(cases: Sequence[Case], cfg: ExperimentConfig, tables: Sequence[str] | None = None,
                 out_dir: str | Path | None = None) -> dict[str, list[list]]:
    """Train every distinct configuration the requested tables need and build their rows."""
    tables = list(tables or cfg.ablation.tables)
    cache: dict[AblationSwitches, CVResult] = {}
    out: dict[str, list[list]] = {}
    for table in tables:
        rows = []
        for label, switches in TABLES[table]:
            if switches not in cache:
                log.info("ablation: training %s (%s)", label, switches)
                cache[switches] = cross_validate(
                    cases, switches, cfg.train, folds_to_run=cfg.ablation.folds_to_run,
                    net_cfg=cfg.network, sem_cfg=cfg.semantic, pre_cfg=cfg.preprocess,
                    aug_cfg=cfg.augment,
                )
            rows.append(table_row(table, label, cache[switches].pooled))
        out[table] = rows
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_table(Path(out_dir) / f"{table}.csv", table, rows)
    return out
