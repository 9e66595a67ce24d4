"""Volumetric data types, BraTS label semantics and region derivation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
LEGAL_LABELS = (0, 1, 2, 4)
REGIONS = ("wt", "tc", "et")
TISSUES = ("ncr_net", "ed", "et")
TUMOR_TYPES = ("HGG", "LGG")

# BraTS convention: 1 = NCR/NET, 2 = ED, 4 = ET.
NCR_NET, ED, ET = 1, 2, 4


@dataclass(frozen=True)
class Volume:
    """One modality's 3D scalar grid.

    ``data`` is stored as float32 with shape (D, H, W); ``spacing`` is in mm.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains NaN or Inf values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class RegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def as_array(self) -> np.ndarray:
        """Stack into a (3, D, H, W) bool array in WT, TC, ET order."""
        return np.stack([self.wt, self.tc, self.et])


def validate_labels(labels: np.ndarray) -> np.ndarray:
    """Return ``labels`` as uint8 after checking every value is a BraTS code.

    Raises:
        DataError: naming the first offending value and its voxel index.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DataError(f"label map must be 3D, got shape {labels.shape}")
    bad = ~np.isin(labels, LEGAL_LABELS)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(
            f"illegal label value {labels[idx]!r} at voxel {idx}; allowed {LEGAL_LABELS}"
        )
    return labels.astype(np.uint8)


def derive_regions(labels: np.ndarray) -> RegionMasks:
    """Nested evaluation regions: WT = {1,2,4}, TC = {1,4}, ET = {4}."""
    labels = validate_labels(labels)
    return RegionMasks(
        wt=labels > 0,
        tc=(labels == NCR_NET) | (labels == ET),
        et=labels == ET,
    )


def tissue_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Disjoint tissue masks keyed ``ncr_net``, ``ed``, ``et``."""
    labels = validate_labels(labels)
    return {"ncr_net": labels == NCR_NET, "ed": labels == ED, "et": labels == ET}


def regions_to_labels(wt: np.ndarray, tc: np.ndarray, et: np.ndarray) -> np.ndarray:
    """Inverse of :func:`derive_regions` for thresholded (possibly non-nested) masks.

    ET wins over TC, TC over WT: ET -> 4, TC minus ET -> 1, WT minus TC -> 2.
    """
    labels = np.zeros(np.shape(wt), dtype=np.uint8)
    labels[np.asarray(wt, bool)] = ED
    labels[np.asarray(tc, bool)] = NCR_NET
    labels[np.asarray(et, bool)] = ET
    return labels


def brain_mask(volumes: Mapping[str, Volume] | list[np.ndarray]) -> np.ndarray:
    """Voxels with nonzero intensity in any modality."""
    arrays = volumes.values() if isinstance(volumes, Mapping) else volumes
    arrays = [v.data if isinstance(v, Volume) else np.asarray(v) for v in arrays]
    return np.any(np.stack(arrays) != 0, axis=0)


@dataclass(frozen=True)
class Case:
    """Four co-registered modalities, an optional label map and a description."""

    case_id: str
    modalities: Mapping[str, Volume]
    label: np.ndarray | None = None
    description: str = ""
    tumor_type: str | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = [m for m in MODALITIES if m not in self.modalities]
        extra = [m for m in self.modalities if m not in MODALITIES]
        if missing or extra:
            raise DataError(
                f"case {self.case_id}: modalities must be exactly {MODALITIES}; "
                f"missing {missing}, unexpected {extra}"
            )
        ordered = {m: self.modalities[m] for m in MODALITIES}
        ref = ordered["T1"]
        for name, vol in ordered.items():
            if vol.shape != ref.shape or vol.spacing != ref.spacing:
                raise DataError(
                    f"case {self.case_id}: modality {name} has shape {vol.shape} "
                    f"spacing {vol.spacing}, T1 has {ref.shape} {ref.spacing}"
                )
        object.__setattr__(self, "modalities", ordered)
        if self.label is not None:
            label = validate_labels(self.label)
            if label.shape != ref.shape:
                raise DataError(
                    f"case {self.case_id}: label shape {label.shape} != volume shape {ref.shape}"
                )
            label.flags.writeable = False
            object.__setattr__(self, "label", label)
        if self.tumor_type is not None and self.tumor_type not in TUMOR_TYPES:
            raise DataError(f"case {self.case_id}: unknown tumor type {self.tumor_type!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.modalities["T1"].shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.modalities["T1"].spacing

    def stack(self) -> np.ndarray:
        """(4, D, H, W) float32 array in T1, T1ce, T2, FLAIR order."""
        return np.stack([self.modalities[m].data for m in MODALITIES])

    def replace(self, **changes) -> "Case":
        fields = dict(
            case_id=self.case_id,
            modalities=self.modalities,
            label=self.label,
            description=self.description,
            tumor_type=self.tumor_type,
            meta=self.meta,
        )
        fields.update(changes)
        return Case(**fields)

    def with_arrays(self, arrays: Mapping[str, np.ndarray], label=...) -> "Case":
        mods = {m: Volume(arrays[m], self.spacing) for m in MODALITIES}
        return self.replace(modalities=mods, label=self.label if label is ... else label)
