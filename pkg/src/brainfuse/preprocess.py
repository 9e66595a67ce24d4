"""Pixel-level fusion: modality-specific normalization, region contrast, augmentation.

Pipeline order is fixed: normalize -> clip -> T1ce gamma -> (training only)
region contrast -> augmentation. Background (zero in every raw modality)
stays exactly zero throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .volume import MODALITIES, Case, Volume, brain_mask, derive_regions


@dataclass
class PreprocessConfig:
    zscore_modalities: tuple[str, ...] = ("T1", "T1ce")
    minmax_modalities: tuple[str, ...] = ("T2", "FLAIR")
    clip_range: tuple[float, float] = (-5.0, 5.0)
    t1ce_gamma: float = 0.9
    et_contrast: float = 1.25
    tc_contrast: float = 1.2

    def __post_init__(self) -> None:
        self.zscore_modalities = tuple(self.zscore_modalities)
        self.minmax_modalities = tuple(self.minmax_modalities)
        self.clip_range = tuple(float(c) for c in self.clip_range)
        lo, hi = self.clip_range
        if not lo < hi:
            raise ConfigError(f"clip_range low must be < high, got {self.clip_range}")
        if self.t1ce_gamma <= 0:
            raise ConfigError(f"t1ce_gamma must be positive, got {self.t1ce_gamma}")
        if self.et_contrast < 1 or self.tc_contrast < 1:
            raise ConfigError("contrast factors must be >= 1")
        both = set(self.zscore_modalities) & set(self.minmax_modalities)
        covered = set(self.zscore_modalities) | set(self.minmax_modalities)
        if both or covered != set(MODALITIES):
            raise ConfigError(
                "every modality needs exactly one normalization "
                f"(z-score: {self.zscore_modalities}, min-max: {self.minmax_modalities})"
            )


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    rotate_p: float = 0.3
    rotate_range_deg: tuple[float, float] = (-15.0, 15.0)
    gamma_p: float = 0.3
    gamma_range: tuple[float, float] = (0.8, 1.2)
    region_contrast_p: float = 0.5
    tumor_crop: bool = True
    crop_shape: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        for name in ("flip_p", "rotate_p", "gamma_p", "region_contrast_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        self.rotate_range_deg = tuple(float(r) for r in self.rotate_range_deg)
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        if min(self.gamma_range) <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ConfigError(f"gamma_range must be positive and ordered, got {self.gamma_range}")
        if self.crop_shape is not None:
            self.crop_shape = tuple(int(c) for c in self.crop_shape)
            if len(self.crop_shape) != 3 or min(self.crop_shape) < 1:
                raise ConfigError(f"crop_shape must be three positive ints, got {self.crop_shape}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, rotate_p=0.0, gamma_p=0.0, region_contrast_p=0.0, crop_shape=None)


def zscore_normalize(v: Volume, mask: np.ndarray, modality: str = "volume") -> Volume:
    """Standardize to zero mean and unit population std over ``mask``; zero elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise DataError(f"{modality}: brain mask shape {mask.shape} != volume shape {v.shape}")
    if not mask.any():
        raise DataError(f"{modality}: brain mask is empty")
    x = v.data.astype(np.float64)
    vals = x[mask]
    mu, sd = vals.mean(), vals.std()
    if sd <= 1e-12 * max(1.0, abs(mu)):
        raise DataError(f"{modality}: zero intensity variance inside brain mask")
    out = np.zeros_like(x)
    out[mask] = (vals - mu) / sd
    return v.with_data(out)


def minmax_normalize(v: Volume, modality: str = "volume") -> Volume:
    """Affinely rescale intensities onto exactly [0, 1]."""
    x = v.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DataError(f"{modality}: constant volume cannot be min-max scaled")
    return v.with_data((x - lo) / (hi - lo))


def clip(v: Volume, clip_range: tuple[float, float]) -> Volume:
    return v.with_data(np.clip(v.data, *clip_range))


def t1ce_boost(v: Volume, cfg: PreprocessConfig) -> Volume:
    """Power-law contrast boost for z-scored T1ce.

    Values are clipped, shifted by ``-clip_low`` onto a nonnegative domain,
    raised to ``t1ce_gamma`` and shifted back: ``(x - lo)**gamma + lo``.
    """
    if cfg.t1ce_gamma <= 0:
        raise ConfigError(f"t1ce_gamma must be positive, got {cfg.t1ce_gamma}")
    lo, hi = cfg.clip_range
    x = np.clip(v.data.astype(np.float64), lo, hi)
    return v.with_data(np.power(x - lo, cfg.t1ce_gamma) + lo)


def enhance_region_contrast(v: Volume, region: np.ndarray, factor: float) -> Volume:
    """Stretch intensities inside ``region`` about the region mean by ``factor``.

    An empty region is a no-op.
    """
    region = np.asarray(region, dtype=bool)
    if region.shape != v.shape:
        raise DataError(f"region mask shape {region.shape} != volume shape {v.shape}")
    if factor < 1:
        raise ConfigError(f"contrast factor must be >= 1, got {factor}")
    if not region.any():
        return v
    x = v.data.astype(np.float64)
    vals = x[region]
    mu = vals.mean()
    x[region] = mu + factor * (vals - mu)
    return v.with_data(x)


def _modality_range(name: str, cfg: PreprocessConfig) -> tuple[float, float]:
    return (0.0, 1.0) if name in cfg.minmax_modalities else cfg.clip_range


def _enhance_regions(arrays: dict[str, np.ndarray], label: np.ndarray, cfg: PreprocessConfig,
                     spacing) -> dict[str, np.ndarray]:
    # TC first, then ET inside it; re-clip so each modality keeps its range.
    regions = derive_regions(label)
    out = {}
    for name, x in arrays.items():
        v = Volume(x, spacing)
        v = enhance_region_contrast(v, regions.tc, cfg.tc_contrast)
        v = enhance_region_contrast(v, regions.et, cfg.et_contrast)
        out[name] = np.clip(v.data, *_modality_range(name, cfg))
    return out


def preprocess_case(case: Case, cfg: PreprocessConfig | None = None,
                    enhance_regions: bool | None = None) -> Case:
    """Apply the full pixel-level fusion layer to one case.

    ``enhance_regions`` defaults to "label present" (the training path). The
    training harness passes ``False`` and leaves region contrast to the
    stochastic augmentation step instead.
    """
    cfg = cfg or PreprocessConfig()
    mask = brain_mask(case.modalities)
    out = {}
    for name in MODALITIES:
        v = case.modalities[name]
        try:
            if name in cfg.zscore_modalities:
                v = zscore_normalize(v, mask, name)
            else:
                v = minmax_normalize(v, name)
            v = clip(v, cfg.clip_range)
            if name == "T1ce":
                v = t1ce_boost(v, cfg)
        except DataError as exc:
            raise DataError(f"case {case.case_id}: {exc}") from exc
        out[name] = np.where(mask, v.data, 0.0)
    if enhance_regions is None:
        enhance_regions = case.label is not None
    if enhance_regions and case.label is not None:
        out = _enhance_regions(out, case.label, cfg, case.spacing)
        out = {k: np.where(mask, x, 0.0) for k, x in out.items()}
    return case.with_arrays(out)


def baseline_normalize(case: Case) -> Case:
    """Conventional per-modality z-score over the brain mask, nothing else.

    Used when the pixel-level fusion layer is ablated.
    """
    mask = brain_mask(case.modalities)
    out = {}
    for name in MODALITIES:
        try:
            out[name] = zscore_normalize(case.modalities[name], mask, name).data
        except DataError as exc:
            raise DataError(f"case {case.case_id}: {exc}") from exc
    return case.with_arrays(out)


def _gamma_within(x: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    if not mask.any():
        return x
    vals = x[mask].astype(np.float64)
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        return x
    out = x.astype(np.float64).copy()
    out[mask] = lo + (hi - lo) * ((vals - lo) / (hi - lo)) ** gamma
    return out


def _crop_origin(shape, crop, label, tumor_crop, rng) -> tuple[int, ...]:
    if label is not None and tumor_crop and np.any(label > 0):
        candidates = np.argwhere(label > 0)
        center = candidates[rng.integers(len(candidates))]
        return tuple(
            int(np.clip(c - k // 2, 0, s - k)) for c, k, s in zip(center, crop, shape)
        )
    return tuple(int(rng.integers(0, s - k + 1)) for k, s in zip(crop, shape))


def augment(case: Case, cfg: AugmentConfig, rng: np.random.Generator,
            preprocess_cfg: PreprocessConfig | None = None) -> Case:
    """Random flips, axial rotation, gamma, region contrast and cropping.

    Geometric transforms hit every modality and the label map identically;
    gamma and region contrast touch intensities only. Every random draw is
    made in a fixed order, so the stream depends on the seed alone.
    """
    pcfg = preprocess_cfg or PreprocessConfig()
    shape = case.shape
    if cfg.crop_shape is not None and any(k > s for k, s in zip(cfg.crop_shape, shape)):
        raise DataError(f"crop_shape {cfg.crop_shape} exceeds volume shape {shape}")

    flips = rng.random(3) < cfg.flip_p
    do_rotate = rng.random() < cfg.rotate_p
    angle = rng.uniform(*cfg.rotate_range_deg)
    do_gamma = rng.random() < cfg.gamma_p
    gamma = rng.uniform(*cfg.gamma_range)
    do_contrast = rng.random() < cfg.region_contrast_p

    arrays = {m: case.modalities[m].data for m in MODALITIES}
    label = case.label
    changed = False

    if flips.any():
        axes = tuple(int(a) for a in np.flatnonzero(flips))
        arrays = {m: np.flip(x, axis=axes) for m, x in arrays.items()}
        if label is not None:
            label = np.flip(label, axis=axes)
        changed = True
    if do_rotate:
        # axial plane = (H, W); linear for intensities, nearest for labels
        arrays = {
            m: ndimage.rotate(x, angle, axes=(1, 2), reshape=False, order=1,
                              mode="constant", cval=0.0)
            for m, x in arrays.items()
        }
        if label is not None:
            label = ndimage.rotate(label, angle, axes=(1, 2), reshape=False, order=0,
                                   mode="constant", cval=0)
        changed = True
    if do_gamma:
        mask = brain_mask(list(arrays.values()))
        arrays = {m: _gamma_within(x, mask, gamma) for m, x in arrays.items()}
        changed = True
    if do_contrast and label is not None:
        mask = brain_mask(list(arrays.values()))
        arrays = _enhance_regions(arrays, label, pcfg, case.spacing)
        arrays = {m: np.where(mask, x, 0.0) for m, x in arrays.items()}
        changed = True

    if cfg.crop_shape is not None:
        origin = _crop_origin(shape, cfg.crop_shape, label, cfg.tumor_crop, rng)
        sl = tuple(slice(o, o + k) for o, k in zip(origin, cfg.crop_shape))
        arrays = {m: x[sl] for m, x in arrays.items()}
        if label is not None:
            label = label[sl]
        changed = True

    if not changed:
        return case
    return case.with_arrays(arrays, label=None if label is None else np.ascontiguousarray(label))
