import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from brainfuse.errors import ConfigError, DataError
from brainfuse.preprocess import (AugmentConfig, PreprocessConfig, augment, baseline_normalize,
                                  clip, enhance_region_contrast, minmax_normalize, preprocess_case,
                                  t1ce_boost, zscore_normalize)
from brainfuse.volume import MODALITIES, Volume, brain_mask


def vol(values):
    return Volume(np.asarray(values, dtype=np.float64).reshape(1, 1, -1))


def test_zscore_example():
    out = zscore_normalize(vol([1, 2, 3]), np.ones((1, 1, 3), bool)).data.ravel()
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_minmax_example():
    np.testing.assert_allclose(minmax_normalize(vol([2, 4, 6])).data.ravel(), [0, 0.5, 1])


def test_t1ce_boost_examples():
    cfg = PreprocessConfig()
    assert t1ce_boost(vol([5.0]), cfg).data.item() == pytest.approx(10 ** 0.9 - 5, abs=1e-4)
    assert round(10 ** 0.9 - 5, 4) == 2.9433
    x = vol(np.linspace(-7, 7, 15))
    ident = t1ce_boost(x, PreprocessConfig(t1ce_gamma=1.0)).data
    np.testing.assert_allclose(ident, clip(x, (-5, 5)).data, atol=1e-6)


def test_region_contrast_example():
    out = enhance_region_contrast(vol([1, 3]), np.ones((1, 1, 2), bool), 1.25).data.ravel()
    np.testing.assert_allclose(out, [0.75, 3.25])


def test_region_contrast_empty_region_noop():
    v = vol([1, 3])
    assert enhance_region_contrast(v, np.zeros((1, 1, 2), bool), 1.25) is v


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(-50, 50)), st.floats(0.3, 2.0))
def test_t1ce_boost_monotone(x, gamma):
    order = np.argsort(x, kind="stable")
    out = t1ce_boost(vol(x[order]), PreprocessConfig(t1ce_gamma=gamma)).data.ravel()
    assert np.all(np.diff(out) >= 0)
    assert np.all(np.isfinite(out))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(0.0, 1000.0)))
def test_minmax_exact_unit_range_and_order(x):
    if x.max() - x.min() < 1e-3:
        return
    out = minmax_normalize(vol(x)).data.ravel()
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(np.diff(out[np.argsort(x, kind="stable")]) >= 0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(1.0, 500.0)))
def test_zscore_masked_moments(x):
    if x[8:].std() < 1e-2 * x[8:].mean():
        return
    mask = np.zeros(64, bool)
    mask[8:] = True
    out = zscore_normalize(vol(x), mask.reshape(1, 1, -1)).data.ravel()
    inside = out[mask].astype(np.float64)
    assert abs(inside.mean()) < 1e-4 and abs(inside.std() - 1) < 1e-4
    assert np.all(out[~mask] == 0)


def test_zscore_errors():
    with pytest.raises(DataError):
        zscore_normalize(vol([1, 1, 1]), np.ones((1, 1, 3), bool))
    with pytest.raises(DataError):
        zscore_normalize(vol([1, 2, 3]), np.zeros((1, 1, 3), bool))
    with pytest.raises(DataError):
        minmax_normalize(vol([2, 2]))


def test_config_validation():
    with pytest.raises(ConfigError):
        PreprocessConfig(clip_range=(1, -1))
    with pytest.raises(ConfigError):
        PreprocessConfig(t1ce_gamma=0)
    with pytest.raises(ConfigError):
        PreprocessConfig(et_contrast=0.9)
    with pytest.raises(ConfigError):
        AugmentConfig(flip_p=1.5)


def test_preprocess_case_contracts(synth16):
    case = synth16[0]
    cfg = PreprocessConfig()
    out = preprocess_case(case, cfg, enhance_regions=False)
    wide = preprocess_case(case, PreprocessConfig(clip_range=(-100.0, 100.0)), enhance_regions=False)
    mask = brain_mask(case.modalities)
    for m in MODALITIES:
        x = out.modalities[m].data
        assert np.all(x[~mask] == 0)
        assert x.min() >= -5 and x.max() <= 5
    for m in ("T2", "FLAIR"):
        assert out.modalities[m].data.min() >= 0 and out.modalities[m].data.max() <= 1
    # T1 is not boosted; without clipping its masked moments are standardized
    t1 = wide.modalities["T1"].data[mask].astype(np.float64)
    assert abs(t1.mean()) < 1e-4 and abs(t1.std() - 1) < 1e-4
    enhanced = preprocess_case(case, cfg)
    assert not np.array_equal(enhanced.modalities["T1ce"].data, out.modalities["T1ce"].data)
    unlabeled = preprocess_case(case.replace(label=None), cfg)
    np.testing.assert_array_equal(unlabeled.modalities["T1ce"].data, out.modalities["T1ce"].data)


def test_baseline_normalize_is_plain_zscore(synth16):
    case = synth16[0]
    mask = brain_mask(case.modalities)
    out = baseline_normalize(case)
    for m in MODALITIES:
        x = out.modalities[m].data[mask].astype(np.float64)
        assert abs(x.mean()) < 1e-4 and abs(x.std() - 1) < 1e-4


def test_augment_deterministic_under_seed(synth16):
    case = preprocess_case(synth16[0], enhance_regions=False)
    cfg = AugmentConfig(flip_p=0.5, rotate_p=1.0, gamma_p=1.0, region_contrast_p=1.0,
                        crop_shape=(8, 8, 8))
    for seed in range(5):
        a = augment(case, cfg, np.random.default_rng(seed))
        b = augment(case, cfg, np.random.default_rng(seed))
        np.testing.assert_array_equal(a.stack(), b.stack())
        np.testing.assert_array_equal(a.label, b.label)
        assert a.shape == (8, 8, 8)
    c = augment(case, cfg, np.random.default_rng(99))
    d = augment(case, cfg, np.random.default_rng(98))
    assert not np.array_equal(c.stack(), d.stack())


def test_augment_geometry_shared_by_label(synth16):
    case = preprocess_case(synth16[0], enhance_regions=False)
    cfg = AugmentConfig(flip_p=1.0, rotate_p=0.0, gamma_p=0.0, region_contrast_p=0.0)
    out = augment(case, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.label, case.label[::-1, ::-1, ::-1])
    np.testing.assert_array_equal(out.modalities["T2"].data, case.modalities["T2"].data[::-1, ::-1, ::-1])


def test_augment_disabled_returns_same_case(synth16):
    case = synth16[0]
    assert augment(case, AugmentConfig.disabled(), np.random.default_rng(0)) is case


def test_augment_rotation_keeps_labels_legal(synth16):
    case = preprocess_case(synth16[1], enhance_regions=False)
    cfg = AugmentConfig(flip_p=0.0, rotate_p=1.0, gamma_p=0.0, region_contrast_p=0.0)
    out = augment(case, cfg, np.random.default_rng(3))
    assert set(np.unique(out.label)) <= {0, 1, 2, 4}


def test_crop_larger_than_volume_rejected(synth16):
    with pytest.raises(DataError):
        augment(synth16[0], AugmentConfig(crop_shape=(32, 8, 8)), np.random.default_rng(0))
