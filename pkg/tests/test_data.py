import json

import numpy as np
import pytest

from brainfuse.data import (SynthConfig, check_case, load_array, load_case, load_dataset,
                            load_manifest, save_array, save_case, save_dataset, synth_case,
                            synth_cases, synth_generate)
from brainfuse.errors import DataError
from brainfuse.volume import MODALITIES, derive_regions


def test_payload_size_mismatch_rejected(tmp_path):
    save_array(tmp_path / "v", np.zeros((2, 3, 4)), (1, 1, 1), "T1")
    (tmp_path / "v.raw").write_bytes(np.zeros(25, "<f4").tobytes())
    with pytest.raises(DataError, match="expects 24 float32 values, payload holds 25"):
        load_array(tmp_path / "v.json")


def test_corrupt_sidecar_reports_byte_offset(tmp_path):
    save_array(tmp_path / "v", np.zeros((2, 2, 2)), (1, 1, 1), "T1")
    (tmp_path / "v.json").write_text('{"shape": [2, 2, 2], "spacing": [1, 1, 1] "dtype": x}')
    with pytest.raises(DataError, match="byte offset 42"):
        load_array(tmp_path / "v.json")


def test_array_round_trip_bitwise(tmp_path, rng):
    x = rng.standard_normal((3, 4, 5)).astype(np.float32)
    save_array(tmp_path / "a", x, (1, 2, 3), "T2")
    y, meta = load_array(tmp_path / "a.json")
    assert y.tobytes() == x.tobytes() and meta["spacing"] == [1.0, 2.0, 3.0]
    lab = rng.choice([0, 1, 2, 4], (3, 4, 5)).astype(np.uint8)
    save_array(tmp_path / "s", lab, (1, 1, 1), "label")
    assert (tmp_path / "s.raw").stat().st_size == lab.size
    assert load_array(tmp_path / "s")[0].dtype == np.uint8


def test_case_round_trip_byte_identical(tmp_path):
    case = synth_cases(1, 5, SynthConfig(shape=(8, 8, 8)))[0]
    m = save_dataset([case], tmp_path / "a")
    loaded = load_case(m.entries[0], m.root)
    m2 = save_dataset([loaded], tmp_path / "b")
    for m_ in MODALITIES:
        name = m_.lower() + ".raw"
        assert (tmp_path / "a" / case.case_id / name).read_bytes() == \
               (tmp_path / "b" / case.case_id / name).read_bytes()
    assert (tmp_path / "a" / case.case_id / "seg.raw").read_bytes() == \
           (tmp_path / "b" / case.case_id / "seg.raw").read_bytes()
    assert loaded.description == case.description and loaded.tumor_type == case.tumor_type
    assert load_dataset(m2)[0].case_id == case.case_id


def test_shape_mismatch_names_both_files(tmp_path):
    case = synth_cases(1, 0, SynthConfig(shape=(8, 8, 8)))[0]
    entry = save_case(case, tmp_path)
    save_array(tmp_path / case.case_id / "flair", np.zeros((8, 8, 7)), (1, 1, 1), "FLAIR")
    with pytest.raises(DataError, match=r"flair\.json.*t1\.json"):
        load_case(entry, tmp_path)


def test_manifest_validation(tmp_path):
    m = synth_generate(2, 0, tmp_path, SynthConfig(shape=(8, 8, 8)))
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert len(load_manifest(tmp_path / "manifest.json").entries) == 2
    doc["cases"][1]["case_id"] = doc["cases"][0]["case_id"]
    (tmp_path / "dup.json").write_text(json.dumps(doc))
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(tmp_path / "dup.json")
    doc = m.to_dict()
    doc["cases"][0]["modalities"]["T1"] = "nowhere/t1.json"
    (tmp_path / "missing.json").write_text(json.dumps(doc))
    with pytest.raises(DataError, match="missing file"):
        load_manifest(tmp_path / "missing.json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "absent.json")


def test_synthetic_nesting_and_validity():
    for case in synth_cases(10, 1, SynthConfig(shape=(16, 16, 16))):
        check_case(case)
        r = derive_regions(case.label)
        assert not np.any(r.et & ~r.tc) and not np.any(r.tc & ~r.wt)
        assert r.et.any() and (r.tc & ~r.et).any() and (r.wt & ~r.tc).any()


def test_synthetic_et_fraction_within_range():
    cfg = SynthConfig()
    rng = np.random.default_rng(11)
    fracs = [derive_regions(synth_case(f"c{i}", rng, cfg).label).et.mean() for i in range(50)]
    lo, hi = cfg.et_fraction_range
    assert all(lo <= f <= hi for f in fracs)


def test_synthetic_t1ce_bright_in_et():
    case = synth_cases(1, 2)[0]
    r = derive_regions(case.label)
    t1ce = case.modalities["T1ce"].data
    assert t1ce[r.et].mean() > t1ce[r.wt & ~r.tc].mean()


def test_synthetic_same_seed_same_dataset(tmp_path):
    a, b = synth_cases(3, 9, SynthConfig(shape=(8, 8, 8))), synth_cases(3, 9, SynthConfig(shape=(8, 8, 8)))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.stack(), y.stack())
        np.testing.assert_array_equal(x.label, y.label)
        assert x.description == y.description
    c = synth_cases(3, 10, SynthConfig(shape=(8, 8, 8)))
    assert not np.array_equal(a[0].stack(), c[0].stack())


def test_synth_rejects_zero_cases():
    with pytest.raises(DataError):
        synth_cases(0)
