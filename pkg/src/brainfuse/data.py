"""Native raw+sidecar volume format, dataset manifests and synthetic cases.

A volume is two files: ``<stem>.raw`` holding the C-order little-endian
payload and ``<stem>.json`` holding
``{"format", "version", "shape", "spacing", "modality", "dtype"}``.
Intensities are float32; label maps are uint8.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .semantic import DEFAULT_TEMPLATES, describe_regions
from .volume import MODALITIES, TUMOR_TYPES, Case, Volume, derive_regions, tissue_masks

FORMAT = "brainfuse-raw"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "uint8": "u1"}


def save_array(stem: str | Path, data: np.ndarray, spacing, modality: str) -> Path:
    """Write ``data`` as ``stem.raw`` + ``stem.json``; returns the sidecar path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dtype = "uint8" if modality == "label" else "float32"
    arr = np.ascontiguousarray(np.asarray(data).astype(_DTYPES[dtype], copy=False))
    stem.with_suffix(".raw").write_bytes(arr.tobytes())
    sidecar = {
        "format": FORMAT, "version": FORMAT_VERSION, "shape": list(arr.shape),
        "spacing": [float(s) for s in spacing], "modality": modality, "dtype": dtype,
    }
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(sidecar, indent=1))
    return path


def _read_json(path: Path) -> dict:
    raw = path.read_bytes()
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: corrupt header at byte offset {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header at byte offset {exc.pos}: {exc.msg}") from exc


def load_array(sidecar_path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(sidecar_path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    if not path.exists():
        raise DataError(f"missing sidecar {path}")
    meta = _read_json(path)
    for key in ("shape", "spacing", "dtype"):
        if key not in meta:
            raise DataError(f"{path}: sidecar lacks required field {key!r}")
    if meta["dtype"] not in _DTYPES:
        raise DataError(f"{path}: unsupported dtype {meta['dtype']!r}")
    payload = path.with_suffix(".raw")
    if not payload.exists():
        raise DataError(f"missing payload {payload}")
    dt = np.dtype(_DTYPES[meta["dtype"]])
    raw = payload.read_bytes()
    expected = int(np.prod(meta["shape"], dtype=np.int64))
    if len(raw) % dt.itemsize or len(raw) // dt.itemsize != expected:
        found = len(raw) / dt.itemsize
        found = int(found) if found == int(found) else found
        raise DataError(
            f"{payload}: sidecar shape {tuple(meta['shape'])} expects {expected} {meta['dtype']} "
            f"values, payload holds {found}"
        )
    return np.frombuffer(raw, dtype=dt).reshape(meta["shape"]).copy(), meta


# --------------------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    case_id: str
    modalities: dict[str, str]
    label: str | None = None
    description: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    format: str = FORMAT

    def to_dict(self) -> dict:
        return {
            "format": self.format, "version": FORMAT_VERSION,
            "cases": [
                {"case_id": e.case_id, "modalities": e.modalities, "label": e.label,
                 "description": e.description}
                for e in self.entries
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    doc = _read_json(path)
    if doc.get("format", FORMAT) != FORMAT:
        raise DataError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    entries, seen = [], set()
    for i, c in enumerate(doc.get("cases", [])):
        try:
            e = ManifestEntry(str(c["case_id"]), dict(c["modalities"]), c.get("label"),
                              c.get("description"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: case #{i} malformed ({exc})") from exc
        if e.case_id in seen:
            raise DataError(f"{path}: duplicate case_id {e.case_id!r}")
        seen.add(e.case_id)
        entries.append(e)
    manifest = DatasetManifest(path.parent, entries, doc.get("format", FORMAT))
    for e in entries:
        refs = list(e.modalities.values()) + [r for r in (e.label, e.description) if r]
        for r in refs:
            full = manifest.resolve(r)
            if not full.exists():
                raise DataError(f"{path}: case {e.case_id} references missing file {full}")
    return manifest


def load_case(entry: ManifestEntry, root: str | Path = ".") -> Case:
    root = Path(root)
    missing = [m for m in MODALITIES if m not in entry.modalities]
    if missing:
        raise DataError(f"case {entry.case_id}: manifest lacks modalities {missing}")
    vols, first = {}, None
    for m in MODALITIES:
        fpath = root / entry.modalities[m]
        arr, meta = load_array(fpath)
        if arr.ndim != 3:
            raise DataError(f"{fpath}: expected a 3D volume, got shape {arr.shape}")
        if first is None:
            first = (fpath, arr.shape, tuple(meta["spacing"]))
        elif (arr.shape, tuple(meta["spacing"])) != first[1:]:
            raise DataError(
                f"case {entry.case_id}: {fpath} shape {arr.shape} spacing {tuple(meta['spacing'])} "
                f"does not match {first[0]} shape {first[1]} spacing {first[2]}"
            )
        vols[m] = Volume(arr, meta["spacing"])
    label = None
    if entry.label:
        lpath = root / entry.label
        label, _ = load_array(lpath)
        if label.shape != first[1]:
            raise DataError(
                f"case {entry.case_id}: label {lpath} shape {label.shape} does not match "
                f"{first[0]} shape {first[1]}"
            )
    description, tumor_type = "", None
    if entry.description:
        doc = _read_json(root / entry.description)
        description = str(doc.get("description", ""))
        tumor_type = doc.get("tumor_type")
    return Case(entry.case_id, vols, label, description, tumor_type)


def save_case(case: Case, out_dir: str | Path, rel_to: str | Path | None = None) -> ManifestEntry:
    """Write a case under ``out_dir/<case_id>/``; paths in the entry are relative to ``rel_to``."""
    out_dir = Path(out_dir)
    rel_to = Path(rel_to) if rel_to is not None else out_dir
    cdir = out_dir / case.case_id
    mods = {}
    for m in MODALITIES:
        p = save_array(cdir / m.lower(), case.modalities[m].data, case.spacing, m)
        mods[m] = str(p.relative_to(rel_to))
    label = None
    if case.label is not None:
        label = str(save_array(cdir / "seg", case.label, case.spacing, "label").relative_to(rel_to))
    dpath = cdir / "description.json"
    dpath.write_text(json.dumps(
        {"case_id": case.case_id, "description": case.description, "tumor_type": case.tumor_type}
    ))
    return ManifestEntry(case.case_id, mods, label, str(dpath.relative_to(rel_to)))


def load_dataset(manifest: DatasetManifest) -> list[Case]:
    return [load_case(e, manifest.root) for e in manifest.entries]


def save_dataset(cases, out_dir: str | Path) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out_dir, [save_case(c, out_dir) for c in cases])
    manifest.save(out_dir / "manifest.json")
    return manifest


# --------------------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    n_cases: int = 5
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    et_fraction_range: tuple[float, float] = (0.005, 0.05)
    wt_radius_fraction: tuple[float, float] = (0.22, 0.30)
    noise: float = 0.04
    hgg_probability: float = 0.5
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.et_fraction_range = tuple(float(f) for f in self.et_fraction_range)
        self.wt_radius_fraction = tuple(float(f) for f in self.wt_radius_fraction)


# Mean tissue intensity per modality: background brain, ED, NCR/NET, ET.
_CONTRAST = {
    "T1": (0.60, 0.50, 0.30, 0.55),
    "T1ce": (0.60, 0.55, 0.30, 1.00),
    "T2": (0.50, 0.90, 0.80, 0.70),
    "FLAIR": (0.45, 1.00, 0.60, 0.70),
}


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def synth_case(case_id: str, rng: np.random.Generator, cfg: SynthConfig | None = None) -> Case:
    """One case with nested tumor ellipsoids: ET is the outer rim of TC, TC sits inside WT."""
    cfg = cfg or SynthConfig()
    shape = np.array(cfg.shape)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    mid = (shape - 1) / 2.0
    brain = _ellipsoid(grid, mid, shape * 0.47)
    lo, hi = cfg.et_fraction_range
    for _ in range(200):
        r_wt = rng.uniform(*cfg.wt_radius_fraction) * shape.min() * rng.uniform(0.85, 1.15, 3)
        center = mid + rng.uniform(-0.12, 0.12, 3) * shape
        wt = _ellipsoid(grid, center, r_wt) & brain
        r_tc = r_wt * rng.uniform(0.5, 0.7)
        c_tc = center + rng.uniform(-0.1, 0.1, 3) * r_wt
        tc = _ellipsoid(grid, c_tc, r_tc) & wt
        core = _ellipsoid(grid, c_tc, r_tc * rng.uniform(0.45, 0.65)) & tc
        et = tc & ~core
        frac = et.mean()
        if lo <= frac <= hi and core.any():
            break
    else:
        raise DataError(f"could not place an ET region within fraction range {cfg.et_fraction_range}")
    label = np.zeros(cfg.shape, dtype=np.uint8)
    label[wt] = 2
    label[tc] = 1
    label[et] = 4
    tissue = np.zeros(cfg.shape, dtype=np.int64)  # 0 brain, 1 ED, 2 NCR, 3 ET
    tissue[label == 2], tissue[label == 1], tissue[label == 4] = 1, 2, 3

    arrays = {}
    for m in MODALITIES:
        means = np.array(_CONTRAST[m])
        img = means[tissue]
        img = ndimage.gaussian_filter(img, 0.6)
        img = img + cfg.noise * ndimage.gaussian_filter(rng.standard_normal(cfg.shape), 0.8) * 2.0
        img = np.maximum(img, 0.01) * rng.uniform(80.0, 120.0)
        arrays[m] = np.where(brain, img, 0.0)
    tumor_type = TUMOR_TYPES[0] if rng.random() < cfg.hgg_probability else TUMOR_TYPES[1]
    present = [t for t, mask in tissue_masks(label).items() if mask.any()]
    description = describe_regions(present, tumor_type, cfg.templates)
    vols = {m: Volume(arrays[m], cfg.spacing) for m in MODALITIES}
    return Case(case_id, vols, label, description, tumor_type)


def synth_cases(n: int, seed: int = 0, cfg: SynthConfig | None = None) -> list[Case]:
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [synth_case(f"synth_{i:03d}", rng, cfg) for i in range(n)]


def synth_generate(n: int, seed: int, out_dir: str | Path, cfg: SynthConfig | None = None) -> DatasetManifest:
    """Write ``n`` synthetic cases plus ``manifest.json`` under ``out_dir``."""
    return save_dataset(synth_cases(n, seed, cfg), out_dir)


def check_case(case: Case) -> None:
    """Assert the core invariants hold; raises :class:`DataError` otherwise."""
    for m, v in case.modalities.items():
        if not np.all(np.isfinite(v.data)):
            raise DataError(f"case {case.case_id}: {m} not finite")
    if case.label is not None:
        r = derive_regions(case.label)
        if np.any(r.et & ~r.tc) or np.any(r.tc & ~r.wt):
            raise DataError(f"case {case.case_id}: region nesting violated")
        t = tissue_masks(case.label)
        if not np.array_equal(r.wt, t["ncr_net"] | t["ed"] | t["et"]):
            raise DataError(f"case {case.case_id}: WT is not the union of tissues")
