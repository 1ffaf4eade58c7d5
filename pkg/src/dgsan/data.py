"""Case schemas, manifest I/O, synthetic longitudinal nodules and fold splits.

Volumes are stored as raw little-endian float32 (``.f32``), row-major in
(depth, height, width) order. Manifests are JSON; volume paths inside a
manifest are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

VOLUME_SHAPE = (16, 64, 64)
VOLUME_BYTES = int(np.prod(VOLUME_SHAPE)) * 4

CLINICAL_FIELDS = ("age", "sex", "smoking", "screening_outcome", "diameter")
NUMERIC_FIELDS = ("age", "smoking", "diameter")
CLINICAL_DIM = 6

# clinical vector slots
_SLOT_AGE, _SLOT_SEX, _SLOT_SMOKING, _SLOT_OUTCOME1, _SLOT_OUTCOME2, _SLOT_DIAMETER = range(6)


class DataError(ValueError):
    """Raised for malformed manifests, volumes or clinical records."""


@dataclass
class ClinicalRecord:
    age: float = 0.0
    sex: int = 0
    smoking: float = 0.0
    screening_outcome: int = 0
    diameter: float = 0.0
    present_mask: Dict[str, bool] = field(
        default_factory=lambda: {name: True for name in CLINICAL_FIELDS}
    )

    def __post_init__(self):
        mask = {name: bool(self.present_mask.get(name, False)) for name in CLINICAL_FIELDS}
        unknown = set(self.present_mask) - set(CLINICAL_FIELDS)
        if unknown:
            raise DataError(f"present_mask has unknown fields {sorted(unknown)}")
        if not any(mask.values()):
            raise DataError("clinical record has no present field")
        self.present_mask = mask
        for name in ("age", "smoking", "diameter"):
            if mask[name] and not (np.isfinite(getattr(self, name)) and getattr(self, name) >= 0):
                raise DataError(f"clinical field {name!r} must be finite and nonnegative")
        if mask["sex"] and self.sex not in (0, 1):
            raise DataError("clinical field 'sex' must be 0 or 1")
        if mask["screening_outcome"] and self.screening_outcome not in (0, 1, 2):
            raise DataError("clinical field 'screening_outcome' must be 0, 1 or 2")

    def to_json(self) -> dict:
        out = {name: getattr(self, name) for name in CLINICAL_FIELDS}
        out["present_mask"] = dict(self.present_mask)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ClinicalRecord":
        if not isinstance(obj, dict):
            raise DataError("field 'clinical' must be an object")
        if "present_mask" not in obj:
            raise DataError("field 'clinical.present_mask' is missing")
        kwargs = {name: obj.get(name, 0) for name in CLINICAL_FIELDS}
        return cls(present_mask=dict(obj["present_mask"]), **kwargs)


@dataclass
class VolumePair:
    t0: np.ndarray
    t1: np.ndarray

    def __post_init__(self):
        for name in ("t0", "t1"):
            v = getattr(self, name)
            if v.shape != VOLUME_SHAPE:
                raise DataError(f"volume {name} has shape {v.shape}, expected {VOLUME_SHAPE}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"volume {name} has non-finite values")


@dataclass
class Case:
    id: str
    volumes: VolumePair
    clinical: ClinicalRecord
    label: int


@dataclass
class CaseEntry:
    """Manifest row: a case whose volumes have not been read yet."""

    id: str
    t0_path: Path
    t1_path: Path
    clinical: ClinicalRecord
    label: int


@dataclass
class DatasetManifest:
    cases: List[CaseEntry]
    normalization_stats: Dict[str, Dict[str, float]]
    root: Optional[Path] = None

    def ids(self) -> List[str]:
        return [c.id for c in self.cases]

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cases], dtype=np.int64)

    def entry(self, case_id: str) -> CaseEntry:
        index = self.__dict__.get("_index")
        if index is None or len(index) != len(self.cases):
            index = self.__dict__["_index"] = {c.id: c for c in self.cases}
        try:
            return index[case_id]
        except KeyError:
            raise KeyError(f"unknown case id {case_id!r}") from None

    def subset(self, ids) -> "DatasetManifest":
        wanted = set(ids)
        return DatasetManifest(
            [c for c in self.cases if c.id in wanted], dict(self.normalization_stats), self.root
        )

    def to_json(self) -> dict:
        def rel(p: Path) -> str:
            if self.root is not None:
                try:
                    return str(Path(p).relative_to(self.root))
                except ValueError:
                    pass
            return str(p)

        return {
            "cases": [
                {
                    "id": c.id,
                    "t0_path": rel(c.t0_path),
                    "t1_path": rel(c.t1_path),
                    "clinical": c.clinical.to_json(),
                    "label": c.label,
                }
                for c in self.cases
            ],
            "normalization_stats": self.normalization_stats,
        }


@dataclass
class FoldSplit:
    k: int
    assignments: Dict[str, int]

    def fold_ids(self, fold: int) -> List[str]:
        return [cid for cid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [cid for cid, f in self.assignments.items() if f != fold]


# ---------------------------------------------------------------------------
# volume files


def write_atomic(path, data: bytes) -> None:
    """Write via a sibling temp file and rename; an interrupted write leaves nothing behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def save_volume(path, volume: np.ndarray) -> None:
    volume = np.asarray(volume)
    if volume.shape != VOLUME_SHAPE:
        raise DataError(f"volume shape {volume.shape}, expected {VOLUME_SHAPE}")
    write_atomic(path, volume.astype("<f4", copy=False).tobytes(order="C"))


def read_volume(path) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    if size != VOLUME_BYTES:
        raise DataError(f"{path}: {size} bytes, expected {VOLUME_BYTES}")
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(VOLUME_SHAPE).astype(np.float32)


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    """Per-volume min-max to [0, 1]; constant volumes map to zeros."""
    volume = np.asarray(volume, dtype=np.float32)
    lo, hi = volume.min(), volume.max()
    if hi == lo:
        return np.zeros_like(volume)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: top level must be an object")
    cases_json = _require(obj, "cases", "manifest")
    stats = obj.get("normalization_stats", {})
    if not isinstance(cases_json, list):
        raise DataError("manifest: field 'cases' must be a list")
    if not isinstance(stats, dict):
        raise DataError("manifest: field 'normalization_stats' must be an object")
    root = path.parent
    cases, seen = [], set()
    for i, row in enumerate(cases_json):
        where = f"cases[{i}]"
        cid = str(_require(row, "id", where))
        if cid in seen:
            raise DataError(f"{where}: duplicate id {cid!r}")
        seen.add(cid)
        label = _require(row, "label", where)
        if label not in (0, 1):
            raise DataError(f"{where}: field 'label' must be 0 or 1, got {label!r}")
        try:
            clinical = ClinicalRecord.from_json(_require(row, "clinical", where))
        except DataError as exc:
            raise DataError(f"{where} (case {cid}): {exc}") from exc
        paths = []
        for key in ("t0_path", "t1_path"):
            p = root / str(_require(row, key, where))
            if not p.is_file():
                raise DataError(f"case {cid}: dangling volume path {key}={p}")
            if p.stat().st_size != VOLUME_BYTES:
                raise DataError(
                    f"case {cid}: {key} has {p.stat().st_size // 4} values, "
                    f"expected {VOLUME_BYTES // 4} for shape {VOLUME_SHAPE}"
                )
            paths.append(p)
        cases.append(CaseEntry(cid, paths[0], paths[1], clinical, int(label)))
    return DatasetManifest(cases, stats, root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    if manifest.root is None:
        manifest.root = path.parent
    write_atomic(path, json.dumps(manifest.to_json(), indent=2).encode())


def load_case(manifest: DatasetManifest, case_id: str) -> Case:
    entry = manifest.entry(case_id)
    t0 = minmax_normalize(read_volume(entry.t0_path))
    t1 = minmax_normalize(read_volume(entry.t1_path))
    return Case(entry.id, VolumePair(t0, t1), entry.clinical, entry.label)


# ---------------------------------------------------------------------------
# clinical encoding


def compute_clinical_stats(records) -> Dict[str, Dict[str, float]]:
    """Mean/std of each numeric field over the records where it is present."""
    stats = {}
    for name in NUMERIC_FIELDS:
        vals = np.array(
            [getattr(r, name) for r in records if r.present_mask[name]], dtype=np.float64
        )
        if vals.size == 0:
            stats[name] = {"mean": 0.0, "std": 0.0}
        else:
            stats[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return stats


def normalize_clinical(record: ClinicalRecord, stats) -> np.ndarray:
    """Fixed-length clinical vector: [age, sex, smoking, outcome==1, outcome==2, diameter].

    Numeric fields are z-scored with ``stats``; absent fields stay 0.
    """
    for name in NUMERIC_FIELDS:
        if name not in stats or "mean" not in stats[name] or "std" not in stats[name]:
            raise DataError(f"normalization stats missing field {name!r}")
    vec = np.zeros(CLINICAL_DIM, dtype=np.float32)
    mask = record.present_mask
    for name, slot in (("age", _SLOT_AGE), ("smoking", _SLOT_SMOKING), ("diameter", _SLOT_DIAMETER)):
        if mask[name]:
            std = stats[name]["std"]
            vec[slot] = 0.0 if std <= 0 else (getattr(record, name) - stats[name]["mean"]) / std
    if mask["sex"]:
        vec[_SLOT_SEX] = float(record.sex)
    if mask["screening_outcome"]:
        vec[_SLOT_OUTCOME1] = float(record.screening_outcome == 1)
        vec[_SLOT_OUTCOME2] = float(record.screening_outcome == 2)
    return vec


# ---------------------------------------------------------------------------
# synthetic longitudinal nodules

NOISE_STD = 0.05
VOXEL_MM = 0.7


def _nodule(rng: np.random.Generator, center, radius: float, spic_amp: float, phases) -> np.ndarray:
    """Soft ellipsoidal nodule with a radially perturbed boundary.

    Depth semi-axis is half the in-plane radius (anisotropic RoI).
    """
    d, h, w = VOLUME_SHAPE
    z, y, x = np.meshgrid(
        np.arange(d) - center[0], np.arange(h) - center[1], np.arange(w) - center[2], indexing="ij"
    )
    zs = z * 2.0
    rho = np.sqrt(zs**2 + y**2 + x**2) + 1e-9
    theta = np.arctan2(y, x)
    polar = np.arccos(np.clip(zs / rho, -1, 1))
    f1, f2, f3 = phases
    bumps = (
        np.cos(5 * theta + f1) * np.sin(polar) ** 2
        + 0.7 * np.cos(8 * theta + f2)
        + 0.5 * np.cos(3 * polar + f3)
    ) / 2.2
    boundary = radius * (1.0 + spic_amp * bumps)
    return 1.0 / (1.0 + np.exp(-(boundary - rho) * 2.5))


def _synth_case(rng: np.random.Generator, label: int):
    r0 = rng.uniform(8.0, 12.0)
    if label == 1:
        r1 = r0 * rng.uniform(1.3, 1.7)
        amp1 = rng.uniform(0.3, 0.5)
        amp0 = amp1 * rng.uniform(0.2, 0.6)
    else:
        r1 = r0 * (1.0 + rng.uniform(-0.05, 0.05))
        amp0 = rng.uniform(0.0, 0.05)
        amp1 = rng.uniform(0.0, 0.05)
    center = (rng.uniform(7.0, 9.0), rng.uniform(28.0, 36.0), rng.uniform(28.0, 36.0))
    drift = np.array([0.0, *rng.uniform(-1.5, 1.5, size=2)])
    phases = rng.uniform(0, 2 * np.pi, size=3)
    intensity = rng.uniform(0.7, 0.9)
    background = rng.uniform(0.1, 0.2)
    vols = []
    for radius, amp, c in ((r0, amp0, center), (r1, amp1, np.asarray(center) + drift)):
        v = background + (intensity - background) * _nodule(rng, c, radius, amp, phases)
        v = v + rng.normal(0.0, NOISE_STD, size=VOLUME_SHAPE)
        vols.append(minmax_normalize(v.astype(np.float32)))

    if label == 1:
        age = rng.normal(66.0, 6.0)
        smoking = rng.normal(52.0, 18.0)
        outcome = int(rng.choice(3, p=[0.2, 0.35, 0.45]))
    else:
        age = rng.normal(60.0, 6.0)
        smoking = rng.normal(38.0, 18.0)
        outcome = int(rng.choice(3, p=[0.45, 0.35, 0.2]))
    clinical = ClinicalRecord(
        age=float(max(age, 30.0)),
        sex=int(rng.integers(0, 2)),
        smoking=float(max(smoking, 0.0)),
        screening_outcome=outcome,
        diameter=float(2.0 * r0 * VOXEL_MM),
    )
    return vols[0], vols[1], clinical, {"r0": r0, "r1": r1, "amp0": amp0, "amp1": amp1}


def synthesize_dataset(n_cases: int, seed: int, out_dir) -> DatasetManifest:
    """Write ``n_cases`` synthetic two-time-point cases plus ``manifest.json``.

    Malignant nodules grow by 30-70% in radius and carry a spiculated boundary
    (amplitude 0.3-0.5 of the radius at follow-up); benign ones change radius by
    at most 5% with amplitude <= 0.05. Age and pack-years are shifted upward for
    malignant cases.
    """
    if n_cases < 2:
        raise DataError("n_cases must be >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {out_dir}")
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n_cases)])
    rng.shuffle(labels)
    width = max(4, len(str(n_cases - 1)))
    entries = []
    for i, label in enumerate(labels):
        cid = f"case{i:0{width}d}"
        case_rng = np.random.default_rng([seed, i])
        t0, t1, clinical, _ = _synth_case(case_rng, int(label))
        p0, p1 = out_dir / f"{cid}_t0.f32", out_dir / f"{cid}_t1.f32"
        save_volume(p0, t0)
        save_volume(p1, t1)
        entries.append(CaseEntry(cid, p0, p1, clinical, int(label)))
    stats = compute_clinical_stats([e.clinical for e in entries])
    manifest = DatasetManifest(entries, stats, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def nodule_volume(volume: np.ndarray, threshold: float = 0.5) -> int:
    """Voxel count above ``threshold`` (a crude nodule size measurement)."""
    return int(np.count_nonzero(np.asarray(volume) > threshold))


# ---------------------------------------------------------------------------
# folds


def split_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Label-stratified k-fold assignment, deterministic in ``seed``."""
    n = len(manifest.cases)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds case count {n}")
    rng = np.random.default_rng(seed)
    assignments: Dict[str, int] = {}
    offset = 0
    for label in (1, 0):
        ids = [c.id for c in manifest.cases if c.label == label]
        order = rng.permutation(len(ids))
        for rank, idx in enumerate(order):
            assignments[ids[idx]] = (offset + rank) % k
        offset = (offset + len(ids)) % k
    return FoldSplit(k, {cid: assignments[cid] for cid in manifest.ids()})
