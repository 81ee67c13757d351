"""ACDC-style cine MR ingestion and preprocessing into 2D training pairs.

Chain per case: load -> in-plane resample (1.3 mm) -> centre crop (128 px)
-> intensity scaling to [-1, 1] -> split into per-slice image/mask pairs.
Volumes are held as arrays indexed [slice][row][col].
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline

CANONICAL_LABELS = (0, 1, 2, 3)
ACDC_LABEL_MAP = {0: 0, 1: 1, 2: 2, 3: 3}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    target_spacing: float = 1.3
    crop_size: int = 128
    intensity_mode: str = "percentile"
    lower_percentile: float = 1.0
    upper_percentile: float = 99.0
    image_glob: str = "*/*_frame[0-9][0-9].nii.gz"
    mask_suffix: str = "_gt"
    seed: int = 0
    val_fraction: float = 0.0
    n_jobs: int = 1


@dataclass(frozen=True, eq=False)
class CaseRecord:
    case_id: str
    image: np.ndarray
    mask: np.ndarray
    phase: str
    spacing: tuple  # (row mm, col mm, slice mm)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DataError(f"shape mismatch: image {self.image.shape} vs mask {self.mask.shape}")
        if any(not s > 0 for s in self.spacing):
            raise DataError(f"non-positive spacing {self.spacing}")
        extra = set(np.unique(self.mask).tolist()) - set(CANONICAL_LABELS)
        if extra:
            raise DataError(f"unknown label value(s) {sorted(extra)}")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    image: np.ndarray
    label: np.ndarray
    case_id: str
    phase: str
    slice_index: int

    @property
    def provenance(self):
        return (self.case_id, self.phase, self.slice_index)


def _mask_path_for(image_path, suffix):
    name = image_path.name
    stem, ext = (name[:-7], ".nii.gz") if name.endswith(".nii.gz") else (image_path.stem, image_path.suffix)
    return image_path.with_name(f"{stem}{suffix}{ext}")


def load_case(image_path, mask_path=None, phase="ED", case_id=None, label_map=None, mask_suffix="_gt"):
    """Load one annotated volume (image + aligned segmentation) from NIfTI.

    Mask values are remapped through ``label_map`` (ACDC ids by default) to
    the canonical {0: bg, 1: RV pool, 2: LV myo, 3: LV pool}.
    """
    image_path = Path(image_path)
    mask_path = Path(mask_path) if mask_path is not None else _mask_path_for(image_path, mask_suffix)
    for p in (image_path, mask_path):
        if not p.exists():
            raise DataError(f"missing file: {p}")
    img = nib.load(str(image_path))
    seg = nib.load(str(mask_path))
    image = np.asarray(img.dataobj, dtype=np.float32)
    mask_raw = np.asarray(seg.dataobj)
    if image.ndim == 2:
        image = image[..., None]
    if mask_raw.ndim == 2:
        mask_raw = mask_raw[..., None]
    if image.shape != mask_raw.shape:
        raise DataError(f"shape mismatch: image {image.shape} vs mask {mask_raw.shape}")

    label_map = ACDC_LABEL_MAP if label_map is None else label_map
    values = np.unique(mask_raw)
    unknown = [v for v in values.tolist() if v not in label_map]
    if unknown:
        raise DataError(f"unknown label value(s) {unknown} in {mask_path}")
    lut_keys = np.array(sorted(label_map), dtype=np.int64)
    lut_vals = np.array([label_map[k] for k in lut_keys], dtype=np.uint8)
    mask = lut_vals[np.searchsorted(lut_keys, mask_raw.astype(np.int64))]

    zooms = img.header.get_zooms()[:3]
    # pixdim is float32 on disk; its shortest decimal form recovers e.g. 1.37 rather than 1.3700000047683716
    zooms = tuple(float(str(np.float32(z))) for z in zooms) + (1.0,) * (3 - len(zooms))
    # NIfTI (x, y, z) -> [slice][row=x][col=y]
    return CaseRecord(
        case_id=case_id or image_path.name.split("_")[0],
        image=np.ascontiguousarray(np.transpose(image, (2, 0, 1))),
        mask=np.ascontiguousarray(np.transpose(mask, (2, 0, 1))),
        phase=phase,
        spacing=zooms,
    )


_INFO_RE = re.compile(r"^\s*(ED|ES)\s*:\s*(\d+)\s*$", re.MULTILINE)


def load_patient(directory, config=DataConfig()):
    """Load the annotated phases of one ACDC patient directory.

    ``Info.cfg`` (``ED: n`` / ``ES: m``) selects the frames when present;
    otherwise every image with a mask partner is loaded, the first taken as
    ED and the rest as ES.
    """
    directory = Path(directory)
    pid = directory.name
    info = directory / "Info.cfg"
    records = []
    if info.exists():
        for phase, frame in _INFO_RE.findall(info.read_text()):
            path = directory / f"{pid}_frame{int(frame):02d}.nii.gz"
            records.append(load_case(path, phase=phase, case_id=pid, mask_suffix=config.mask_suffix))
        if not records:
            raise DataError(f"no ED/ES entries in {info}")
        return records
    images = sorted(
        p for p in directory.glob("*.nii*")
        if config.mask_suffix not in p.name and _mask_path_for(p, config.mask_suffix).exists()
    )
    if not images:
        raise DataError(f"missing file: no annotated volumes in {directory}")
    for k, path in enumerate(images):
        records.append(load_case(path, phase="ED" if k == 0 else "ES", case_id=pid, mask_suffix=config.mask_suffix))
    return records


def resample_inplane(record, target_spacing=1.3):
    """Resample rows/cols to ``target_spacing`` mm; slice axis untouched.

    Bilinear for the image, nearest-neighbour for the mask. Output size per
    axis is round(n * spacing / target); sample centres are aligned so that
    the field of view is preserved.
    """
    if not target_spacing > 0:
        raise DataError(f"non-positive spacing: target {target_spacing}")
    sr, sc, sz = record.spacing
    n_slices, n_rows, n_cols = record.image.shape
    out_rows = int(np.floor(n_rows * sr / target_spacing + 0.5))
    out_cols = int(np.floor(n_cols * sc / target_spacing + 0.5))
    r = (np.arange(out_rows) + 0.5) * (target_spacing / sr) - 0.5
    c = (np.arange(out_cols) + 0.5) * (target_spacing / sc) - 0.5

    zz, rr, cc = np.meshgrid(np.arange(n_slices), r, c, indexing="ij")
    # kept in float64; scale_intensity emits the final float32
    image = ndimage.map_coordinates(record.image.astype(np.float64), [zz, rr, cc], order=1, mode="nearest")
    ri = np.clip(np.floor(r + 0.5).astype(int), 0, n_rows - 1)
    ci = np.clip(np.floor(c + 0.5).astype(int), 0, n_cols - 1)
    mask = record.mask[:, ri][:, :, ci]
    return replace(record, image=image, mask=np.ascontiguousarray(mask), spacing=(target_spacing, target_spacing, sz))


def center_crop(record, size=128):
    """Centred size x size in-plane crop, symmetric zero/background padding first if smaller."""
    image, mask = record.image, record.mask
    pads = []
    for n in image.shape[1:]:
        deficit = max(size - n, 0)
        pads.append((deficit // 2, deficit - deficit // 2))
    if any(p != (0, 0) for p in pads):
        image = np.pad(image, [(0, 0)] + pads, constant_values=0)
        mask = np.pad(mask, [(0, 0)] + pads, constant_values=0)
    r0 = (image.shape[1] - size) // 2
    c0 = (image.shape[2] - size) // 2
    return replace(
        record,
        image=np.ascontiguousarray(image[:, r0:r0 + size, c0:c0 + size]),
        mask=np.ascontiguousarray(mask[:, r0:r0 + size, c0:c0 + size]),
    )


def intensity_bounds(volume, mode="percentile", lower=1.0, upper=99.0):
    v = np.asarray(volume, dtype=np.float64)
    if mode == "minmax":
        return float(v.min()), float(v.max())
    if mode != "percentile":
        raise DataError(f"unknown intensity mode {mode!r}")
    # lower/higher order statistics make the mapping idempotent
    lo = float(np.percentile(v, lower, method="lower"))
    hi = float(np.percentile(v, upper, method="higher"))
    if hi <= lo:
        lo, hi = float(v.min()), float(v.max())
    return lo, hi


def scale_intensity(volume, mode="percentile", lower=1.0, upper=99.0):
    """Clip to per-volume [p_lower, p_upper] and map affinely onto [-1, 1]."""
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = intensity_bounds(v, mode, lower, upper)
    if not hi > lo:
        raise DataError("degenerate intensity range")
    out = (np.clip(v, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


class _Stateless(TransformerMixin, BaseEstimator):
    """Per-volume stage with nothing to learn; usable without fit."""

    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True


class InplaneResampler(_Stateless):
    def __init__(self, target_spacing=1.3):
        self.target_spacing = target_spacing

    def transform(self, X):
        return [resample_inplane(r, self.target_spacing) for r in X]


class CenterCropper(_Stateless):
    def __init__(self, size=128):
        self.size = size

    def transform(self, X):
        return [center_crop(r, self.size) for r in X]


class IntensityScaler(_Stateless):
    """Per-volume intensity scaling to [-1, 1] (percentile clip or min-max)."""

    def __init__(self, mode="percentile", lower=1.0, upper=99.0):
        self.mode = mode
        self.lower = lower
        self.upper = upper

    def transform(self, X):
        return [
            replace(r, image=scale_intensity(r.image, self.mode, self.lower, self.upper))
            for r in X
        ]


def make_preprocessor(config=DataConfig()):
    return Pipeline([
        ("resample", InplaneResampler(config.target_spacing)),
        ("crop", CenterCropper(config.crop_size)),
        ("scale", IntensityScaler(config.intensity_mode, config.lower_percentile, config.upper_percentile)),
    ])


def case_to_pairs(record):
    return [
        TrainingPair(
            image=record.image[k],
            label=record.mask[k],
            case_id=record.case_id,
            phase=record.phase,
            slice_index=k,
        )
        for k in range(record.image.shape[0])
    ]


def _load_source(source, config):
    if isinstance(source, CaseRecord):
        return [source]
    path = Path(source)
    if path.is_dir():
        return load_patient(path, config)
    return [load_case(path, mask_suffix=config.mask_suffix)]


def build_training_set(sources, config=DataConfig()):
    """Preprocess every case and flatten into a seeded-shuffled list of TrainingPair.

    ``sources`` may mix CaseRecord objects, ACDC patient directories and
    image file paths.
    """
    sources = list(sources)
    if not sources:
        raise DataError("no cases given")
    pre = make_preprocessor(config)

    def process(source):
        return pre.transform(_load_source(source, config))

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            processed = list(pool.map(process, sources))
    else:
        processed = [process(s) for s in sources]

    pairs = [p for records in processed for r in records for p in case_to_pairs(r)]
    if not pairs:
        raise DataError("empty training set")
    pairs.sort(key=lambda p: p.provenance)
    order = np.random.default_rng(config.seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def split_by_case(pairs, val_fraction, seed=0):
    """Deterministic (train, validation) split that never separates a case."""
    case_ids = sorted({p.case_id for p in pairs})
    n_val = int(round(val_fraction * len(case_ids)))
    if val_fraction > 0 and len(case_ids) > 1:
        n_val = min(max(n_val, 1), len(case_ids) - 1)
    chosen = np.random.default_rng(seed).permutation(len(case_ids))[:n_val]
    val_ids = {case_ids[i] for i in chosen}
    return [p for p in pairs if p.case_id not in val_ids], [p for p in pairs if p.case_id in val_ids]


INDEX_NAME = "index.tsv"


def write_cache(pairs, directory):
    """One .npz per pair plus a tab-separated manifest (case id, phase, slice, path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, pair in enumerate(pairs):
        name = f"{k:06d}_{pair.case_id}_{pair.phase}_{pair.slice_index:02d}.npz"
        np.savez(directory / name, image=pair.image, label=pair.label)
        lines.append(f"{pair.case_id}\t{pair.phase}\t{pair.slice_index}\t{name}")
    (directory / INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory / INDEX_NAME


def read_cache(directory):
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise DataError(f"missing file: {index}")
    pairs = []
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        case_id, phase, slice_index, name = line.split("\t")
        with np.load(directory / name) as npz:
            pairs.append(TrainingPair(npz["image"], npz["label"], case_id, phase, int(slice_index)))
    if not pairs:
        raise DataError("empty training set")
    return pairs
