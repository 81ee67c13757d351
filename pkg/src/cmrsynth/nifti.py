"""NIfTI read/write for 4D label and image grids plus key:value sidecars.

In memory, 4D grids are indexed [frame][slice][row][col]; on disk they are
stored in NIfTI (x=col, y=row, z=slice, t=frame) order.
"""

from __future__ import annotations

from pathlib import Path

import nibabel as nib
import numpy as np


def sidecar_path(path):
    path = Path(path)
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".meta.txt")


def write_sidecar(path, items):
    lines = [f"{key}: {value}" for key, value in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path):
    items = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        items[key.strip()] = value.strip()
    return items


def save_4d(path, data, spacing, frame_dt, extra=None):
    """Write a [frame][slice][row][col] grid with in-plane/slice spacing (mm) and frame step (s)."""
    arr = np.ascontiguousarray(np.transpose(data, (3, 2, 1, 0)))
    affine = np.diag([spacing[0], spacing[0], spacing[1], 1.0])
    img = nib.Nifti1Image(arr, affine)
    img.header.set_zooms((spacing[0], spacing[0], spacing[1], frame_dt))
    img.header.set_xyzt_units("mm", "sec")
    img.header.set_data_dtype(arr.dtype)
    nib.save(img, str(path))
    if extra is not None:
        write_sidecar(sidecar_path(path), extra)


def load_4d(path):
    """Return (data[frame][slice][row][col], (in-plane, slice) spacing, frame_dt, sidecar dict)."""
    img = nib.load(str(path))
    arr = np.asarray(img.dataobj)
    if arr.ndim == 3:
        arr = arr[..., None]
    zooms = img.header.get_zooms()
    data = np.ascontiguousarray(np.transpose(arr, (3, 2, 1, 0)))
    spacing = (float(zooms[0]), float(zooms[2]))
    frame_dt = float(zooms[3]) if len(zooms) > 3 else 0.0
    meta_file = sidecar_path(path)
    meta = read_sidecar(meta_file) if meta_file.exists() else {}
    return data, spacing, frame_dt, meta


def save_label_volume(labels, path):
    """Write a LabelVolume4D as NIfTI with frame times in the sidecar."""
    dt = labels.frame_times[1] - labels.frame_times[0] if len(labels.frame_times) > 1 else 0.0
    extra = {
        "kind": "labels",
        "spacing_in_plane_mm": repr(float(labels.spacing[0])),
        "spacing_slice_mm": repr(float(labels.spacing[1])),
        "frame_times_s": " ".join(repr(float(t)) for t in labels.frame_times),
        "params_hash": labels.params_hash or "none",
    }
    save_4d(path, labels.data.astype(np.uint8), labels.spacing, dt, extra)


def load_label_volume(path):
    from .phantom import LabelVolume4D

    data, spacing, dt, meta = load_4d(path)
    if "spacing_in_plane_mm" in meta:
        # header zooms are float32; the sidecar keeps full precision
        spacing = (float(meta["spacing_in_plane_mm"]), float(meta["spacing_slice_mm"]))
    if "frame_times_s" in meta:
        times = tuple(float(v) for v in meta["frame_times_s"].split())
    else:
        times = tuple(k * dt for k in range(data.shape[0]))
    params_hash = meta.get("params_hash")
    return LabelVolume4D(
        data=data.astype(np.uint8),
        spacing=spacing,
        frame_times=times,
        params_hash=None if params_hash in (None, "none") else params_hash,
    )
