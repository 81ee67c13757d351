"""Label-swap synthesis: drive a trained generator with phantom label sequences."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models import one_hot
from .nifti import load_4d, load_label_volume, read_sidecar, save_4d, save_label_volume, write_sidecar
from .phantom import LabelVolume4D
from .preprocessing import scale_intensity
from .training import load_checkpoint
from .validation import check_label_array

STYLES = ("random", "encode", "fixed")
IMAGES_NAME = "images.nii.gz"
LABELS_NAME = "labels.nii.gz"
PROVENANCE_NAME = "provenance.txt"


class SynthesisError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    """What to synthesize and how to choose the style latent.

    ``style`` is "random" (z ~ N(0, I) from ``seed``), "encode" (mu of
    ``style_image`` through the style encoder) or "fixed" (``z`` as given).
    ``fit_mode`` brings labels onto the model grid: "crop" centre-crops/pads,
    "resample" first resamples to ``target_spacing`` mm with nearest neighbour.
    """

    checkpoint: str | Path
    labels: LabelVolume4D
    style: str = "random"
    style_image: np.ndarray | None = None
    z: np.ndarray | None = None
    seed: int = 0
    output: str | Path | None = None
    per_slice_z: bool = False
    fit_mode: str = "crop"
    target_spacing: float = 1.3
    batch_size: int = 16


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [frames][slices][H][W] float32 in [-1, 1]
    labels: LabelVolume4D
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape != self.labels.data.shape:
            raise SynthesisError(
                f"shape mismatch: images {self.images.shape} vs labels {self.labels.data.shape}"
            )


def file_digest(path, length=16):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:length]


def array_digest(arr, length=16):
    arr = np.ascontiguousarray(arr)
    return hashlib.sha256(arr.dtype.str.encode() + str(arr.shape).encode() + arr.tobytes()).hexdigest()[:length]


def fit_slice(arr, size, fill=0):
    """Centre crop or symmetric pad the last two axes to size x size."""
    pads = [(0, 0)] * (arr.ndim - 2)
    for n in arr.shape[-2:]:
        deficit = max(size - n, 0)
        pads.append((deficit // 2, deficit - deficit // 2))
    arr = np.pad(arr, pads, constant_values=fill)
    r0 = (arr.shape[-2] - size) // 2
    c0 = (arr.shape[-1] - size) // 2
    return np.ascontiguousarray(arr[..., r0:r0 + size, c0:c0 + size])


def fit_labels(labels, size, mode="crop", target_spacing=1.3):
    """LabelVolume4D on the model grid (crop/pad, optionally after NN resampling)."""
    data = labels.data
    spacing = labels.spacing
    if mode == "resample":
        zoom = labels.spacing[0] / target_spacing
        rows, cols = data.shape[-2:]
        ri = np.clip(np.floor((np.arange(int(np.floor(rows * zoom + 0.5))) + 0.5) / zoom).astype(int), 0, rows - 1)
        ci = np.clip(np.floor((np.arange(int(np.floor(cols * zoom + 0.5))) + 0.5) / zoom).astype(int), 0, cols - 1)
        data = data[..., ri, :][..., ci]
        spacing = (target_spacing, spacing[1])
    elif mode != "crop":
        raise SynthesisError(f"unknown fit mode {mode!r}")
    return LabelVolume4D(
        data=fit_slice(data, size).astype(np.uint8),
        spacing=spacing,
        frame_times=labels.frame_times,
        params_hash=labels.params_hash,
    )


def prepare_style_image(image, size):
    """2D style image in [-1, 1] fitted to the model grid (middle slice if 3D)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[img.shape[0] // 2]
    if img.ndim != 2:
        raise SynthesisError(f"style image must be 2D or 3D, got shape {img.shape}")
    if img.min() < -1 or img.max() > 1:
        img = scale_intensity(img)
    return fit_slice(img, size)


def encode_style(model, image):
    """Deterministic style latent: mu of the style encoder (no sampling)."""
    if model.encoder is None:
        raise SynthesisError("style encoding needs a VAE-mode checkpoint (use_vae = true)")
    size = model.config.image_size
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (size, size):
        raise SynthesisError(f"style image must be {size}x{size}, got {img.shape}")
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        mu, _ = model.encoder(torch.as_tensor(img, dtype=dtype)[None, None])
    return mu[0].numpy().copy()


def render_slices(model, labels, z, batch_size=16):
    """Generator outputs for a stack of 2D label maps [n][H][W].

    ``z`` is one latent [latent_dim] shared by every slice, or one per slice
    [n][latent_dim]. Runs in eval mode, so slices are independent of batching.
    """
    cfg = model.config
    labels = check_label_array(labels, cfg.num_classes, ndim=3)
    n = labels.shape[0]
    dtype = next(model.parameters()).dtype
    z = torch.as_tensor(np.asarray(z), dtype=dtype)
    if z.dim() == 1:
        z = z[None].expand(n, -1)
    model.eval()
    out = np.empty(labels.shape, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            mask = one_hot(torch.as_tensor(labels[start:stop]), cfg.num_classes, dtype=dtype)
            out[start:stop] = model.generator(z[start:stop].contiguous(), mask)[:, 0].numpy()
    return out


def _style_latent(request, model, n_slices):
    cfg = model.config
    if request.style not in STYLES:
        raise SynthesisError(f"unknown style source {request.style!r}")
    if request.style == "fixed":
        if request.z is None:
            raise SynthesisError("fixed style needs z")
        z = np.asarray(request.z, dtype=np.float64)
        if z.shape != (cfg.latent_dim,):
            raise SynthesisError(f"z must have shape ({cfg.latent_dim},), got {z.shape}")
        return z, f"fixed:{array_digest(z)}"
    if request.style == "encode":
        if request.style_image is None:
            raise SynthesisError("encode style needs style_image")
        img = prepare_style_image(request.style_image, cfg.image_size)
        return encode_style(model, img), f"encode:{array_digest(img)}"
    gen = torch.Generator().manual_seed(int(request.seed))
    shape = (n_slices, cfg.latent_dim) if request.per_slice_z else (cfg.latent_dim,)
    z = torch.randn(shape, generator=gen, dtype=torch.float64).numpy()
    return z, "random-per-slice" if request.per_slice_z else "random"


def synthesize_sequence(request, model=None):
    """Generate a SyntheticDataset whose labels are the request's labels on the model grid."""
    if model is None:
        model, _, _, _, _ = load_checkpoint(request.checkpoint)
    cfg = model.config
    present = np.unique(request.labels.data)
    if present.size and present.max() >= cfg.num_classes:
        raise SynthesisError(
            f"class-count mismatch: labels use {present.tolist()}, model has {cfg.num_classes} classes"
        )
    labels = fit_labels(request.labels, cfg.image_size, request.fit_mode, request.target_spacing)
    frames, slices, h, w = labels.data.shape
    flat = labels.data.reshape(frames * slices, h, w)
    z, style_desc = _style_latent(request, model, flat.shape[0])
    images = render_slices(model, flat, z, request.batch_size).reshape(labels.data.shape)

    ckpt_path = Path(request.checkpoint) if request.checkpoint else None
    provenance = {
        "checkpoint_id": file_digest(ckpt_path) if ckpt_path and ckpt_path.exists() else "in-memory",
        "params_hash": labels.params_hash or "none",
        "style": style_desc,
        "seed": str(request.seed),
        "fit_mode": request.fit_mode,
        "image_size": str(cfg.image_size),
    }
    dataset = SyntheticDataset(images=images, labels=labels, provenance=provenance)
    if request.output is not None:
        export_dataset(dataset, request.output)
    return dataset


def export_dataset(dataset, path, overwrite=False):
    """Write images.nii.gz, labels.nii.gz (+ sidecars) and provenance.txt into ``path``."""
    path = Path(path)
    targets = [path / IMAGES_NAME, path / LABELS_NAME, path / PROVENANCE_NAME]
    if not overwrite and any(t.exists() for t in targets):
        raise FileExistsError(f"refusing to overwrite existing dataset in {path} (pass overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    labels = dataset.labels
    save_label_volume(labels, path / LABELS_NAME)
    dt = labels.frame_times[1] - labels.frame_times[0] if len(labels.frame_times) > 1 else 0.0
    save_4d(path / IMAGES_NAME, dataset.images.astype(np.float32), labels.spacing, dt,
            {"kind": "images", "params_hash": labels.params_hash or "none"})
    write_sidecar(path / PROVENANCE_NAME, dataset.provenance)
    return targets


def load_dataset(path):
    path = Path(path)
    labels = load_label_volume(path / LABELS_NAME)
    images, _, _, _ = load_4d(path / IMAGES_NAME)
    provenance = read_sidecar(path / PROVENANCE_NAME)
    return SyntheticDataset(images=images.astype(np.float32), labels=labels, provenance=provenance)

