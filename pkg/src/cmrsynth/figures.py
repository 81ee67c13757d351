"""Figure-style montages (label maps over synthetic images) and coherence metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

from .phantom import CLASS_NAMES

LABEL_COLORS = np.array([
    [0, 0, 0],        # background
    [40, 110, 230],   # RV pool
    [60, 200, 80],    # LV myocardium
    [230, 60, 50],    # LV pool
], dtype=np.uint8)

GAP = 2


@dataclass(frozen=True)
class MontageInfo:
    path: Path
    rows: int
    cols: int
    cell_size: tuple
    gif_path: Path | None = None

    @property
    def cells(self):
        return self.rows * self.cols


def _label_rgb(labels):
    return LABEL_COLORS[np.clip(labels, 0, len(LABEL_COLORS) - 1)]


def _image_rgb(image):
    gray = np.clip((np.asarray(image) + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def grid_size(rows, cols, cell):
    h, w = cell
    return rows * h + (rows + 1) * GAP, cols * w + (cols + 1) * GAP


def _compose(rows_of_cells):
    rows = len(rows_of_cells)
    cols = len(rows_of_cells[0])
    cell = rows_of_cells[0][0].shape[:2]
    height, width = grid_size(rows, cols, cell)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows_of_cells):
        for c, tile in enumerate(row):
            y = GAP + r * (cell[0] + GAP)
            x = GAP + c * (cell[1] + GAP)
            canvas[y:y + cell[0], x:x + cell[1]] = tile
    return canvas


def render_montage(dataset, axis, index, out_path, indices=None, gif=False):
    """Two-row PNG grid: label maps on top, synthetic images below.

    ``axis="time"`` fixes slice ``index`` and walks frames; ``axis="slice"``
    fixes frame ``index`` and walks slices (apex to base). ``indices``
    restricts the walked positions (default: all). ``gif`` additionally
    writes an animation of label|image pairs along the walked axis.
    """
    images = dataset.images
    labels = dataset.labels.data
    frames, slices = labels.shape[:2]
    if axis == "time":
        if not 0 <= index < slices:
            raise IndexError(f"slice index {index} out of range [0, {slices})")
        walk = range(frames) if indices is None else indices
        pick = [(f, index) for f in walk]
        limit = frames
    elif axis == "slice":
        if not 0 <= index < frames:
            raise IndexError(f"frame index {index} out of range [0, {frames})")
        walk = range(slices) if indices is None else indices
        pick = [(index, s) for s in walk]
        limit = slices
    else:
        raise ValueError(f"axis must be 'time' or 'slice', got {axis!r}")
    positions = [p[0] if axis == "time" else p[1] for p in pick]
    if not positions or any(not 0 <= k < limit for k in positions):
        raise IndexError(f"{axis} indices {list(positions)} out of range [0, {limit})")

    top = [_label_rgb(labels[f, s]) for f, s in pick]
    bottom = [_image_rgb(images[f, s]) for f, s in pick]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_compose([top, bottom])).save(out_path)

    gif_path = None
    if gif:
        gif_path = out_path.with_suffix(".gif")
        frames_rgb = [Image.fromarray(_compose([[t, b]])) for t, b in zip(top, bottom)]
        frames_rgb[0].save(gif_path, save_all=True, append_images=frames_rgb[1:], duration=80, loop=0)
    return MontageInfo(path=out_path, rows=2, cols=len(pick), cell_size=top[0].shape[:2], gif_path=gif_path)


def _ssim(a, b):
    return float(structural_similarity(a, b, data_range=2.0))


def coherence_report(dataset, n_baseline_pairs=200, seed=0):
    """Per-class intensity statistics and adjacent-vs-shuffled structural similarity.

    Adjacent-frame SSIM pairs (f, s)-(f+1, s); adjacent-slice SSIM pairs
    (f, s)-(f, s+1). The baseline draws random pairs that are neither the
    same position nor adjacent in frame or slice.
    """
    images = dataset.images.astype(np.float64)
    labels = dataset.labels.data
    frames, slices = labels.shape[:2]
    if frames < 2 or slices < 2:
        raise ValueError(f"coherence report needs >= 2 frames and >= 2 slices, got {frames}x{slices}")

    report = {}
    for cls, name in CLASS_NAMES.items():
        sel = images[labels == cls]
        report[f"{name}_mean"] = float(sel.mean()) if sel.size else float("nan")
        report[f"{name}_std"] = float(sel.std()) if sel.size else float("nan")

    frame_pairs = [_ssim(images[f, s], images[f + 1, s]) for s in range(slices) for f in range(frames - 1)]
    slice_pairs = [_ssim(images[f, s], images[f, s + 1]) for f in range(frames) for s in range(slices - 1)]

    rng = np.random.default_rng(seed)
    baseline = []
    while len(baseline) < n_baseline_pairs:
        f1, f2 = rng.integers(frames, size=2)
        s1, s2 = rng.integers(slices, size=2)
        if abs(int(f1) - int(f2)) + abs(int(s1) - int(s2)) < 2:
            continue
        baseline.append(_ssim(images[f1, s1], images[f2, s2]))

    report["adjacent_frame_ssim"] = float(np.mean(frame_pairs))
    report["adjacent_slice_ssim"] = float(np.mean(slice_pairs))
    report["shuffled_baseline_ssim"] = float(np.mean(baseline))
    report["baseline_pairs"] = len(baseline)
    return report


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["metric\tvalue"] + [f"{k}\t{v}" for k, v in report.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
