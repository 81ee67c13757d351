"""Controllable analytic 4D heart phantom producing short-axis label sequences.

The left ventricle is a thick-walled prolate half-ellipsoid truncated by a
(slightly oblique) base plane; the right ventricle is a laterally offset
ellipsoid with the LV epicardium carved out, which yields a crescent in the
short-axis view. Every surface is an implicit quadric, so voxelization is a
containment test evaluated at voxel centers.

Class ids follow the ACDC convention: 0 background, 1 RV blood pool,
2 LV myocardium, 3 LV blood pool.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

BACKGROUND, RV_POOL, LV_MYO, LV_POOL = 0, 1, 2, 3
CLASS_NAMES = {0: "background", 1: "rv_pool", 2: "lv_myocardium", 3: "lv_pool"}

ED_INDEX, ES_INDEX = 0, 2

# Reference shape at geometric_scale == 1, mm. Overall size is re-solved per
# frame from the volume curve, so only proportions matter here.
ENDO_AXES_REF = (27.0, 25.0, 65.0)
RV_AXES_REF = (22.0, 42.0, 55.0)
RV_CENTER_REF = (-30.0, 0.0, 0.0)

SCALE_BOUNDS = (0.2, 3.0)
WALL_BOUNDS = (0.0, 60.0)
VOLUME_TOL_ML = 0.1
RV_QUADRATURE_STEP = 0.25


class InvalidParamsError(ValueError):
    """Raised with the complete list of violated parameter constraints."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class GeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    """Control parameters of the heart phantom.

    Volumes are in mL, lengths in mm, times in seconds. ``lv_volumes`` and
    ``phase_fractions`` are ordered (ED, intermediate-1, ES, intermediate-2,
    intermediate-3). ``slice_spacing=None`` divides the apex-to-base extent
    evenly over ``num_slices``.
    """

    cycle_length: float = 1.0
    num_frames: int = 25
    lv_volumes: tuple = (120.0, 85.0, 50.0, 90.0, 115.0)
    phase_fractions: tuple = (0.0, 0.175, 0.35, 0.60, 0.80)
    geometric_scale: tuple = (1.0, 1.0, 1.0)
    myocardial_volume: float = 110.0
    rv_ratio: float = 1.0
    longitudinal_shortening: float = 0.12
    num_slices: int = 18
    in_plane_spacing: float = 1.0
    slice_spacing: float | None = None
    grid_size: int = 128
    base_tilt_deg: float = 10.0

    def __post_init__(self):
        for name in ("lv_volumes", "phase_fractions", "geometric_scale"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Stable SHA-256 of the parameter set, used for provenance."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


PARAM_FIELDS = tuple(f.name for f in fields(PhantomParams))


def validate_params(params):
    """Return ``params`` unchanged, or raise InvalidParamsError listing every violation."""
    errors = []
    if len(params.lv_volumes) != 5:
        errors.append("lv_volumes: exactly five volumes required")
    if len(params.phase_fractions) != 5:
        errors.append("phase_fractions: exactly five fractions required")
    if len(params.geometric_scale) != 3:
        errors.append("geometric_scale: exactly three factors required")

    pf = params.phase_fractions
    if pf:
        if pf[0] != 0.0:
            errors.append("phase_fractions: first fraction must be 0.0")
        if any(not (0.0 <= f < 1.0) for f in pf):
            errors.append("phase_fractions: all fractions must lie in [0, 1)")
        if any(b <= a for a, b in zip(pf, pf[1:])):
            errors.append("phase_fractions: must be strictly increasing")

    vols = params.lv_volumes
    if any(not v > 0 for v in vols):
        errors.append("lv_volumes: all volumes must be > 0")
    if len(vols) == 5 and not vols[ES_INDEX] < vols[ED_INDEX]:
        errors.append("lv_volumes: ES must be < ED")
    if any(not g > 0 for g in params.geometric_scale):
        errors.append("geometric_scale: all factors must be > 0")

    if not params.cycle_length > 0:
        errors.append("cycle_length: must be > 0")
    if not params.myocardial_volume > 0:
        errors.append("myocardial_volume: must be > 0")
    if not params.rv_ratio > 0:
        errors.append("rv_ratio: must be > 0")
    if not 0.0 <= params.longitudinal_shortening <= 0.3:
        errors.append("longitudinal_shortening: must lie in [0, 0.3]")
    if params.num_frames < 1:
        errors.append("num_frames: must be >= 1")
    if params.num_slices < 1:
        errors.append("num_slices: must be >= 1")
    if params.grid_size < 1:
        errors.append("grid_size: must be >= 1")
    if not params.in_plane_spacing > 0:
        errors.append("in_plane_spacing: must be > 0")
    if params.slice_spacing is not None and not params.slice_spacing > 0:
        errors.append("slice_spacing: must be > 0")
    if not 0.0 <= params.base_tilt_deg < 45.0:
        errors.append("base_tilt_deg: must lie in [0, 45)")

    if errors:
        raise InvalidParamsError(errors)
    return params


# --------------------------------------------------------------------------
# volume curve


def _pchip_slopes(x, y):
    # Fritsch-Butland weighted harmonic mean at interior knots.
    h = np.diff(x)
    delta = np.diff(y) / h
    d = np.zeros_like(y)
    for k in range(1, len(x) - 1):
        if delta[k - 1] * delta[k] <= 0:
            d[k] = 0.0
            continue
        w1 = 2 * h[k] + h[k - 1]
        w2 = h[k] + 2 * h[k - 1]
        d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])
    return d


def _periodic_knots(params):
    pf = np.asarray(params.phase_fractions, dtype=float)
    v = np.asarray(params.lv_volumes, dtype=float)
    # Two wrapped knots on each side make every slope in [0, 1] interior.
    x = np.concatenate([pf[-2:] - 1.0, pf, pf[:2] + 1.0])
    y = np.concatenate([v[-2:], v, v[:2]])
    return x, y


def lv_volume_curve(params, t_fraction):
    """LV cavity volume (mL) at cycle fraction ``t_fraction``.

    Periodic monotone piecewise-cubic Hermite interpolant through the five
    phase knots; C1 across the cycle wrap and exact at the knots.
    """
    x, y = _periodic_knots(params)
    d = _pchip_slopes(x, y)
    t = np.mod(np.asarray(t_fraction, dtype=float), 1.0)
    k = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    s = (t - x[k]) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    out = h00 * y[k] + h10 * h * d[k] + h01 * y[k + 1] + h11 * h * d[k + 1]
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# analytic geometry


def _cap_fraction(d):
    """Volume of {u <= d} inside the unit ball."""
    if d >= 1.0:
        return 4.0 * math.pi / 3.0
    if d <= -1.0:
        return 0.0
    return math.pi * ((d + 1.0) - (d ** 3 + 1.0) / 3.0)


def ellipsoid_cap_volume(axes, base_offset, tilt):
    """Volume (mm^3) of an origin-centred ellipsoid below the plane z = base_offset + tilt*x."""
    a, b, c = axes
    # plane normal (-tilt, 0, 1) in unit-ball coordinates
    norm = math.hypot(tilt * a, c)
    return a * b * c * _cap_fraction(base_offset / norm)


def _bisect(fn, lo, hi, iters=200):
    flo = fn(lo)
    fhi = fn(hi)
    if flo > 0 or fhi < 0:
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if fn(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _endo_reference_axes(params):
    return tuple(r * g for r, g in zip(ENDO_AXES_REF, params.geometric_scale))


def _tilt(params):
    return math.tan(math.radians(params.base_tilt_deg))


def endo_cavity_volume(params, scale, base_offset=0.0):
    """Analytic LV cavity volume in mL at endocardial scale ``scale``."""
    axes = tuple(scale * a for a in _endo_reference_axes(params))
    return ellipsoid_cap_volume(axes, base_offset, _tilt(params)) / 1000.0


def solve_endo_scale(params, target_volume, base_offset=0.0):
    """Endocardial scale whose truncated cavity holds ``target_volume`` mL.

    Bisection on the closed-form cap volume over the scale bracket
    ``SCALE_BOUNDS``. ``base_offset`` is the base-plane height (mm) on the
    long axis; 0 puts the plane through the ellipsoid centre.
    """
    if not target_volume > 0:
        raise GeometryError(f"unachievable volume: target {target_volume} mL must be > 0")

    def residual(s):
        return endo_cavity_volume(params, s, base_offset) - target_volume

    s = _bisect(residual, *SCALE_BOUNDS)
    if s is None or abs(residual(s)) >= VOLUME_TOL_ML:
        raise GeometryError(
            f"unachievable volume: {target_volume} mL outside scale bracket {SCALE_BOUNDS}"
        )
    return s


def _myocardial_volume(endo_axes, wall, base_offset, tilt):
    epi_axes = tuple(a + wall for a in endo_axes)
    return (
        ellipsoid_cap_volume(epi_axes, base_offset, tilt)
        - ellipsoid_cap_volume(endo_axes, base_offset, tilt)
    ) / 1000.0


def _rv_volume(rv_center, rv_axes, epi_axes, base_offset, tilt, step=RV_QUADRATURE_STEP):
    """RV cavity volume (mL): inside RV ellipsoid, outside LV epicardium, below base.

    Integrates exact chord lengths along y over a fine (x, z) grid.
    """
    cx, cy, cz = rv_center
    ra, rb, rc = rv_axes
    ea, eb, ec = epi_axes
    xs = np.arange(cx - ra + step / 2, cx + ra, step)
    zs = np.arange(cz - rc + step / 2, cz + rc, step)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    below = Z < base_offset + tilt * X

    q_rv = 1.0 - ((X - cx) / ra) ** 2 - ((Z - cz) / rc) ** 2
    half_rv = rb * np.sqrt(np.clip(q_rv, 0.0, None))
    q_epi = 1.0 - (X / ea) ** 2 - (Z / ec) ** 2
    half_epi = eb * np.sqrt(np.clip(q_epi, 0.0, None))

    lo = np.maximum(cy - half_rv, -half_epi)
    hi = np.minimum(cy + half_rv, half_epi)
    overlap = np.clip(hi - lo, 0.0, None)
    chord = np.where(below, 2 * half_rv - overlap, 0.0)
    return float(chord.sum()) * step * step / 1000.0


@dataclass(frozen=True)
class FrameGeometry:
    """Solved surfaces for one frame (all lengths in mm)."""

    t_fraction: float
    lv_volume: float
    base_offset: float
    tilt: float
    endo_axes: tuple
    epi_axes: tuple
    rv_center: tuple
    rv_axes: tuple

    @property
    def wall_thickness(self):
        return self.epi_axes[0] - self.endo_axes[0]


def contraction(params, volume):
    """Normalized contraction in [0, 1]: 0 at ED volume, 1 at ES volume."""
    ed, es = params.lv_volumes[ED_INDEX], params.lv_volumes[ES_INDEX]
    return min(max((ed - volume) / (ed - es), 0.0), 1.0)


def frame_geometry(params, t_fraction, frame_index=None):
    """Solve endocardial scale, wall thickness and RV scale at ``t_fraction``."""
    tilt = _tilt(params)
    volume = lv_volume_curve(params, t_fraction)
    ref = _endo_reference_axes(params)

    ed_scale = solve_endo_scale(params, params.lv_volumes[ED_INDEX], 0.0)
    long_axis_ed = ed_scale * ref[2]
    base_offset = -params.longitudinal_shortening * contraction(params, volume) * long_axis_ed

    where = f" at frame {frame_index}" if frame_index is not None else ""
    try:
        scale = solve_endo_scale(params, volume, base_offset)
    except GeometryError as exc:
        raise GeometryError(f"{exc}{where}") from None
    endo_axes = tuple(scale * a for a in ref)

    wall = _bisect(
        lambda w: _myocardial_volume(endo_axes, w, base_offset, tilt) - params.myocardial_volume,
        *WALL_BOUNDS,
    )
    if wall is None:
        raise GeometryError(f"epicardial solve failed to bracket myocardial volume{where}")
    epi_axes = tuple(a + wall for a in endo_axes)

    g = params.geometric_scale
    rv_center = tuple(scale * c * gi for c, gi in zip(RV_CENTER_REF, g))
    rv_ref = tuple(a * gi for a, gi in zip(RV_AXES_REF, g))
    target_rv = params.rv_ratio * volume
    rv_scale = _bisect(
        lambda s: _rv_volume(rv_center, tuple(s * a for a in rv_ref), epi_axes, base_offset, tilt)
        - target_rv,
        *SCALE_BOUNDS,
        iters=60,
    )
    if rv_scale is None:
        raise GeometryError(f"RV solve failed to bracket {target_rv:.1f} mL{where}")

    return FrameGeometry(
        t_fraction=float(t_fraction),
        lv_volume=volume,
        base_offset=base_offset,
        tilt=tilt,
        endo_axes=endo_axes,
        epi_axes=epi_axes,
        rv_center=rv_center,
        rv_axes=tuple(rv_scale * a for a in rv_ref),
    )


def frame_fractions(params):
    return [k / params.num_frames for k in range(params.num_frames)]


@dataclass(frozen=True)
class SliceGrid:
    """Fixed scanner-frame sampling grid shared by every frame."""

    z_centers: np.ndarray
    x_centers: np.ndarray
    y_centers: np.ndarray
    slice_spacing: float


def slice_grid(params, geometries=None):
    """Short-axis sampling grid covering the heart from apex to base.

    Slice 0 is the most apical. The in-plane field of view is centred on the
    ED bounding box of LV and RV.
    """
    if geometries is None:
        geometries = [frame_geometry(params, t) for t in frame_fractions(params)]
    bottom = min(-g.epi_axes[2] for g in geometries)
    top = max(g.base_offset + g.tilt * g.epi_axes[0] for g in geometries)
    spacing = params.slice_spacing or (top - bottom) / params.num_slices
    z = bottom + (np.arange(params.num_slices) + 0.5) * spacing

    ed = geometries[0]
    x_lo = min(-ed.epi_axes[0], ed.rv_center[0] - ed.rv_axes[0])
    x_hi = max(ed.epi_axes[0], ed.rv_center[0] + ed.rv_axes[0])
    x_mid = 0.5 * (x_lo + x_hi)
    offsets = (np.arange(params.grid_size) - (params.grid_size - 1) / 2) * params.in_plane_spacing
    return SliceGrid(z_centers=z, x_centers=x_mid + offsets, y_centers=offsets, slice_spacing=spacing)


def _inside(X, Y, Z, axes, center=(0.0, 0.0, 0.0)):
    a, b, c = axes
    return ((X - center[0]) / a) ** 2 + ((Y - center[1]) / b) ** 2 + ((Z - center[2]) / c) ** 2 <= 1.0


def rasterize(geometry, grid):
    """Label grid [slices][rows=y][cols=x] for one solved frame."""
    Z, Y, X = np.meshgrid(grid.z_centers, grid.y_centers, grid.x_centers, indexing="ij")
    below = Z < geometry.base_offset + geometry.tilt * X
    endo = _inside(X, Y, Z, geometry.endo_axes) & below
    epi = _inside(X, Y, Z, geometry.epi_axes) & below
    rv = _inside(X, Y, Z, geometry.rv_axes, geometry.rv_center) & below & ~epi

    labels = np.zeros(Z.shape, dtype=np.uint8)
    # lowest precedence first; later writes win
    labels[rv] = RV_POOL
    labels[epi] = LV_MYO
    labels[endo] = LV_POOL
    return labels


def voxelize_frame(params, frame_index, grid=None):
    """Voxelize a single frame into labels[slices][height][width]."""
    validate_params(params)
    if not 0 <= frame_index < params.num_frames:
        raise IndexError(f"frame_index {frame_index} outside [0, {params.num_frames})")
    if grid is None:
        grid = slice_grid(params)
    geom = frame_geometry(params, frame_index / params.num_frames, frame_index)
    return rasterize(geom, grid)


@dataclass
class LabelVolume4D:
    """Integer label grid [frames][slices][height][width] with spacing metadata."""

    data: np.ndarray
    spacing: tuple  # (in-plane mm, slice mm)
    frame_times: tuple
    params_hash: str | None = None
    geometries: list = field(default_factory=list, repr=False, compare=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume_ml(self):
        return self.spacing[0] ** 2 * self.spacing[1] / 1000.0

    def class_volumes(self, cls):
        """Voxel-counted volume (mL) of class ``cls`` per frame."""
        return (self.data == cls).sum(axis=(1, 2, 3)) * self.voxel_volume_ml


def generate_label_sequence(params):
    """Voxelize every frame of one cardiac cycle into a LabelVolume4D."""
    validate_params(params)
    geoms = [frame_geometry(params, t, k) for k, t in enumerate(frame_fractions(params))]
    grid = slice_grid(params, geoms)
    data = np.stack([rasterize(g, grid) for g in geoms])
    times = tuple(k * params.cycle_length / params.num_frames for k in range(params.num_frames))
    return LabelVolume4D(
        data=data,
        spacing=(params.in_plane_spacing, float(grid.slice_spacing)),
        frame_times=times,
        params_hash=params.digest(),
        geometries=geoms,
    )


def params_from_mapping(mapping):
    """Build PhantomParams from string or native values keyed by field name."""
    unknown = sorted(set(mapping) - set(PARAM_FIELDS))
    if unknown:
        raise InvalidParamsError([f"{k}: unknown phantom parameter" for k in unknown])
    kwargs = {}
    defaults = PhantomParams()
    for name, raw in mapping.items():
        default = getattr(defaults, name)
        kwargs[name] = _coerce(name, raw, default)
    return PhantomParams(**kwargs)


def _coerce(name, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        if name == "slice_spacing":
            return None if text.lower() in ("", "auto", "none") else float(text)
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise InvalidParamsError([f"{name}: cannot parse {raw!r}"]) from None
