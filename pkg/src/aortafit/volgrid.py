"""Regular 3D voxel grids.

Scalar volumes and 3-vector fields on a regular grid, trilinear sampling with
edge clamping, intensity normalization, isotropic resampling, and the
crop/scale/pad step that brings a volume to a fixed cubic shape.

Conventions
-----------
* Voxel index ``(i, j, k)`` runs along array axes 0, 1, 2. A continuous voxel
  coordinate ``p`` maps to world mm as ``world = origin + p * spacing``;
  ``origin`` is the center of voxel (0, 0, 0).
* Vector fields store components in voxel units: one unit of component ``a``
  is one voxel step along axis ``a``. Conversion to mm multiplies by spacing.
* Sampling outside the grid clamps to the boundary face (edge padding), so
  every sample is total.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridGeom",
    "Volume3D",
    "VectorField3D",
    "trilinear_sample",
    "trilinear_sample_vjp",
    "normalize_intensity",
    "resample_isotropic",
    "crop_scale_pad",
    "save_volume",
    "load_volume",
]


@dataclass(frozen=True)
class GridGeom:
    """Geometry of a regular voxel grid: dims (H, W, D), mm spacing, mm origin."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing, origin must each have 3 entries")
        if any(d < 2 for d in dims):
            raise ValueError(f"grid dims must be >= 2 per axis, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"grid spacing must be > 0 per axis, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.dims

    def world_to_voxel(self, points_mm):
        """Map mm positions to continuous voxel coordinates."""
        pts = np.asarray(points_mm, dtype=float)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, points_vox):
        """Map continuous voxel coordinates to mm positions."""
        pts = np.asarray(points_vox, dtype=float)
        return np.asarray(self.origin) + pts * np.asarray(self.spacing)

    def physical_extent(self):
        """Extent in mm per axis, counting whole voxels (dims * spacing)."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


def _check_data(geom, data, ncomp):
    expect = geom.dims if ncomp == 1 else geom.dims + (3,)
    if data.shape != expect:
        raise ValueError(f"data shape {data.shape} does not match grid {expect}")


@dataclass(frozen=True)
class Volume3D:
    """Scalar volume on a regular grid. ``degenerate`` flags an all-constant source."""

    geom: GridGeom
    data: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_data(self.geom, data, 1)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class VectorField3D:
    """3-vector per voxel, components in voxel units along the matching axis."""

    geom: GridGeom
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_data(self.geom, data, 3)
        if not np.all(np.isfinite(data)):
            raise ValueError("vector field contains non-finite components")
        object.__setattr__(self, "data", data)

    def max_abs(self):
        """Largest per-axis absolute component, in voxel units."""
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0


def _corner_setup(dims, points):
    """Clamp points, locate their cells, and split into base index + fraction.

    Returns (i0, frac, interior) where i0 is the (N, 3) lower corner index,
    frac the (N, 3) offset inside the cell, and interior a (N, 3) bool mask
    that is False where the coordinate was clamped (position derivative 0).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points contain non-finite coordinates")
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    interior = (pts > 0.0) & (pts < hi)
    p = np.clip(pts, 0.0, hi)
    i0 = np.floor(p).astype(np.intp)
    np.minimum(i0, (np.asarray(dims, dtype=np.intp) - 2), out=i0)
    frac = p - i0
    return i0, frac, interior


# The 8 cell corners in (di, dj, dk) order.
_CORNERS = np.array(
    [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)],
    dtype=np.intp,
)


def _corner_flat_indices(dims, i0):
    idx = i0[:, None, :] + _CORNERS[None, :, :]
    return (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]


def _sample_cache(dims, points):
    """Everything about sample positions that both directions of sampling need.

    Returns (flat, interior, wx, wy, wz): flat (N, 8) corner indices into the
    flattened grid, the interior mask from :func:`_corner_setup`, and the
    per-axis weight factors whose product is the trilinear weight. Forward
    sampling and its adjoint at the same points can share one cache.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    i0, frac, interior = _corner_setup(dims, pts)
    f = frac
    g = 1.0 - frac
    wx = np.where(_CORNERS[:, 0], f[:, None, 0], g[:, None, 0])
    wy = np.where(_CORNERS[:, 1], f[:, None, 1], g[:, None, 1])
    wz = np.where(_CORNERS[:, 2], f[:, None, 2], g[:, None, 2])
    flat = _corner_flat_indices(dims, i0)
    return flat, interior, wx, wy, wz


def _sample_from(data, cache):
    flat, _, wx, wy, wz = cache
    w = wx * wy * wz
    if data.ndim == 3:
        vals = data.reshape(-1)[flat]
        return np.einsum("nc,nc->n", w, vals)
    vals = data.reshape(-1, 3)[flat]
    return np.einsum("nc,nck->nk", w, vals)


def _sample_vjp_from(data, dims, cache, cotangent):
    flat, interior, wx, wy, wz = cache
    w = wx * wy * wz
    nvox = dims[0] * dims[1] * dims[2]
    cot = np.asarray(cotangent, dtype=np.float64)

    # d value / d weight = stored corner value; scatter cot * weight into data.
    if data.ndim == 3:
        cot = cot.reshape(-1)
        contrib = w * cot[:, None]
        grad_data = np.bincount(flat.reshape(-1), weights=contrib.reshape(-1), minlength=nvox)
        grad_data = grad_data.reshape(dims)
        corner_vals = data.reshape(-1)[flat]  # (N, 8)
        proj = corner_vals * cot[:, None]
    else:
        cot = cot.reshape(-1, 3)
        contrib = w[:, :, None] * cot[:, None, :]  # (N, 8, 3)
        cols = []
        for k in range(3):
            cols.append(
                np.bincount(flat.reshape(-1), weights=contrib[:, :, k].reshape(-1), minlength=nvox)
            )
        grad_data = np.stack(cols, axis=-1).reshape(dims + (3,))
        corner_vals = data.reshape(-1, 3)[flat]  # (N, 8, 3)
        proj = np.einsum("nck,nk->nc", corner_vals, cot)

    # Position gradient: differentiate the weight product along each axis.
    sx = np.where(_CORNERS[:, 0], 1.0, -1.0)
    sy = np.where(_CORNERS[:, 1], 1.0, -1.0)
    sz = np.where(_CORNERS[:, 2], 1.0, -1.0)
    grad_points = np.empty((len(w), 3), dtype=np.float64)
    grad_points[:, 0] = np.sum(proj * sx * wy * wz, axis=1)
    grad_points[:, 1] = np.sum(proj * wx * sy * wz, axis=1)
    grad_points[:, 2] = np.sum(proj * wx * wy * sz, axis=1)
    grad_points *= interior
    return grad_data, grad_points


def trilinear_sample(fld, points):
    """Sample a volume or vector field at continuous voxel coordinates.

    Parameters
    ----------
    fld : Volume3D or VectorField3D
    points : (N, 3) or (3,) array of continuous voxel coordinates. Points
        outside the grid are clamped to the boundary face.

    Returns
    -------
    (N,) scalars or (N, 3) vectors; a single point returns a scalar / (3,).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    cache = _sample_cache(fld.geom.dims, pts)
    out = _sample_from(fld.data, cache)
    return out[0] if single else out


def trilinear_sample_vjp(fld, points, cotangent):
    """Adjoint of :func:`trilinear_sample`.

    Given d(loss)/d(sampled values), returns

    * ``grad_data``: array shaped like ``fld.data`` with the scattered
      contribution d(loss)/d(stored voxel values),
    * ``grad_points``: (N, 3) contribution d(loss)/d(sample coordinates).
      Clamped coordinates get a zero position gradient.
    """
    dims = fld.geom.dims
    cache = _sample_cache(dims, points)
    return _sample_vjp_from(fld.data, dims, cache, cotangent)


def normalize_intensity(vol):
    """Rescale a volume linearly so values span [0, 1].

    A constant volume cannot be rescaled; it maps to all zeros with the
    ``degenerate`` flag set.
    """
    if vol.data.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        return Volume3D(vol.geom, np.zeros_like(vol.data), degenerate=True)
    return Volume3D(vol.geom, (vol.data - lo) / (hi - lo))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def resample_isotropic(vol, target_spacing):
    """Resample onto an isotropic grid of the given mm spacing.

    Output dims are round-half-up of physical extent (dims * spacing) over the
    target spacing; values come from clamped trilinear sampling at the new
    voxel centers.
    """
    t = float(target_spacing)
    if t <= 0:
        raise ValueError("target_spacing must be > 0")
    geom = vol.geom
    new_dims = tuple(max(2, _round_half_up(d * s / t)) for d, s in zip(geom.dims, geom.spacing))
    new_geom = GridGeom(new_dims, (t, t, t), geom.origin)
    ii, jj, kk = np.meshgrid(*(np.arange(n, dtype=float) for n in new_dims), indexing="ij")
    pts = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    # New voxel center i sits at origin + i*t; in input voxel units that is i*t/s.
    pts *= t / np.asarray(geom.spacing)
    vals = trilinear_sample(vol, pts)
    return Volume3D(new_geom, vals.reshape(new_dims))


def crop_scale_pad(vol, bbox, margin=1.1, target=256):
    """Crop around a mm bounding box, scale, and pad to a (target,)*3 cube.

    The box is grown by ``margin`` about its center; the output spacing is
    chosen so the largest grown axis spans exactly ``target`` voxels, shorter
    axes are padded symmetrically with zeros.

    Parameters
    ----------
    bbox : pair of mm corners ``(min_corner, max_corner)``, each length 3.
    margin : box growth factor, >= 1.
    target : output dims per axis, >= 2.
    """
    lo = np.asarray(bbox[0], dtype=float)
    hi = np.asarray(bbox[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("bbox is empty (max corner must exceed min corner)")
    if margin < 1.0:
        raise ValueError("margin must be >= 1")
    target = int(target)
    if target < 2:
        raise ValueError("target must be >= 2")
    center = 0.5 * (lo + hi)
    size = (hi - lo) * float(margin)
    s_max = float(size.max())
    out_spacing = s_max / target

    axes = [center[a] - 0.5 * s_max + (np.arange(target) + 0.5) * out_spacing for a in range(3)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    world = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    vals = trilinear_sample(vol, vol.geom.world_to_voxel(world)).reshape((target,) * 3)

    # Zero out samples beyond the grown box: symmetric padding on short axes.
    for a in range(3):
        half = 0.5 * size[a]
        coord = axes[a] - center[a]
        outside = np.abs(coord) > half + 1e-12
        if not outside.any():
            continue
        sl = [slice(None)] * 3
        sl[a] = outside
        vals[tuple(sl)] = 0.0

    out_origin = tuple(center[a] - 0.5 * s_max + 0.5 * out_spacing for a in range(3))
    geom = GridGeom((target,) * 3, (out_spacing,) * 3, out_origin)
    return Volume3D(geom, vals)


# ---------------------------------------------------------------------------
# File format: structured-text header + raw little-endian payload.
# ---------------------------------------------------------------------------

_MAGIC = "aortafit volume 1"
_DTYPES = {"float64": "<f8", "float32": "<f4"}


def _header_path(path):
    return path if str(path).endswith(".hdr") else str(path) + ".hdr"


def save_volume(fld, path):
    """Write a Volume3D or VectorField3D as a header + raw file pair.

    ``path`` names the header file (``.hdr`` appended if missing); the payload
    goes next to it with the same stem and a ``.raw`` suffix.
    """
    hdr = _header_path(path)
    raw = os.path.splitext(hdr)[0] + ".raw"
    geom = fld.geom
    ncomp = 1 if fld.data.ndim == 3 else 3
    lines = [
        _MAGIC,
        "dims: {} {} {}".format(*geom.dims),
        "spacing: {!r} {!r} {!r}".format(*geom.spacing),
        "origin: {!r} {!r} {!r}".format(*geom.origin),
        "dtype: float64",
        "byteorder: little",
        f"components: {ncomp}",
        f"data: {os.path.basename(raw)}",
    ]
    with open(hdr, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    fld.data.astype("<f8").tofile(raw)
    return hdr


def load_volume(path):
    """Read a header + raw pair written by :func:`save_volume`.

    Returns a Volume3D (components: 1) or VectorField3D (components: 3).
    """
    hdr = _header_path(path)
    fields = {}
    with open(hdr) as fh:
        first = fh.readline().rstrip("\n")
        if first != _MAGIC:
            raise ValueError(f"{hdr}: not a volume header (bad magic line {first!r})")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise ValueError(f"{hdr}:{lineno}: expected 'key: value', got {line!r}")
            key, val = line.split(":", 1)
            fields[key.strip()] = val.strip()
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        spacing = tuple(float(x) for x in fields["spacing"].split())
        origin = tuple(float(x) for x in fields["origin"].split())
        dtype = fields["dtype"]
        byteorder = fields["byteorder"]
        ncomp = int(fields["components"])
        dataname = fields["data"]
    except KeyError as exc:
        raise ValueError(f"{hdr}: missing header field {exc}") from None
    if byteorder != "little":
        raise ValueError(f"{hdr}: unsupported byte order {byteorder!r}")
    if dtype not in _DTYPES:
        raise ValueError(f"{hdr}: unsupported dtype {dtype!r}")
    if ncomp not in (1, 3):
        raise ValueError(f"{hdr}: components must be 1 or 3, got {ncomp}")
    raw = os.path.join(os.path.dirname(hdr) or ".", dataname)
    count = dims[0] * dims[1] * dims[2] * ncomp
    data = np.fromfile(raw, dtype=_DTYPES[dtype])
    if data.size != count:
        raise ValueError(f"{raw}: expected {count} values, found {data.size}")
    geom = GridGeom(dims, spacing, origin)
    if ncomp == 1:
        return Volume3D(geom, data.reshape(dims))
    return VectorField3D(geom, data.reshape(dims + (3,)))
