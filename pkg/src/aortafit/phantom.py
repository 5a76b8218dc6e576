"""Synthetic aorta-like ground-truth meshes with known geometry.

The centerline is piecewise: a straight ascending segment along +z, a
half-torus arch of radius ``arch_radius`` bending through the x-z plane, and
a straight descending segment along -z. Rings of ``circumferential`` vertices
are placed on circles normal to the centerline using rotation-minimizing
frames (double-reflection method), so rings never twist through the arch.
Setting ``arch_radius = descending_length = 0`` yields a straight cylinder.

An optional Gaussian bulge raises the ring radius around a chosen arc length,
standing in for an aneurysm of known size. ``rasterize_phantom`` turns a mesh
into a synthetic intensity volume (bright wall band over darker lumen and
background) for exercising the volume pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .quadmesh import QuadMesh
from .volgrid import Volume3D, normalize_intensity

__all__ = [
    "PhantomSpec",
    "make_phantom",
    "centerline_length",
    "rasterize_phantom",
]


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for a synthetic tube phantom.

    ``aneurysm`` is ``(center_arclength_mm, amplitude_mm, width_mm)``; the
    ring radius becomes ``r(s) = base + amplitude * exp(-(s-c)^2 / (2w^2))``.
    ``region_fractions`` are the three axial ring-fraction boundaries
    separating root / ascending / arch / descending labels.
    """

    circumferential: int = 78
    axial: int = 320
    base_radius: float = 15.0
    ascending_length: float = 60.0
    arch_radius: float = 30.0
    descending_length: float = 100.0
    radius_profile: Optional[Callable] = None
    aneurysm: Optional[tuple] = None
    region_fractions: tuple = (0.125, 0.4375, 0.625)
    seed: Optional[int] = None
    jitter: float = 0.0

    def __post_init__(self):
        if self.circumferential < 3 or self.axial < 2:
            raise ValueError("layout must have C >= 3 and A >= 2")
        if self.base_radius <= 0:
            raise ValueError("base_radius must be positive")
        if min(self.ascending_length, self.arch_radius, self.descending_length) < 0:
            raise ValueError("segment lengths must be nonnegative")
        if self.ascending_length + self.arch_radius + self.descending_length <= 0:
            raise ValueError("centerline has zero length")
        if self.aneurysm is not None:
            c, amp, w = self.aneurysm
            if w <= 0:
                raise ValueError("aneurysm width must be positive")
            object.__setattr__(self, "aneurysm", (float(c), float(amp), float(w)))
        fr = tuple(float(f) for f in self.region_fractions)
        if len(fr) != 3 or not (0.0 <= fr[0] <= fr[1] <= fr[2] <= 1.0):
            raise ValueError("region_fractions must be 3 nondecreasing values in [0, 1]")
        object.__setattr__(self, "region_fractions", fr)
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


def centerline_length(spec):
    """Total centerline arc length in mm."""
    return spec.ascending_length + np.pi * spec.arch_radius + spec.descending_length


def _centerline(spec, s):
    """Points and unit tangents of the centerline at arc lengths ``s``."""
    s = np.asarray(s, dtype=np.float64)
    la, ra = spec.ascending_length, spec.arch_radius
    arch_len = np.pi * ra
    pts = np.zeros(s.shape + (3,))
    tan = np.zeros_like(pts)

    asc = s <= la
    pts[asc, 2] = s[asc]
    tan[asc, 2] = 1.0

    arch = (~asc) & (s <= la + arch_len)
    if arch.any():
        t = (s[arch] - la) / ra
        pts[arch, 0] = ra - ra * np.cos(t)
        pts[arch, 2] = la + ra * np.sin(t)
        tan[arch, 0] = np.sin(t)
        tan[arch, 2] = np.cos(t)

    desc = s > la + arch_len
    if desc.any():
        d = s[desc] - la - arch_len
        pts[desc, 0] = 2.0 * ra
        pts[desc, 2] = la - d
        tan[desc, 2] = -1.0

    return pts, tan


def _rotation_minimizing_normals(pts, tan):
    """Propagate an initial normal along the curve by double reflection."""
    n = len(pts)
    normals = np.zeros_like(pts)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ tan[0]) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    n0 = ref - (ref @ tan[0]) * tan[0]
    normals[0] = n0 / np.linalg.norm(n0)
    for i in range(n - 1):
        v1 = pts[i + 1] - pts[i]
        c1 = v1 @ v1
        rl = normals[i] - (2.0 / c1) * (v1 @ normals[i]) * v1
        tl = tan[i] - (2.0 / c1) * (v1 @ tan[i]) * v1
        v2 = tan[i + 1] - tl
        c2 = v2 @ v2
        if c2 < 1e-30:
            normals[i + 1] = rl
        else:
            normals[i + 1] = rl - (2.0 / c2) * (v2 @ rl) * v2
    return normals


def ring_radii(spec, s):
    """Ring radius at arc lengths ``s`` (base or profile, plus any bulge)."""
    s = np.asarray(s, dtype=np.float64)
    if spec.radius_profile is not None:
        r = np.asarray(spec.radius_profile(s), dtype=np.float64) * np.ones_like(s)
    else:
        r = np.full_like(s, spec.base_radius)
    if spec.aneurysm is not None:
        c, amp, w = spec.aneurysm
        r = r + amp * np.exp(-((s - c) ** 2) / (2.0 * w * w))
    if np.any(r <= 0):
        raise ValueError("radius profile must stay positive along the centerline")
    return r


def make_phantom(spec):
    """Build the phantom tube mesh described by ``spec``.

    Faces wind so normals point outward; vertex ``a*C + c`` sits on ring ``a``
    at circumferential slot ``c``.
    """
    c_n, a_n = spec.circumferential, spec.axial
    total = centerline_length(spec)
    s = np.linspace(0.0, total, a_n)
    pts, tan = _centerline(spec, s)
    normals = _rotation_minimizing_normals(pts, tan)
    binorm = np.cross(tan, normals)
    radii = ring_radii(spec, s)

    phi = 2.0 * np.pi * np.arange(c_n) / c_n
    cos_p, sin_p = np.cos(phi), np.sin(phi)
    # (A, C, 3): ring center + r * (cos(phi) N + sin(phi) B)
    verts = (
        pts[:, None, :]
        + radii[:, None, None] * (cos_p[None, :, None] * normals[:, None, :] + sin_p[None, :, None] * binorm[:, None, :])
    ).reshape(-1, 3)

    a_idx = np.repeat(np.arange(a_n - 1), c_n)
    c_idx = np.tile(np.arange(c_n), a_n - 1)
    c_next = (c_idx + 1) % c_n
    faces = np.stack(
        [
            a_idx * c_n + c_idx,
            a_idx * c_n + c_next,
            (a_idx + 1) * c_n + c_next,
            (a_idx + 1) * c_n + c_idx,
        ],
        axis=1,
    )

    bounds = [int(round(f * a_n)) for f in spec.region_fractions]
    ring_region = np.zeros(a_n, dtype=np.int8)
    ring_region[bounds[0]:] = 1
    ring_region[bounds[1]:] = 2
    ring_region[bounds[2]:] = 3
    regions = np.repeat(ring_region, c_n)

    if spec.jitter > 0.0:
        rng = np.random.default_rng(spec.seed)
        verts = verts + rng.normal(0.0, spec.jitter, size=verts.shape)

    return QuadMesh(verts, faces, regions, ring_layout=(c_n, a_n))


def _surface_samples(mesh, per_face=3):
    """Surface points with outward normals: vertices plus bilinear face samples."""
    v = mesh.vertices
    f = mesh.faces
    quads = v[f]  # (m, 4, 3)
    fnorm = np.cross(quads[:, 2] - quads[:, 0], quads[:, 3] - quads[:, 1])
    norms = np.linalg.norm(fnorm, axis=1, keepdims=True)
    fnorm = fnorm / np.where(norms > 0, norms, 1.0)

    vnorm = np.zeros_like(v)
    for k in range(4):
        np.add.at(vnorm, f[:, k], fnorm)
    lens = np.linalg.norm(vnorm, axis=1, keepdims=True)
    vnorm = vnorm / np.where(lens > 0, lens, 1.0)

    pts = [v]
    nrm = [vnorm]
    if per_face > 1:
        t = (np.arange(per_face) + 0.5) / per_face
        uu, vv = np.meshgrid(t, t, indexing="ij")
        uu, vv = uu.ravel(), vv.ravel()
        w = np.stack([(1 - uu) * (1 - vv), uu * (1 - vv), uu * vv, (1 - uu) * vv], axis=1)
        inner = np.einsum("sk,mkd->msd", w, quads).reshape(-1, 3)
        pts.append(inner)
        nrm.append(np.repeat(fnorm, per_face * per_face, axis=0))
    return np.concatenate(pts), np.concatenate(nrm)


def rasterize_phantom(mesh, grid, wall_sigma=1.5, lumen_level=0.35):
    """Synthetic intensity volume: bright band at the wall, dim lumen, dark background.

    Intensity is a smooth function of signed distance to the surface (positive
    outside), normalized to [0, 1]. A grid with no overlap with the mesh comes
    back as all background.
    """
    samples, normals = _surface_samples(mesh)
    tree = cKDTree(samples)

    idx = np.indices(grid.dims, dtype=np.float64).reshape(3, -1).T
    world = grid.voxel_to_world(idx)
    dist, nearest = tree.query(world)
    outward = np.einsum("ij,ij->i", world - samples[nearest], normals[nearest])
    signed = np.where(outward >= 0, dist, -dist)

    wall = np.exp(-(signed**2) / (2.0 * wall_sigma**2))
    lumen = 1.0 / (1.0 + np.exp(signed / wall_sigma))
    raw = wall + lumen_level * lumen
    vol = Volume3D(grid, raw.reshape(grid.dims))
    return normalize_intensity(vol)
