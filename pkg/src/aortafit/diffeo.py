"""Stationary velocity fields exponentiated into diffeomorphic deformations.

A stationary velocity field (SVF) tau lives on a regular grid with components
in voxel units. Its unit-time flow phi = exp(tau) is computed by scaling and
squaring: start from u = tau / 2^S, then compose the displacement with itself
S times, u <- u + u(x + u), using clamped trilinear sampling. The result is a
displacement field u = phi - id in voxel units on the same grid.

``exp_vjp`` is the exact reverse-mode derivative of the composite map
tau -> warped mesh vertices: every squaring step stores its intermediate
field, and the backward pass differentiates each trilinear sample through both
its field values and its sample positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import (
    VectorField3D,
    Volume3D,
    _sample_cache,
    _sample_from,
    _sample_vjp_from,
    trilinear_sample,
    trilinear_sample_vjp,
)

__all__ = [
    "DiffeoConfig",
    "exponentiate",
    "warp_vertices",
    "jacobian_determinant",
    "exp_vjp",
]

_MAX_STEPS = 20


@dataclass(frozen=True)
class DiffeoConfig:
    """Scaling-and-squaring parameters.

    ``squaring_steps`` is the number of compositions S. With ``auto_steps``
    set, S is raised (never lowered) until the scaled field satisfies
    max |tau| / 2^S <= 0.5 voxel, keeping each composition step well inside
    the contraction regime.
    """

    squaring_steps: int = 8
    auto_steps: bool = True

    def __post_init__(self):
        s = int(self.squaring_steps)
        if s < 0:
            raise ValueError("squaring_steps must be >= 0")
        if s > _MAX_STEPS:
            raise ValueError(f"squaring_steps must be <= {_MAX_STEPS}, got {s}")
        object.__setattr__(self, "squaring_steps", s)

    def resolve_steps(self, svf):
        """Number of squaring steps to use for this field."""
        s = self.squaring_steps
        if self.auto_steps:
            m = svf.max_abs()
            if m > 0.5:
                s = max(s, int(np.ceil(np.log2(2.0 * m))))
        if s > _MAX_STEPS:
            raise ValueError(
                f"field needs {s} squaring steps (max |tau| = {svf.max_abs():.3g} voxels), guard is {_MAX_STEPS}"
            )
        return s


def _identity_coords(dims):
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), axis=-1)


def _forward(svf, cfg):
    """All intermediate fields u_0 .. u_S (u_0 = tau / 2^S) plus sample caches.

    Each squaring step computes u + u(x + u); the per-step trilinear sample
    cache is kept so a following backward pass can reuse it instead of
    relocating the same sample points.
    """
    steps = cfg.resolve_steps(svf)
    dims = svf.geom.dims
    ident = _identity_coords(dims)
    us = [svf.data / (2.0**steps)]
    caches = []
    for k in range(steps):
        u = us[-1]
        cache = _sample_cache(dims, (ident + u).reshape(-1, 3))
        out = u + _sample_from(u, cache).reshape(u.shape)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite displacement at squaring step {k}")
        us.append(out)
        caches.append(cache)
    return us, caches


def exponentiate(svf, cfg=DiffeoConfig()):
    """Displacement field u = exp(svf) - id, in voxel units on svf's grid."""
    us, _ = _forward(svf, cfg)
    return VectorField3D(svf.geom, us[-1])


def warp_vertices(mesh, disp, grid):
    """Move mesh vertices through a displacement field.

    Vertices (mm) are mapped into grid voxel coordinates, the displacement is
    sampled there, converted back to mm via the grid spacing, and added.
    Connectivity, regions, and ring layout are untouched.
    """
    pts = grid.world_to_voxel(mesh.vertices)
    hi = np.asarray(grid.dims, dtype=float) - 1.0
    if np.any(pts < 0.0) or np.any(pts > hi):
        raise ValueError("mesh vertices fall outside the grid extent")
    d = trilinear_sample(disp, pts)
    return mesh.with_vertices(mesh.vertices + d * np.asarray(grid.spacing))


def jacobian_determinant(disp):
    """det(d phi / d x) per voxel for phi(x) = x + u(x), finite differences.

    Central differences on the interior, one-sided at the boundary; positive
    everywhere certifies a locally invertible (diffeomorphic) map.
    """
    dims = disp.geom.dims
    if any(d < 3 for d in dims):
        raise ValueError("jacobian needs >= 3 voxels per axis")
    u = disp.data
    jac = np.empty(dims + (3, 3))
    for comp in range(3):
        grads = np.gradient(u[..., comp], axis=(0, 1, 2))
        for ax in range(3):
            jac[..., comp, ax] = grads[ax]
        jac[..., comp, comp] += 1.0
    return Volume3D(disp.geom, np.linalg.det(jac))


def exp_vjp(svf, cfg, vertex_grad, mesh, grid, states=None):
    """Gradient of a vertex loss with respect to the SVF values.

    Given d(loss)/d(warped vertex) for every vertex of ``mesh``, pulls the
    gradient back through warp_vertices and every squaring step of
    exponentiate, returning d(loss)/d(tau) as a field on svf's grid.

    ``states`` may pass the ``(us, caches)`` pair from a prior internal
    forward pass of the same field; omitted, the forward pass is recomputed.
    """
    g = np.asarray(vertex_grad, dtype=np.float64)
    if g.shape != mesh.vertices.shape:
        raise ValueError(f"vertex_grad shape {g.shape} does not match vertices {mesh.vertices.shape}")
    us, caches = _forward(svf, cfg) if states is None else states
    steps = len(us) - 1
    geom = svf.geom

    # Through warp: v' = v + spacing * sample(u_S, p), p fixed.
    pts = grid.world_to_voxel(mesh.vertices)
    cot = g * np.asarray(grid.spacing)
    grad_u, _ = trilinear_sample_vjp(VectorField3D(geom, us[-1]), pts, cot)

    # Through each squaring step, finest last: u_{k+1} = u_k + u_k(x + u_k).
    for k in range(steps - 1, -1, -1):
        gd, gp = _sample_vjp_from(us[k], geom.dims, caches[k], grad_u.reshape(-1, 3))
        grad_u = grad_u + gd + gp.reshape(grad_u.shape)

    return VectorField3D(geom, grad_u / (2.0**steps))
