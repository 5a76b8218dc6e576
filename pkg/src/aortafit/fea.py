"""Membrane wall stress from equilibrium alone (static determinacy).

A thin pressurized wall carries membrane stress resultants N11, N22, N12
(force per unit length) that are fixed by geometry and load, independent of
any material law. Per element the three resultants are unknowns in a local
in-plane frame; per free vertex, three force-balance equations: the element
edge tractions (constant-stress membrane, each edge force split half to its
endpoints) must balance the outward pressure load. Internally each quad's two
flat triangles carry their own resultant tensor (closed quad surfaces are
otherwise overdetermined and the load sits outside the column space by the
discretization error); the reported per-element resultants average the pair.
The underdetermined system is solved to minimum norm through its Tikhonov-
damped second-kind normal equations with iterative refinement, and the
minimum-norm solution reproduces the thin-wall textbook values (hoop pR/t on
a cylinder, pR/2t on a sphere).

Units: meshes in mm, pressures in kPa, forces in N. Resultants then come out
in N/mm (= kN/m) and Cauchy stresses (resultant / thickness) are reported in
kPa.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix, identity
from scipy.sparse.linalg import splu

from .quadmesh import face_regions, region_code, rings, validate_topology, REGIONS

__all__ = [
    "MembraneModel",
    "StressField",
    "SolverError",
    "pressure_nodal_forces",
    "solve_membrane_stress",
    "principal_stresses",
    "mean_stress_error",
]

KPA_TO_N_PER_MM2 = 1e-3
N_PER_MM2_TO_KPA = 1e3


class SolverError(RuntimeError):
    """Equilibrium solve did not reach the required residual."""

    def __init__(self, message, residual, istop, iterations):
        super().__init__(message)
        self.residual = residual
        self.istop = istop
        self.iterations = iterations


@dataclass(frozen=True)
class MembraneModel:
    """Load, wall, boundary and solver settings.

    ``fixed_rings`` is a tuple of vertex-index arrays whose equilibrium rows
    are dropped (supported boundary). None means the default: first and last
    ring for open structured tubes, nothing for closed surfaces.
    ``regularization`` is Tikhonov damping relative to the RMS column norm of
    the equilibrium operator; ``max_iters`` caps the residual-refinement
    rounds (default 40).
    """

    pressure: float = 16.0
    thickness: float = 2.0
    fixed_rings: Optional[tuple] = None
    regularization: float = 1e-8
    solver_tol: float = 1e-8
    max_iters: Optional[int] = None

    def __post_init__(self):
        if self.pressure < 0:
            raise ValueError("pressure must be nonnegative")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        if self.regularization < 0:
            raise ValueError("regularization must be nonnegative")
        if self.fixed_rings is not None:
            fixed = tuple(np.asarray(r, dtype=np.int64) for r in self.fixed_rings)
            object.__setattr__(self, "fixed_rings", fixed)


@dataclass(frozen=True)
class StressField:
    """Per-element membrane state.

    ``frames`` is (t1, t2, normal), each (m, 3); ``resultants`` holds
    (N11, N22, N12) in N/mm in that frame. Cauchy stresses (kPa) divide by the
    thickness; ``principal`` is (sigma1, sigma2) with sigma1 >= sigma2.
    """

    frames: tuple
    resultants: np.ndarray
    thickness: float
    pressure: float
    residual: float

    @property
    def cauchy(self):
        """(m, 3) Cauchy stresses (s11, s22, s12) in kPa."""
        return self.resultants / self.thickness * N_PER_MM2_TO_KPA

    @property
    def principal(self):
        """(m, 2) principal Cauchy stresses, sigma1 >= sigma2, in kPa."""
        s1, s2, _ = principal_stresses(self)
        return np.stack([s1, s2], axis=1)


def principal_stresses(field):
    """Closed-form eigenvalues (sigma1, sigma2, angle) of each 2x2 stress tensor.

    ``angle`` is the rotation (radians) from the element's first frame axis to
    the sigma1 direction.
    """
    s = field.cauchy
    center = 0.5 * (s[:, 0] + s[:, 1])
    radius = np.hypot(0.5 * (s[:, 0] - s[:, 1]), s[:, 2])
    angle = 0.5 * np.arctan2(2.0 * s[:, 2], s[:, 0] - s[:, 1])
    return center + radius, center - radius, angle


def pressure_nodal_forces(mesh, p, return_skipped=False):
    """Lump pressure load onto vertices: p * area * outward normal / 3 per triangle.

    ``p`` is in force per squared mesh length unit (N/mm^2 for mm meshes and
    newton forces). Quads split along the v0-v2 diagonal; zero-area triangles
    contribute nothing and are tallied when ``return_skipped`` is set.
    """
    v = mesh.vertices
    f = mesh.faces
    forces = np.zeros_like(v)
    skipped = 0
    for tri in (f[:, [0, 1, 2]], f[:, [0, 2, 3]]):
        p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
        an = 0.5 * np.cross(p1 - p0, p2 - p0)  # area * outward normal
        skipped += int((np.linalg.norm(an, axis=1) == 0).sum())
        contrib = (p / 3.0) * an
        for k in range(3):
            np.add.at(forces, tri[:, k], contrib)
    return (forces, skipped) if return_skipped else forces


def _element_frames(mesh):
    """Local orthonormal frames (t1, t2, n) per element."""
    q = mesh.vertices[mesh.faces]
    n = np.cross(q[:, 2] - q[:, 0], q[:, 3] - q[:, 1])
    n_len = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(n_len == 0):
        raise ValueError("degenerate element: normal undefined")
    n = n / n_len
    e01 = q[:, 1] - q[:, 0]
    t1 = e01 - np.einsum("md,md->m", e01, n)[:, None] * n
    t1_len = np.linalg.norm(t1, axis=1, keepdims=True)
    if np.any(t1_len == 0):
        raise ValueError("degenerate element: first edge collinear with normal")
    t1 = t1 / t1_len
    t2 = np.cross(n, t1)
    return t1, t2, n


def _assemble(mesh):
    """Equilibrium operator A (3|V| x 6|F|): A @ resultants = nodal loads.

    Each element is integrated as its two flat triangles (the same v0-v2 split
    used for the pressure load), each carrying its own constant (N11, N22, N12)
    in the element frame projected into the triangle plane.  Every triangle
    edge applies half its length times the resultant traction to each endpoint.
    Constant stress on a flat facet is exactly self-equilibrated (zero net
    force and torque), so the pressure load stays reachable even for warped
    quads; with a single tensor per quad, closed surfaces are overdetermined
    and the load misses the column space by the discretization error, which
    puts the least-squares residual orders of magnitude above the solver
    contract.  The per-quad resultants reported to callers are the
    area-weighted average of the two triangle tensors.

    Returns (A, frames, areas): per split s in (0, 1), ``frames[s]`` is the
    (t1, t2) in-plane basis pair and ``areas[s]`` the triangle areas.
    """
    f = mesh.faces
    m = len(f)
    v = mesh.vertices
    t1, t2, _ = _element_frames(mesh)

    entries_rows = []
    entries_cols = []
    entries_data = []
    frames = []
    areas = []
    for split, corner_ids in enumerate(((0, 1, 2), (0, 2, 3))):
        tri = f[:, corner_ids]
        p = v[tri]  # (m, 3, 3)
        n_tri = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n_len = np.linalg.norm(n_tri, axis=1, keepdims=True)
        if np.any(n_len == 0):
            raise ValueError("degenerate element: zero-area triangle")
        areas.append(0.5 * n_len[:, 0])
        n_tri = n_tri / n_len
        t1p = t1 - np.einsum("md,md->m", t1, n_tri)[:, None] * n_tri
        t1p_len = np.linalg.norm(t1p, axis=1, keepdims=True)
        if np.any(t1p_len == 0):
            raise ValueError("degenerate element: frame perpendicular to triangle")
        t1p = t1p / t1p_len
        t2p = np.cross(n_tri, t1p)
        frames.append((t1p, t2p))
        col0 = 6 * np.arange(m) + 3 * split
        for k in range(3):
            a = tri[:, k]
            b = tri[:, (k + 1) % 3]
            edge = p[:, (k + 1) % 3] - p[:, k]  # lies in the triangle plane
            length = np.linalg.norm(edge, axis=1)
            if np.any(length == 0):
                raise ValueError("degenerate element edge (zero length)")
            ehat = edge / length[:, None]
            mhat = np.cross(ehat, n_tri)  # in-plane outward normal of the edge
            m1 = np.einsum("md,md->m", mhat, t1p)
            m2 = np.einsum("md,md->m", mhat, t2p)
            # Traction direction per unit resultant: columns N11, N22, N12.
            coeff = np.stack(
                [m1[:, None] * t1p, m2[:, None] * t2p, m2[:, None] * t1p + m1[:, None] * t2p],
                axis=1,
            )  # (m, 3 unknowns, 3 force comps)
            coeff = 0.5 * length[:, None, None] * coeff
            for endpoint in (a, b):
                rows = (3 * endpoint[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
                cols = (col0[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
                entries_rows.append(rows.ravel())
                entries_cols.append(cols.ravel())
                entries_data.append(coeff.ravel())

    nrows = 3 * len(mesh.vertices)
    ncols = 6 * m
    A = coo_matrix(
        (np.concatenate(entries_data), (np.concatenate(entries_rows), np.concatenate(entries_cols))),
        shape=(nrows, ncols),
    )
    return A.tocsr(), frames, areas


def _collapse_resultants(mesh, x, frames, areas):
    """Area-weighted per-quad average of the two triangle tensors, in the quad frame."""
    m = len(mesh.faces)
    t1, t2, _ = _element_frames(mesh)
    xr = x.reshape(m, 2, 3)
    tensor = np.zeros((m, 3, 3))
    weight_sum = areas[0] + areas[1]
    for split in range(2):
        t1p, t2p = frames[split]
        a11, a22, a12 = xr[:, split, 0], xr[:, split, 1], xr[:, split, 2]
        part = (
            a11[:, None, None] * t1p[:, :, None] * t1p[:, None, :]
            + a22[:, None, None] * t2p[:, :, None] * t2p[:, None, :]
            + a12[:, None, None]
            * (t1p[:, :, None] * t2p[:, None, :] + t2p[:, :, None] * t1p[:, None, :])
        )
        tensor += (areas[split] / weight_sum)[:, None, None] * part
    n11 = np.einsum("md,mde,me->m", t1, tensor, t1)
    n22 = np.einsum("md,mde,me->m", t2, tensor, t2)
    n12 = np.einsum("md,mde,me->m", t1, tensor, t2)
    return np.stack([n11, n22, n12], axis=1)


def _fixed_vertices(mesh, model, report):
    if model.fixed_rings is not None:
        if len(model.fixed_rings) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(model.fixed_rings))
    if report.boundary_edge_count == 0:
        return np.zeros(0, dtype=np.int64)
    if mesh.ring_layout is None:
        raise ValueError("open mesh without ring_layout: fixed_rings must be given explicitly")
    loops = rings(mesh)
    return np.unique(np.concatenate([loops[0], loops[-1]]))


def solve_membrane_stress(mesh, model=MembraneModel()):
    """Solve nodal equilibrium for per-element membrane resultants.

    Raises SolverError when the relative equilibrium residual at free vertices
    stays above max(10 * solver_tol, 1e-6), and ValueError on meshes that are
    not consistently oriented.
    """
    report = validate_topology(mesh)
    if not (report.manifold and report.oriented and not report.degenerate_faces):
        raise ValueError("membrane solve needs a manifold, consistently oriented mesh")

    A, tri_frames, tri_areas = _assemble(mesh)
    p_internal = model.pressure * KPA_TO_N_PER_MM2
    b = pressure_nodal_forces(mesh, p_internal).ravel()

    fixed = _fixed_vertices(mesh, model, report)
    row_mask = np.ones(len(mesh.vertices), dtype=bool)
    row_mask[fixed] = False
    row_mask = np.repeat(row_mask, 3)
    A_free = A[row_mask].tocsr()
    b_free = b[row_mask]

    # The system is always underdetermined (six unknowns per quad); the
    # minimum-norm solution x = A^T y comes from the damped second-kind normal
    # equations (A A^T + damp^2 I) y = b, factored once.  Refining y against
    # the true residual recovers the digits a single solve loses to roundoff
    # on near-mechanism modes and removes the Tikhonov bias where the damping
    # barely matters, while keeping x free of null-space components.
    col_rms = np.sqrt((A_free.data**2).sum() / A_free.shape[1])
    damp = model.regularization * col_rms
    gram = (A_free @ A_free.T).tocsc()
    if damp > 0.0:
        gram = (gram + damp**2 * identity(gram.shape[0], format="csc")).tocsc()
    try:
        factor = splu(gram)
    except RuntimeError as exc:
        raise SolverError(
            f"normal-equations factorization failed: {exc}",
            residual=float("inf"),
            istop=-1,
            iterations=0,
        ) from exc

    b_norm = np.linalg.norm(b_free)
    limit = max(10.0 * model.solver_tol, 1e-6)
    max_rounds = model.max_iters if model.max_iters is not None else 40
    y = np.zeros(A_free.shape[0])
    x = np.zeros(A_free.shape[1])
    residual = 1.0 if b_norm > 0.0 else 0.0
    itn = 0
    while b_norm > 0.0 and residual > model.solver_tol and itn < max_rounds:
        y = y + factor.solve(b_free - A_free @ x)
        x = A_free.T @ y
        itn += 1
        improved = float(np.linalg.norm(A_free @ x - b_free) / b_norm)
        if improved >= 0.9 * residual and itn > 1:
            residual = min(residual, improved)
            break  # stagnated at the attainable floor
        residual = improved
    if residual > limit:
        raise SolverError(
            f"equilibrium residual {residual:.3g} above limit {limit:.3g} after {itn} refinement rounds",
            residual=residual,
            istop=0,
            iterations=itn,
        )

    t1, t2, n = _element_frames(mesh)
    return StressField(
        frames=(t1, t2, n),
        resultants=_collapse_resultants(mesh, x, tri_frames, tri_areas),
        thickness=model.thickness,
        pressure=model.pressure,
        residual=residual,
    )


def mean_stress_error(pred_mesh, pred_field, gt_mesh, gt_field):
    """Per-region relative error of mean maximum-principal stress.

    err_r = |mean sigma1(pred) - mean sigma1(gt)| / mean sigma1(gt), keyed by
    region name. Both meshes must induce the same face partition.
    """
    fr_pred = face_regions(pred_mesh)
    fr_gt = face_regions(gt_mesh)
    if not np.array_equal(fr_pred, fr_gt):
        raise ValueError("meshes do not share a face-region partition")
    s1_pred = pred_field.principal[:, 0]
    s1_gt = gt_field.principal[:, 0]
    errors = {}
    for code, name in enumerate(REGIONS):
        mask = fr_gt == code
        if not mask.any():
            raise ValueError(f"region {name!r} has no faces")
        gt_mean = s1_gt[mask].mean()
        if gt_mean == 0:
            raise ValueError(f"region {name!r} has zero ground-truth mean stress")
        errors[name] = float(abs(s1_pred[mask].mean() - gt_mean) / abs(gt_mean))
    return errors
