"""Clinical measurements over corresponded meshes: diameters and stress stats.

Cross-sections are the structured rings of the template layout, so the same
ring index means the same anatomical station on every fitted mesh. A ring's
diameter is the equivalent-circle value, twice the mean distance from ring
vertices to the ring centroid (a max-chord variant is available); regional
maxima are taken over the rings a region owns. Stress statistics aggregate
the maximum principal Cauchy stress per face region.

The report is a versioned JSON-friendly dict; ``validate_report`` checks the
schema shape so pipeline outputs can be verified mechanically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quadmesh import REGIONS, face_regions, rings

__all__ = [
    "SCHEMA_VERSION",
    "ClinicalReport",
    "ring_diameter",
    "all_ring_diameters",
    "ring_region_codes",
    "max_diameter_per_region",
    "regional_stress_stats",
    "build_report",
    "validate_report",
]

SCHEMA_VERSION = 1


def ring_diameter(ring_vertices, method="equivalent"):
    """Diameter of one circumferential ring of vertices (mm).

    ``equivalent``: 2 * mean distance to the ring centroid (exact for a
    regular polygon inscribed in a circle). ``chord``: maximum pairwise
    vertex distance.
    """
    v = np.asarray(ring_vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
        raise ValueError("a ring needs at least 3 vertices of shape (n, 3)")
    radii = np.linalg.norm(v - v.mean(axis=0), axis=1)
    if radii.max() == 0:
        raise ValueError("degenerate ring: all vertices coincide")
    if method == "equivalent":
        return float(2.0 * radii.mean())
    if method == "chord":
        diff = v[:, None, :] - v[None, :, :]
        return float(np.sqrt(np.einsum("ijd,ijd->ij", diff, diff)).max())
    raise ValueError(f"unknown diameter method {method!r}")


def all_ring_diameters(mesh, method="equivalent"):
    """Diameter of every ring, shape (A,)."""
    loops = rings(mesh)
    v = mesh.vertices[loops]  # (A, C, 3)
    radii = np.linalg.norm(v - v.mean(axis=1, keepdims=True), axis=2)
    if np.any(radii.max(axis=1) == 0):
        raise ValueError("degenerate ring: all vertices coincide")
    if method == "equivalent":
        return 2.0 * radii.mean(axis=1)
    if method == "chord":
        return np.array([ring_diameter(v[a], method="chord") for a in range(len(v))])
    raise ValueError(f"unknown diameter method {method!r}")


def ring_region_codes(mesh):
    """Region code per ring: majority of vertex labels, ties to the lowest code."""
    loops = rings(mesh)
    labels = mesh.regions[loops]  # (A, C)
    counts = np.zeros((len(loops), len(REGIONS)), dtype=np.int64)
    rows = np.arange(len(loops))
    for c in range(labels.shape[1]):
        np.add.at(counts, (rows, labels[:, c].astype(np.intp)), 1)
    return counts.argmax(axis=1).astype(np.int8)


def max_diameter_per_region(mesh, method="equivalent"):
    """Per-region maximum ring diameter: {name: (diameter_mm, ring_index)}."""
    diams = all_ring_diameters(mesh, method=method)
    codes = ring_region_codes(mesh)
    out = {}
    for code, name in enumerate(REGIONS):
        mask = codes == code
        if not mask.any():
            raise ValueError(f"region {name!r} owns no rings")
        idx = np.nonzero(mask)[0]
        best = idx[np.argmax(diams[idx])]
        out[name] = (float(diams[best]), int(best))
    return out


def regional_stress_stats(mesh, field, peak_rule="max", percentile=99.0):
    """Mean and peak maximum-principal stress per region: {name: (mean, peak)} in kPa.

    ``peak_rule`` is "max" or "percentile" (then ``percentile`` applies),
    guarding against single-element outliers when requested.
    """
    fr = face_regions(mesh)
    sigma1 = field.principal[:, 0]
    if len(sigma1) != len(mesh.faces):
        raise ValueError("stress field does not match the mesh face count")
    out = {}
    for code, name in enumerate(REGIONS):
        vals = sigma1[fr == code]
        if vals.size == 0:
            raise ValueError(f"region {name!r} has no faces")
        if peak_rule == "max":
            peak = float(vals.max())
        elif peak_rule == "percentile":
            peak = float(np.percentile(vals, percentile))
        else:
            raise ValueError(f"unknown peak rule {peak_rule!r}")
        out[name] = (float(vals.mean()), peak)
    return out


@dataclass(frozen=True)
class ClinicalReport:
    """Per-region diameters and stress statistics plus provenance."""

    regions: dict
    pressure_kpa: float
    thickness_mm: float
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def as_dict(self):
        return {
            "schema_version": self.schema_version,
            "regions": self.regions,
            "pressure_kpa": self.pressure_kpa,
            "thickness_mm": self.thickness_mm,
            "provenance": self.provenance,
        }


def build_report(mesh, stress, config=None, reference_mesh=None):
    """Assemble the clinical report for one mesh and its stress field.

    ``config`` may carry ``diameter_method``, ``peak_rule``, ``percentile``,
    and provenance entries (``mesh``, ``config_hash``, ``tool_version``).
    With ``reference_mesh`` given (a corresponded ground-truth mesh), each
    region also reports the absolute diameter error against it.
    """
    cfg = dict(config or {})
    method = cfg.pop("diameter_method", "equivalent")
    peak_rule = cfg.pop("peak_rule", "max")
    percentile = cfg.pop("percentile", 99.0)
    provenance = {k: cfg[k] for k in ("mesh", "config_hash", "tool_version") if k in cfg}

    diam = max_diameter_per_region(mesh, method=method)
    stats = regional_stress_stats(mesh, stress, peak_rule=peak_rule, percentile=percentile)
    ref_diam = max_diameter_per_region(reference_mesh, method=method) if reference_mesh is not None else None

    regions = {}
    for name in REGIONS:
        d, ring_idx = diam[name]
        mean_s, peak_s = stats[name]
        if not d > 0:
            raise ValueError(f"region {name!r} has nonpositive diameter")
        if peak_s < mean_s:
            raise ValueError(f"region {name!r} peak stress below mean (peak rule {peak_rule!r})")
        entry = {
            "max_diameter_mm": d,
            "ring_index": ring_idx,
            "mean_sigma1_kpa": mean_s,
            "peak_sigma1_kpa": peak_s,
        }
        if ref_diam is not None:
            entry["diameter_error_mm"] = abs(d - ref_diam[name][0])
        regions[name] = entry

    return ClinicalReport(
        regions=regions,
        pressure_kpa=float(stress.pressure),
        thickness_mm=float(stress.thickness),
        provenance=provenance,
    )


_REGION_KEYS = {"max_diameter_mm", "ring_index", "mean_sigma1_kpa", "peak_sigma1_kpa"}


def validate_report(data):
    """Check a report dict against the schema; raises ValueError on violations."""
    if not isinstance(data, dict):
        raise ValueError("report must be a dict")
    missing = {"schema_version", "regions", "pressure_kpa", "thickness_mm", "provenance"} - set(data)
    if missing:
        raise ValueError(f"report missing keys: {sorted(missing)}")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {data['schema_version']!r}")
    if set(data["regions"]) != set(REGIONS):
        raise ValueError(f"report regions {sorted(data['regions'])} != {sorted(REGIONS)}")
    for name, entry in data["regions"].items():
        missing = _REGION_KEYS - set(entry)
        if missing:
            raise ValueError(f"region {name!r} missing keys: {sorted(missing)}")
        if not entry["max_diameter_mm"] > 0:
            raise ValueError(f"region {name!r} diameter must be positive")
        if entry["peak_sigma1_kpa"] < entry["mean_sigma1_kpa"]:
            raise ValueError(f"region {name!r} peak below mean")
    if not isinstance(data["provenance"], dict):
        raise ValueError("provenance must be a dict")
