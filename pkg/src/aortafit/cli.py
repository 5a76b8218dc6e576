"""Command-line front end: phantom generation through clinical reporting.

Subcommands: phantom, template, fit, warp, quality, chamfer, stress, report,
pipeline. Settings come from a JSON config file with sections (grid, phantom,
fit, weights, diffeo, membrane, report); any value can be overridden on the
command line with ``--set section.key=value``. Unknown sections or keys are
rejected. The effective config (defaults merged with file and overrides) is
echoed into every output next to its sha256 hash, so runs are reproducible:
identical config and seed produce byte-identical output bundles.

Exit codes: 0 success, 2 validation error (bad config, malformed file,
missing input), 3 numerical failure (divergence, solver residual).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import hashlib
import json
import os
import sys

# Best-effort thread cap; BLAS pools read these at first use.
if os.environ.get("AORTAFIT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["AORTAFIT_THREADS"])

import numpy as np

from . import __version__
from .clinical import build_report, regional_stress_stats, validate_report
from .diffeo import DiffeoConfig, exponentiate, warp_vertices
from .fea import MembraneModel, SolverError, solve_membrane_stress
from .fitter import FitConfig, FitDivergence, bounding_grid, fit_svf
from .objective import LossWeights, chamfer
from .phantom import PhantomSpec, make_phantom
from .quadmesh import MeshFileError, REGIONS, average_template, load_mesh, save_mesh
from .quality import quality_report
from .volgrid import load_volume, save_volume

__all__ = ["main", "default_config", "load_config"]


def default_config():
    """Full config with every documented default."""
    phantom = dataclasses.asdict(PhantomSpec())
    phantom.pop("radius_profile")  # callable; not expressible in config files
    fit = dataclasses.asdict(FitConfig())
    for nested in ("weights", "diffeo", "seed"):
        fit.pop(nested)
    weights = dataclasses.asdict(LossWeights())
    diffeo = dataclasses.asdict(DiffeoConfig())
    membrane = dataclasses.asdict(MembraneModel())
    return {
        "grid": {"spacing": 1.0, "margin": 5.0},
        "phantom": phantom,
        "fit": fit,
        "weights": weights,
        "diffeo": diffeo,
        "membrane": membrane,
        "report": {"diameter_method": "equivalent", "peak_rule": "max", "percentile": 99.0},
    }


def _merge_section(base, update, path):
    for key, value in update.items():
        if key not in base:
            raise ValueError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_section(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def load_config(path=None, overrides=()):
    """Defaults merged with an optional JSON file and --set overrides."""
    cfg = copy.deepcopy(default_config())
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        _merge_section(cfg, data, "")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return cfg


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _phantom_spec(cfg):
    return PhantomSpec(**cfg["phantom"])


def _fit_config(cfg, seed):
    return FitConfig(
        weights=LossWeights(**cfg["weights"]),
        diffeo=DiffeoConfig(**cfg["diffeo"]),
        seed=seed,
        **cfg["fit"],
    )


def _membrane_model(cfg):
    return MembraneModel(**cfg["membrane"])


def _provenance(cfg, **extra):
    out = {"tool_version": __version__, "config_hash": config_hash(cfg)}
    out.update(extra)
    return out


def _table(headers, rows):
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _quality_table(rep):
    rows = []
    for name in ("equiangle_skew", "aspect_ratio", "scaled_jacobian", "min_angle", "max_angle"):
        mean, std = getattr(rep, name)
        rows.append([name, f"{mean:.4f}", f"{std:.4f}"])
    rows.append(["self_intersections", str(rep.self_intersection_count), ""])
    return _table(["metric", "mean", "std"], rows)


def _report_table(report):
    headers = ["region", "max_diameter_mm", "ring", "mean_sigma1_kpa", "peak_sigma1_kpa"]
    has_err = any("diameter_error_mm" in e for e in report.regions.values())
    if has_err:
        headers.append("diameter_error_mm")
    rows = []
    for name in REGIONS:
        e = report.regions[name]
        row = [
            name,
            f"{e['max_diameter_mm']:.3f}",
            str(e["ring_index"]),
            f"{e['mean_sigma1_kpa']:.2f}",
            f"{e['peak_sigma1_kpa']:.2f}",
        ]
        if has_err:
            row.append(f"{e.get('diameter_error_mm', float('nan')):.3f}")
        rows.append(row)
    return _table(headers, rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args):
    cfg = load_config(args.config, args.set or ())
    spec = _phantom_spec(cfg)
    mesh = make_phantom(spec)
    save_mesh(mesh, args.out, title=f"aortafit phantom (config {config_hash(cfg)[:12]})")
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return 0


def cmd_template(args):
    meshes = [load_mesh(p) for p in args.meshes]
    avg = average_template(meshes)
    save_mesh(avg, args.out, title=f"aortafit template of {len(meshes)} meshes")
    print(f"wrote {args.out}: average of {len(meshes)} meshes")
    return 0


def _run_fit(template_path, target_path, cfg, seed):
    template = load_mesh(template_path)
    target = load_mesh(target_path)
    grid = bounding_grid([template, target], spacing=cfg["grid"]["spacing"], margin=cfg["grid"]["margin"])
    result = fit_svf(template, target, grid, _fit_config(cfg, seed))
    return template, target, result


def _write_fit_outputs(out_dir, cfg, seed, result, target_path):
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    files["fitted.vtk"] = save_mesh(
        result.fitted, os.path.join(out_dir, "fitted.vtk"), title="aortafit fitted mesh"
    )
    files["svf.hdr"] = save_volume(result.svf, os.path.join(out_dir, "svf.hdr"))
    files["svf.raw"] = os.path.join(out_dir, "svf.raw")
    files["history.json"] = _write_json(
        os.path.join(out_dir, "history.json"),
        {"loss": [float(x) for x in result.history], "level_starts": list(result.level_starts)},
    )
    summary = {
        "final": result.final.as_dict(),
        "final_chamfer_mm": result.final_chamfer,
        "min_jacobian": result.min_jacobian,
        "seed": seed,
        "target": os.path.basename(target_path),
        "config": cfg,
        "provenance": _provenance(cfg),
    }
    files["summary.json"] = _write_json(os.path.join(out_dir, "summary.json"), summary)
    return files


def cmd_fit(args):
    cfg = load_config(args.config, args.set or ())
    _, _, result = _run_fit(args.template, args.target, cfg, args.seed)
    _write_fit_outputs(args.out, cfg, args.seed, result, args.target)
    print(
        f"fit done: chamfer {result.final_chamfer:.4f} mm, "
        f"min Jacobian {result.min_jacobian:.4f}, outputs in {args.out}"
    )
    return 0


def cmd_warp(args):
    cfg = load_config(args.config, args.set or ())
    mesh = load_mesh(args.mesh)
    svf = load_volume(args.svf)
    if svf.data.ndim != 4:
        raise ValueError(f"{args.svf}: expected a 3-component field")
    disp = exponentiate(svf, DiffeoConfig(**cfg["diffeo"]))
    warped = warp_vertices(mesh, disp, svf.geom)
    save_mesh(warped, args.out, title="aortafit warped mesh")
    print(f"wrote {args.out}")
    return 0


def cmd_quality(args):
    rep = quality_report(load_mesh(args.mesh), intersection_method="brute" if args.brute else "bvh")
    payload = dict(rep.as_dict(), provenance={"mesh": os.path.basename(args.mesh), "tool_version": __version__})
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    if args.summary_table:
        print(_quality_table(rep))
    return 0


def cmd_chamfer(args):
    d = chamfer(load_mesh(args.mesh_a), load_mesh(args.mesh_b))
    print(d)
    return 0


def _stress_cell_data(field):
    s1, s2 = field.principal[:, 0], field.principal[:, 1]
    return {
        "n11": field.resultants[:, 0],
        "n22": field.resultants[:, 1],
        "n12": field.resultants[:, 2],
        "sigma1": s1,
        "sigma2": s2,
    }


def cmd_stress(args):
    cfg = load_config(args.config, args.set or ())
    mesh = load_mesh(args.mesh)
    field = solve_membrane_stress(mesh, _membrane_model(cfg))
    save_mesh(mesh, args.out, cell_data=_stress_cell_data(field), title="aortafit stressed mesh")
    stats = regional_stress_stats(
        mesh, field, peak_rule=cfg["report"]["peak_rule"], percentile=cfg["report"]["percentile"]
    )
    summary = {
        "pressure_kpa": field.pressure,
        "thickness_mm": field.thickness,
        "residual": field.residual,
        "regional": {name: {"mean_sigma1_kpa": m, "peak_sigma1_kpa": p} for name, (m, p) in stats.items()},
        "provenance": _provenance(cfg, mesh=os.path.basename(args.mesh)),
    }
    out_json = args.summary or (os.path.splitext(args.out)[0] + ".stress.json")
    _write_json(out_json, summary)
    print(f"wrote {args.out} and {out_json} (residual {field.residual:.2e})")
    return 0


def cmd_report(args):
    cfg = load_config(args.config, args.set or ())
    mesh = load_mesh(args.mesh)
    reference = load_mesh(args.reference) if args.reference else None
    field = solve_membrane_stress(mesh, _membrane_model(cfg))
    rep_cfg = dict(cfg["report"])
    rep_cfg.update(_provenance(cfg, mesh=os.path.basename(args.mesh)))
    report = build_report(mesh, field, rep_cfg, reference_mesh=reference)
    payload = report.as_dict()
    validate_report(payload)
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    if args.summary_table:
        print(_report_table(report))
    return 0


def _run_case(template_path, target_path, case_dir, cfg, seed):
    """One pipeline case: fit, quality, chamfer, stress, report, manifest."""
    template, target, result = _run_fit(template_path, target_path, cfg, seed)
    files = _write_fit_outputs(case_dir, cfg, seed, result, target_path)

    qrep = quality_report(result.fitted)
    files["quality.json"] = _write_json(
        os.path.join(case_dir, "quality.json"),
        dict(qrep.as_dict(), provenance=_provenance(cfg)),
    )

    field = solve_membrane_stress(result.fitted, _membrane_model(cfg))
    files["stressed.vtk"] = save_mesh(
        result.fitted,
        os.path.join(case_dir, "stressed.vtk"),
        cell_data=_stress_cell_data(field),
        title="aortafit stressed mesh",
    )

    rep_cfg = dict(cfg["report"])
    rep_cfg.update(_provenance(cfg, mesh="fitted.vtk"))
    report = build_report(result.fitted, field, rep_cfg, reference_mesh=target)
    payload = report.as_dict()
    validate_report(payload)
    files["report.json"] = _write_json(os.path.join(case_dir, "report.json"), payload)

    manifest = {
        "tool_version": __version__,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "template": os.path.basename(template_path),
        "target": os.path.basename(target_path),
        "files": {name: _hash_file(path) for name, path in sorted(files.items())},
    }
    _write_json(os.path.join(case_dir, "manifest.json"), manifest)
    tables = _quality_table(qrep) + "\n\n" + _report_table(report)
    line = (
        f"{os.path.basename(case_dir) or case_dir}: chamfer {result.final_chamfer:.4f} mm, "
        f"min Jacobian {result.min_jacobian:.4f}, stress residual {field.residual:.2e}"
    )
    return line, tables


def cmd_pipeline(args):
    cfg = load_config(args.config, args.set or ())
    os.makedirs(args.out, exist_ok=True)
    if len(args.targets) == 1:
        cases = [(args.targets[0], args.out)]
    else:
        cases = [
            (t, os.path.join(args.out, f"case_{i:02d}_{os.path.splitext(os.path.basename(t))[0]}"))
            for i, t in enumerate(args.targets)
        ]

    results = []
    if args.jobs > 1 and len(cases) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = [pool.submit(_run_case, args.template, t, d, cfg, args.seed) for t, d in cases]
            results = [f.result() for f in futs]
    else:
        for t, d in cases:
            results.append(_run_case(args.template, t, d, cfg, args.seed))

    for line, tables in results:
        print(line)
        if args.summary_table:
            print(tables)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")


def build_parser():
    parser = argparse.ArgumentParser(prog="aortafit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aortafit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic tube mesh")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("template", help="average corresponded meshes")
    p.add_argument("meshes", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("fit", help="fit an SVF deforming template onto target")
    p.add_argument("--template", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("warp", help="warp a mesh through a stored SVF")
    p.add_argument("--mesh", required=True)
    p.add_argument("--svf", required=True, help="SVF header file")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("quality", help="element quality and self-intersection report")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.add_argument("--brute", action="store_true", help="brute-force intersection search")
    p.add_argument("--summary-table", action="store_true")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("chamfer", help="symmetric chamfer distance between two meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.set_defaults(func=cmd_chamfer)

    p = sub.add_parser("stress", help="membrane stress solve; writes cell data + summary")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="stressed mesh path")
    p.add_argument("--summary", help="regional summary JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("report", help="clinical report (diameters + stress stats)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", help="ground-truth mesh for diameter errors")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.add_argument("--summary-table", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="fit, quality, stress, and report in one bundle")
    p.add_argument("--template", required=True)
    p.add_argument("--target", dest="targets", action="append", required=True, help="repeatable")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="concurrent cases")
    p.add_argument("--summary-table", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FitDivergence, SolverError, FloatingPointError) as exc:
        print(f"aortafit: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (MeshFileError, ValueError, OSError) as exc:
        print(f"aortafit: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
