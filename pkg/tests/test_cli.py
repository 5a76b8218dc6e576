"""Command-line interface: config handling, subcommands, exit codes."""

import json
import os

import numpy as np
import pytest

from conftest import bulged_cylinder, straight_cylinder

from aortafit import __version__
from aortafit.cli import config_hash, default_config, load_config, main
from aortafit.quadmesh import load_mesh, save_mesh
from aortafit.volgrid import GridGeom, Volume3D, save_volume

FIT_OVERRIDES = [
    "--set", "fit.levels=[[4,4,4],[6,6,6]]",
    "--set", "fit.svf_dims=[6,6,6]",
    "--set", "fit.iters_per_level=40",
    "--set", "grid.spacing=2.0",
]


@pytest.fixture(scope="module")
def mesh_files(tmp_path_factory):
    """Small template/target meshes saved to disk once for CLI runs."""
    root = tmp_path_factory.mktemp("meshes")
    template = straight_cylinder(circumferential=8, axial=10, length=30.0, radius=5.0)
    shifted = template.with_vertices(template.vertices + np.array([1.2, -0.8, 0.6]))
    bulged = bulged_cylinder(circumferential=8, axial=10, length=30.0, radius=5.0,
                             amplitude=1.5, width=4.0, center=12.0)
    tube = straight_cylinder()  # 24 x 60 for the stress oracle
    paths = {}
    for name, mesh in (("template", template), ("shifted", shifted),
                       ("bulged", bulged), ("tube", tube)):
        paths[name] = str(root / f"{name}.vtk")
        save_mesh(mesh, paths[name])
    return paths


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def test_default_config_sections():
    cfg = default_config()
    assert set(cfg) == {"grid", "phantom", "fit", "weights", "diffeo", "membrane", "report"}
    # nested dataclass settings live in their own sections, not under fit
    assert {"weights", "diffeo", "seed"}.isdisjoint(cfg["fit"])
    assert cfg["grid"] == {"spacing": 1.0, "margin": 5.0}
    assert "radius_profile" not in cfg["phantom"]


def test_config_hash_stable_and_sensitive():
    a = config_hash(default_config())
    b = config_hash(default_config())
    assert a == b and len(a) == 64
    tweaked = default_config()
    tweaked["grid"]["spacing"] = 2.0
    assert config_hash(tweaked) != a


def test_load_config_merges_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"grid": {"spacing": 2.0}, "membrane": {"pressure": 20.0}}))
    cfg = load_config(str(path), overrides=("grid.margin=7.5", "report.peak_rule=percentile"))
    assert cfg["grid"] == {"spacing": 2.0, "margin": 7.5}
    assert cfg["membrane"]["pressure"] == 20.0
    assert cfg["membrane"]["thickness"] == 2.0
    assert cfg["report"]["peak_rule"] == "percentile"  # bare word stays a string


def test_load_config_typed_overrides():
    cfg = load_config(overrides=(
        "fit.levels=[[4,4,4],[8,8,8]]",
        "membrane.fixed_rings=[]",
        "fit.iters_per_level=5",
        "diffeo.auto_steps=false",
    ))
    assert cfg["fit"]["levels"] == [[4, 4, 4], [8, 8, 8]]
    assert cfg["membrane"]["fixed_rings"] == []
    assert cfg["fit"]["iters_per_level"] == 5
    assert cfg["diffeo"]["auto_steps"] is False


def test_load_config_rejections(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="invalid JSON"):
        load_config(str(bad))
    listy = tmp_path / "list.json"
    listy.write_text("[1, 2]")
    with pytest.raises(ValueError, match="JSON object"):
        load_config(str(listy))
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"grids": {}}))
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(str(unknown))
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps({"grid": {"space": 1.0}}))
    with pytest.raises(ValueError, match="grid.*space"):
        load_config(str(nested))
    with pytest.raises(ValueError, match="--set needs"):
        load_config(overrides=("grid.spacing",))
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(overrides=("grid.spcing=1.0",))
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(overrides=("grid.spacing.x=1.0",))


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert f"aortafit {__version__}" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Simple subcommands
# ---------------------------------------------------------------------------

def test_phantom_command(tmp_path, capsys):
    out = str(tmp_path / "phantom.vtk")
    code = main(["phantom", "--out", out,
                 "--set", "phantom.circumferential=8", "--set", "phantom.axial=12"])
    assert code == 0
    assert "wrote" in capsys.readouterr().out
    mesh = load_mesh(out)
    assert mesh.n_vertices == 8 * 12
    assert mesh.ring_layout == (8, 12)


def test_template_command_averages(tmp_path, mesh_files, capsys):
    out = str(tmp_path / "avg.vtk")
    code = main(["template", mesh_files["template"], mesh_files["shifted"], "--out", out])
    assert code == 0
    avg = load_mesh(out)
    a = load_mesh(mesh_files["template"])
    b = load_mesh(mesh_files["shifted"])
    assert np.allclose(avg.vertices, 0.5 * (a.vertices + b.vertices), atol=1e-12)


def test_chamfer_command_self_is_zero(mesh_files, capsys):
    code = main(["chamfer", mesh_files["template"], mesh_files["template"]])
    assert code == 0
    assert float(capsys.readouterr().out.strip()) == 0.0


def test_quality_command_json_and_table(tmp_path, mesh_files, capsys):
    out = str(tmp_path / "quality.json")
    code = main(["quality", "--mesh", mesh_files["template"], "--out", out,
                 "--summary-table"])
    assert code == 0
    assert "equiangle_skew" in capsys.readouterr().out
    data = json.loads(open(out).read())
    assert data["n_elements"] == 8 * 9
    assert data["n_degenerate"] == 0
    assert data["self_intersection_count"] == 0
    assert data["provenance"]["tool_version"] == __version__


def test_stress_command_free_end_cylinder(tmp_path, mesh_files, capsys):
    out = str(tmp_path / "stressed.vtk")
    summary = str(tmp_path / "stress.json")
    code = main(["stress", "--mesh", mesh_files["tube"], "--out", out,
                 "--summary", summary, "--set", "membrane.fixed_rings=[]"])
    assert code == 0
    data = json.loads(open(summary).read())
    assert data["pressure_kpa"] == 16.0
    assert data["residual"] <= 1e-6
    for name, entry in data["regional"].items():
        assert abs(entry["mean_sigma1_kpa"] / 120.0 - 1.0) < 0.02, name
    _, cells = load_mesh(out, return_cell_data=True)
    assert {"n11", "n22", "n12", "sigma1", "sigma2"} <= set(cells)
    ratio = cells["sigma1"] / (cells["n11"] / 2.0 * 1e3)
    assert np.allclose(ratio, 1.0, atol=1e-4)  # sigma1 ~ hoop resultant / t


def test_report_command_with_reference(tmp_path, mesh_files, capsys):
    out = str(tmp_path / "report.json")
    code = main(["report", "--mesh", mesh_files["tube"], "--reference",
                 mesh_files["tube"], "--out", out, "--summary-table",
                 "--set", "membrane.fixed_rings=[]"])
    assert code == 0
    assert "max_diameter_mm" in capsys.readouterr().out
    data = json.loads(open(out).read())
    from aortafit.clinical import validate_report

    validate_report(data)
    for entry in data["regions"].values():
        assert entry["max_diameter_mm"] == pytest.approx(30.0, abs=1e-9)
        assert entry["diameter_error_mm"] == 0.0
    assert data["provenance"]["mesh"] == "tube.vtk"


# ---------------------------------------------------------------------------
# Fit and warp
# ---------------------------------------------------------------------------

def test_fit_and_warp_round_trip(tmp_path, mesh_files, capsys):
    fit_dir = str(tmp_path / "fit")
    code = main(["fit", "--template", mesh_files["template"], "--target",
                 mesh_files["shifted"], "--out", fit_dir, "--seed", "0",
                 *FIT_OVERRIDES])
    assert code == 0
    assert "fit done" in capsys.readouterr().out

    summary = json.loads(open(os.path.join(fit_dir, "summary.json")).read())
    assert summary["final_chamfer_mm"] < 0.1
    assert summary["min_jacobian"] > 0.5
    history = json.loads(open(os.path.join(fit_dir, "history.json")).read())
    assert history["level_starts"] == [0, 40]
    assert len(history["loss"]) == 80

    # Warping the template through the stored SVF reproduces fitted.vtk
    # bit for bit: same exponentiation settings, lossless mesh round trip.
    warped_path = str(tmp_path / "warped.vtk")
    code = main(["warp", "--mesh", mesh_files["template"], "--svf",
                 os.path.join(fit_dir, "svf.hdr"), "--out", warped_path])
    assert code == 0
    fitted = load_mesh(os.path.join(fit_dir, "fitted.vtk"))
    warped = load_mesh(warped_path)
    assert np.array_equal(fitted.vertices, warped.vertices)


def test_warp_rejects_scalar_volume(tmp_path, mesh_files, capsys):
    vol = Volume3D(GridGeom((4, 4, 4), (10.0, 10.0, 10.0), (-15.0, -15.0, -5.0)),
                   np.zeros((4, 4, 4)))
    hdr = str(tmp_path / "scalar.hdr")
    save_volume(vol, hdr)
    code = main(["warp", "--mesh", mesh_files["template"], "--svf", hdr,
                 "--out", str(tmp_path / "w.vtk")])
    assert code == 2
    assert "3-component" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Pipeline bundles
# ---------------------------------------------------------------------------

def _manifest_hashes(bundle_dir):
    out = {}
    for case in sorted(os.listdir(bundle_dir)):
        mpath = os.path.join(bundle_dir, case, "manifest.json")
        if os.path.isdir(os.path.join(bundle_dir, case)) and os.path.exists(mpath):
            out[case] = json.loads(open(mpath).read())["files"]
    return out


def test_pipeline_two_targets_deterministic(tmp_path, mesh_files, capsys):
    args = ["pipeline", "--template", mesh_files["template"],
            "--target", mesh_files["shifted"], "--target", mesh_files["bulged"],
            "--seed", "7", *FIT_OVERRIDES]
    out_a = str(tmp_path / "run_a")
    out_b = str(tmp_path / "run_b")
    assert main(args + ["--out", out_a]) == 0
    assert main(args + ["--out", out_b]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert sum("chamfer" in ln for ln in lines) == 4

    hashes_a = _manifest_hashes(out_a)
    hashes_b = _manifest_hashes(out_b)
    assert set(hashes_a) == {"case_00_shifted", "case_01_bulged"}
    # Byte-identical outputs on a rerun: every artifact hash matches.
    assert hashes_a == hashes_b
    for case, files in hashes_a.items():
        assert {"fitted.vtk", "svf.hdr", "svf.raw", "history.json",
                "summary.json", "quality.json", "stressed.vtk",
                "report.json"} == set(files)


def test_pipeline_parallel_matches_serial(tmp_path, mesh_files, capsys):
    args = ["pipeline", "--template", mesh_files["template"],
            "--target", mesh_files["shifted"], "--target", mesh_files["bulged"],
            "--seed", "7", *FIT_OVERRIDES]
    serial = str(tmp_path / "serial")
    parallel = str(tmp_path / "parallel")
    assert main(args + ["--out", serial, "--jobs", "1"]) == 0
    assert main(args + ["--out", parallel, "--jobs", "2"]) == 0
    assert _manifest_hashes(serial) == _manifest_hashes(parallel)


def test_pipeline_single_target_writes_flat(tmp_path, mesh_files, capsys):
    out = str(tmp_path / "single")
    code = main(["pipeline", "--template", mesh_files["template"],
                 "--target", mesh_files["shifted"], "--out", out, "--seed", "3",
                 *FIT_OVERRIDES])
    assert code == 0
    assert os.path.exists(os.path.join(out, "manifest.json"))
    report = json.loads(open(os.path.join(out, "report.json")).read())
    from aortafit.clinical import validate_report

    validate_report(report)


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_exit_code_2_missing_file(tmp_path, capsys):
    code = main(["quality", "--mesh", str(tmp_path / "nope.vtk")])
    assert code == 2
    assert "aortafit:" in capsys.readouterr().err


def test_exit_code_2_bad_config_value(tmp_path, capsys):
    code = main(["phantom", "--out", str(tmp_path / "p.vtk"),
                 "--set", "phantom.circumferential=2"])
    assert code == 2


def test_exit_code_2_malformed_mesh(tmp_path, capsys):
    bad = tmp_path / "bad.vtk"
    bad.write_text("# vtk DataFile Version 3.0\nnot a mesh\n")
    code = main(["quality", "--mesh", str(bad)])
    assert code == 2


def test_exit_code_3_solver_failure(tmp_path, mesh_files, capsys):
    # curved tube with free ends: no membrane equilibrium exists
    arch = str(tmp_path / "arch.vtk")
    from aortafit.phantom import PhantomSpec, make_phantom

    save_mesh(make_phantom(PhantomSpec(circumferential=10, axial=16)), arch)
    code = main(["stress", "--mesh", arch, "--out", str(tmp_path / "s.vtk"),
                 "--set", "membrane.fixed_rings=[]"])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err


def test_exit_code_3_fit_divergence(tmp_path, mesh_files, capsys):
    code = main(["fit", "--template", mesh_files["template"], "--target",
                 mesh_files["shifted"], "--out", str(tmp_path / "f"), "--seed", "0",
                 "--set", "fit.levels=[[4,4,4]]", "--set", "fit.svf_dims=[4,4,4]",
                 "--set", "fit.iters_per_level=80", "--set", "fit.step=2.0",
                 "--set", "fit.optimizer=gd", "--set", "fit.tol=0.0",
                 "--set", "weights.alpha=0.0", "--set", "grid.spacing=2.0"])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err
