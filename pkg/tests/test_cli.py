import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from rbfpdm import cli
from rbfpdm.cli import main
from rbfpdm.errors import NumericalError
from rbfpdm.mesh import icosphere, load_mesh, save_mesh
from rbfpdm.shapes import load_particles, save_particles

OPT = {"learning_rate": 4000.0, "beta": 1e-5, "gamma": 4e-4, "step_clip": 0.5,
       "stage1_max_epochs": 6, "regularizer_interval": 2, "stage2_epochs": 3}


@pytest.fixture(scope="module")
def identical_run(tmp_path_factory):
    """Five identical spheres, J = 32, optimized once for the whole module."""
    root = tmp_path_factory.mktemp("identical")
    mesh = icosphere(3, radius=20.0)
    for k in range(5):
        save_mesh(mesh, root / f"s{k}.obj")
    cfg = {"shapes": [f"s{k}.obj" for k in range(5)], "particles": 32, "spacing": 2.0, "padding": 8.0,
           "seed": 3, "optimization": OPT}
    (root / "config.yaml").write_text(yaml.safe_dump(cfg))
    code = main(["--serial", "optimize", str(root / "config.yaml")])
    return root, code


def test_optimize_identical_spheres(identical_run, capsys):
    root, code = identical_run
    assert code == 0
    out = root / "output"
    for phase in ("init", "stage1", "final"):
        assert len(list((out / f"particles_{phase}").glob("*.particles"))) == 5
    run = json.loads((out / "run.json").read_text())
    assert run["stage1_converged"] and run["stage1_epochs"] == 2
    rows = list(csv.DictReader(open(out / "log.csv")))
    assert [r["stage"] for r in rows] == ["1", "1", "2", "2", "2"]

    assert main(["check-correspondence", str(out / "particles_final"), str(root / "config.yaml")]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "shape_id,mismatched_particles,missing_neighbors"
    assert all(line.endswith(",0,0") for line in text.splitlines()[1:])


def test_check_correspondence_swapped_pair(identical_run, tmp_path, capsys):
    root, _ = identical_run
    ps = load_particles(root / "output" / "particles_final")
    p = ps.particles[2]
    d = np.linalg.norm(p[:, None] - p[None], axis=2)
    np.fill_diagonal(d, np.inf)
    b = int(np.argmin(d[0]))
    p[[0, b]] = p[[b, 0]]
    bad = tmp_path / "swapped"
    save_particles(ps, bad)
    shutil.copy(root / "output" / "run.json", tmp_path / "run.json")
    csv_out = tmp_path / "report.csv"
    config = str(root / "config.yaml")
    assert main(["check-correspondence", str(bad), config, "--out", str(csv_out)]) == 1
    rows = {r["shape_id"]: r for r in csv.DictReader(open(csv_out))}
    assert int(rows["s2"]["mismatched_particles"]) > 0
    assert all(int(r["mismatched_particles"]) == 0 for k, r in rows.items() if k != "s2")
    assert main(["check-correspondence", str(bad), config, "--tolerance", "32"]) == 0
    capsys.readouterr()


def test_evaluate_and_reconstruct(identical_run, tmp_path, capsys):
    root, _ = identical_run
    config = str(root / "config.yaml")
    final = root / "output" / "particles_final"
    out = tmp_path / "eval"
    assert main(["evaluate", str(final), config, "--out", str(out), "--samples", "200"]) == 0
    for name in ("compactness.csv", "generalization.csv", "specificity.csv", "surface_distance.csv",
                 "summary.txt"):
        assert (out / name).is_file()
    comp = list(csv.DictReader(open(out / "compactness.csv")))
    assert len(comp) == 4 and float(comp[-1]["compactness"]) == 1.0
    surf = list(csv.DictReader(open(out / "surface_distance.csv")))
    assert [r["shape_id"] for r in surf] == [f"s{k}" for k in range(5)]
    assert all(float(r["max"]) < 1e-6 for r in surf)
    assert "specificity" in capsys.readouterr().out

    rec = tmp_path / "rec"
    assert main(["reconstruct", str(final), config, "--out", str(rec)]) == 0
    meshes = sorted(rec.glob("*.obj"))
    assert len(meshes) == 5
    assert np.abs(load_mesh(meshes[1]).vertices - icosphere(3, radius=20.0).vertices).max() < 1e-6


def test_evaluate_missing_particle_file(identical_run, tmp_path, capsys):
    root, _ = identical_run
    partial = tmp_path / "partial"
    shutil.copytree(root / "output" / "particles_final", partial)
    (partial / "s3.particles").unlink()
    assert main(["evaluate", str(partial), str(root / "config.yaml")]) == 1
    assert "s3" in capsys.readouterr().err


def test_generate_synthetic(tmp_path, capsys):
    assert main(["generate-synthetic", "ellipsoid", "--count", "10", "--seed", "2",
                 "--subdivisions", "2", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["count"] == 10 and all(len(e["params"]["axes"]) == 3 for e in manifest["shapes"])
    cfg = yaml.safe_load((tmp_path / "a" / "config.yaml").read_text())
    assert len(cfg["shapes"]) == 10 and cfg["particles"] == 64
    assert main(["generate-synthetic", "ellipsoid", "--count", "10", "--seed", "2",
                 "--subdivisions", "2", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
    assert main(["generate-synthetic", "sphere-bump", "--count", "2", "--subdivisions", "2",
                 str(tmp_path / "c")]) == 0
    assert all("mask" in e for e in json.loads((tmp_path / "c" / "manifest.json").read_text())["shapes"])
    capsys.readouterr()


def test_init_writes_particles(tmp_path, capsys):
    assert main(["generate-synthetic", "ellipsoid", "--count", "3", "--subdivisions", "2",
                 "--particles", "12", str(tmp_path)]) == 0
    assert main(["--threads", "2", "init", str(tmp_path / "config.yaml")]) == 0
    ps = load_particles(tmp_path / "output" / "particles_init")
    assert ps.particles.shape == (3, 12, 3)
    assert "reference shape" in capsys.readouterr().out


def test_invalid_inputs_exit_1(tmp_path, capsys):
    assert main(["optimize", str(tmp_path / "nope.yaml")]) == 1
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"shapes": ["x.obj", "y.obj"], "particles": 8}))
    assert main(["optimize", str(tmp_path / "c.yaml")]) == 1
    assert "not found" in capsys.readouterr().err
    assert main(["--threads", "0", "init", str(tmp_path / "c.yaml")]) == 1


def test_numerical_failure_exit_2(monkeypatch, tmp_path, capsys):
    def boom(args):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "cmd_init", boom)
    (tmp_path / "c.yaml").write_text("")
    assert main(["init", str(tmp_path / "c.yaml")]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_optimize_reports_unconverged_stage1(tmp_path, capsys):
    """Stage 1 capped before its first checkpoint: particles are still written, but exit 1."""
    for k, r in enumerate((18.0, 20.0, 23.0)):
        save_mesh(icosphere(3, radius=r), tmp_path / f"m{k}.obj")
    opt = dict(OPT, stage1_max_epochs=1, stage2_epochs=1)
    cfg = {"shapes": [f"m{k}.obj" for k in range(3)], "particles": 16, "spacing": 2.0, "optimization": opt}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["--serial", "optimize", str(tmp_path / "c.yaml")]) == 1
    run = json.loads((tmp_path / "output" / "run.json").read_text())
    assert not run["stage1_converged"] and run["stage2_epochs"] == 1
    assert len(list((tmp_path / "output" / "particles_final").glob("*.particles"))) == 3
    assert "did not meet the mismatch tolerance" in capsys.readouterr().err
