import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from conftest import icosphere
from octsdf import cli
from octsdf.mesh import TriangleMesh, mesh_digest, read_mesh, write_mesh

TINY = {
    "octree": {"levels": 2, "voxel_size": 0.1, "feature_dim": 8},
    "network": {"width": 16},
    "train": {"steps": 300, "batch_size": 256},
    "scene": {"n_rays": 4000},
    "refine": {"max_iters": 3},
    "eval": {"n_samples": 2000, "n_gt": 4000},
}


@pytest.fixture
def sphere_file(tmp_path):
    v, f = icosphere(3)
    path = tmp_path / "sphere.ply"
    write_mesh(TriangleMesh(v, f), path)
    return path


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.mark.parametrize("command", sorted(cli.COMMAND_FLAGS))
def test_help_lists_every_flag(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    for name in cli.COMMAND_FLAGS[command]:
        assert f"--{name.replace('_', '-')}" in text
    assert "(default:" in text


def test_flag_defaults_come_from_config_defaults(capsys):
    cli.main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    assert "overrides octree.levels (default: 3)" in text
    assert "overrides loss.hessian_scale (default: 1e-11)" in text


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("octree:\n  levelz: 3\n")
    with pytest.raises(cli.ConfigError, match="octree.levelz"):
        cli.load_config(path)


def test_one_line_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("bogus: 1\n")
    code = cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1
    assert err[0].startswith("octsdf-error command=synth type=ConfigError message=")
    assert "bogus" in err[0]


def test_missing_input_propagates(tmp_path, capsys):
    code = cli.main(["eval", str(tmp_path / "nope.ply"), str(tmp_path / "gt.xyz"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "type=FileNotFoundError" in capsys.readouterr().err


def test_flags_win_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("refine: {eta: 0.2}\nseed: 3\n")
    cfg = cli.load_config(path, {"eta": 0.7, "seed": None})
    assert cfg["refine"]["eta"] == 0.7 and cfg["seed"] == 3
    assert cfg["octree"]["levels"] == 3


def test_scene_shapes_config(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"scene": {
        "shapes": [{"type": "sphere", "radius": 0.5}],
        "sensors": [[0, 0, 2]], "rays_per_sensor": 100, "noise": 0.0}}))
    cfg = cli.load_config(path)
    assert len(cli.build_scene(cfg).sensors) == 1


def test_eval_mesh_against_itself(sphere_file, tmp_path, capsys):
    code = cli.main(["eval", str(sphere_file), str(sphere_file), "--out", str(tmp_path / "e"),
                     "--n-samples", "3000"])
    assert code == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["f_score_pct"] == 100.0 and rep["chamfer_l1_m"] == 0.0
    assert last_json(capsys)["f_score_pct"] == 100.0
    echoed = yaml.safe_load((tmp_path / "e" / "config.yaml").read_text())
    assert echoed["eval"]["n_samples"] == 3000


def test_refine_zero_iterations_keeps_hash(sphere_file, tmp_path, capsys):
    assert cli.main(["refine", str(sphere_file), "--out", str(tmp_path / "r"), "--max-iters", "0"]) == 0
    res = last_json(capsys)
    assert res["digest_in"] == res["digest_out"]
    assert mesh_digest(read_mesh(tmp_path / "r" / "refined.ply")) == mesh_digest(read_mesh(sphere_file))
    assert (tmp_path / "r" / "heatmap_before.ply").exists()


def test_refine_with_gt_uses_fscore(sphere_file, tmp_path, capsys):
    assert cli.main(["refine", str(sphere_file), "--gt", str(sphere_file), "--out", str(tmp_path / "r"),
                     "--n-samples", "2000", "--max-iters", "10"]) == 0
    res = last_json(capsys)
    assert res["stopped"] == "plateau"
    rows = (tmp_path / "r" / "refine.csv").read_text().splitlines()
    assert float(rows[1].split(",")[3]) == pytest.approx(100.0)


def test_commands_are_idempotent(sphere_file, tmp_path):
    def snapshot(d):
        return {p.name: p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    for argv in (["eval", str(sphere_file), str(sphere_file), "--n-samples", "500"],
                 ["refine", str(sphere_file), "--max-iters", "2"]):
        out = tmp_path / argv[0]
        assert cli.main(argv + ["--out", str(out)]) == 0
        first = snapshot(out)
        assert cli.main(argv + ["--out", str(out)]) == 0
        assert snapshot(out) == first


def test_pipeline_stages(tiny_config, tmp_path, capsys):
    base = ["--config", str(tiny_config)]
    assert cli.main(["synth", *base, "--out", str(tmp_path / "s"), "--seed", "5"]) == 0
    scans = sorted((tmp_path / "s" / "scans").iterdir())
    poses = np.loadtxt(tmp_path / "s" / "poses.txt")
    assert len(scans) == len(poses) == 8 and poses.shape[1] == 12

    assert cli.main(["train", str(tmp_path / "s" / "scans"), "--poses", str(tmp_path / "s" / "poses.txt"),
                     *base, "--out", str(tmp_path / "t"), "--steps", "20"]) == 0
    assert last_json(capsys)["steps"] == 20
    header = (tmp_path / "t" / "loss.csv").read_text().splitlines()[0]
    assert header == "step,total,bce,eikonal,hessian,wall_ms"
    ck = (tmp_path / "t" / "checkpoint.npz").read_bytes()

    assert cli.main(["train", str(tmp_path / "s" / "scans"), "--poses", str(tmp_path / "s" / "poses.txt"),
                     *base, "--out", str(tmp_path / "t"), "--steps", "20"]) == 0
    assert (tmp_path / "t" / "checkpoint.npz").read_bytes() == ck

    assert cli.main(["extract", str(tmp_path / "t" / "checkpoint.npz"), *base, "--out", str(tmp_path / "x"),
                     "--format", "obj"]) == 0
    assert (tmp_path / "x" / "mesh.obj").exists()


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "octsdf.cli", "eval", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--threshold-cm" in out.stdout
