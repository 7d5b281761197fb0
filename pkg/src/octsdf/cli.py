"""Command line entry point: ``octsdf {synth,train,extract,refine,eval,run}``.

Every command reads an optional YAML config, applies flag overrides on top
(flags win) and writes the effective config as ``config.yaml`` next to its
outputs. Failures exit with status 1 and a single stderr line of the form::

    octsdf-error command=<cmd> type=<ExceptionType> message="<text>"
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import field as field_mod
from . import mesh as mesh_mod
from . import refine as refine_mod
from .metrics import evaluate, sample_surface
from .pointcloud import PointCloud, SamplingConfig, load_pointcloud, read_points, save_xyz
from .scenes import SyntheticScene, sphere_scene, synth_scan
from .training import LossConfig, TrainConfig, config_dict, train, write_history_csv

logger = logging.getLogger("octsdf")

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "octree": {"levels": 3, "voxel_size": 0.1, "feature_dim": 128},
    "network": {"width": 128, "depth": 2},
    "loss": {
        "lambda_bce": 1.0,
        "lambda_eikonal": 0.1,
        "lambda_hessian": 1.0,
        "sigma_occ": None,  # voxel_size / 2
        "hessian_scale": 1e-11,
        "fdm_step": None,  # voxel_size / 8
        "n_hessian_samples": None,  # batch_size / 8
    },
    "sampling": {"n_surface": 4, "n_free": 2, "truncation": 0.3},
    "train": {"steps": 2000, "batch_size": 1024, "lr_features": 1e-3, "lr_mlp": 1e-4},
    "extract": {"cell": None, "dilation": 1},  # cell None -> voxel_size / 2
    "refine": {"eta": 0.5, "max_iters": 20, "plateau_tol": 1e-4, "weighted": True, "mode": "damped"},
    "eval": {"threshold_cm": 10.0, "n_samples": 10000, "n_gt": 20000},
    "scene": {"preset": "sphere", "radius": 1.0, "n_rays": 50000, "noise": 0.005, "n_sensors": 8},
}

# flag name -> config path; every flag defaults to "take it from the config"
OVERRIDES = {
    "seed": ("seed",),
    "threads": ("threads",),
    "levels": ("octree", "levels"),
    "voxel_size": ("octree", "voxel_size"),
    "feature_dim": ("octree", "feature_dim"),
    "width": ("network", "width"),
    "depth": ("network", "depth"),
    "lambda_bce": ("loss", "lambda_bce"),
    "lambda_eikonal": ("loss", "lambda_eikonal"),
    "lambda_hessian": ("loss", "lambda_hessian"),
    "sigma_occ": ("loss", "sigma_occ"),
    "hessian_scale": ("loss", "hessian_scale"),
    "fdm_step": ("loss", "fdm_step"),
    "truncation": ("sampling", "truncation"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "lr_features": ("train", "lr_features"),
    "lr_mlp": ("train", "lr_mlp"),
    "cell": ("extract", "cell"),
    "eta": ("refine", "eta"),
    "max_iters": ("refine", "max_iters"),
    "plateau_tol": ("refine", "plateau_tol"),
    "threshold_cm": ("eval", "threshold_cm"),
    "n_samples": ("eval", "n_samples"),
}

COMMAND_FLAGS = {
    "synth": ["seed", "threads"],
    "train": ["seed", "threads", "levels", "voxel_size", "feature_dim", "width", "depth", "lambda_bce",
              "lambda_eikonal", "lambda_hessian", "sigma_occ", "hessian_scale", "fdm_step", "truncation", "steps",
              "batch_size", "lr_features", "lr_mlp"],
    "extract": ["threads", "cell"],
    "refine": ["seed", "threads", "eta", "max_iters", "plateau_tol", "threshold_cm", "n_samples"],
    "eval": ["seed", "threads", "threshold_cm", "n_samples"],
}
COMMAND_FLAGS["run"] = sorted(OVERRIDES)

SCENE_PRESET_KEYS = {"preset", "radius", "n_rays", "noise", "n_sensors"}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if key == "scene":
            out[key] = _check_scene(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a scalar")
            out[key] = value
    return out


def _check_scene(value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError("config key 'scene' must be a mapping")
    if "shapes" in value:
        SyntheticScene.from_dict(value)  # validates keys
        return copy.deepcopy(value)
    extra = set(value) - SCENE_PRESET_KEYS
    if extra:
        raise ConfigError(f"unknown config key 'scene.{sorted(extra)[0]}'")
    if value.get("preset", "sphere") != "sphere":
        raise ConfigError(f"unknown scene preset {value['preset']!r}")
    return {**DEFAULTS["scene"], **value}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then non-``None`` flag overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as err:
                raise ConfigError(f"{path}: {err}".replace("\n", " ")) from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = OVERRIDES[name]
        for p in parents:
            node = node[p]
        node[leaf] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    oc, net, tr, lo, sa = cfg["octree"], cfg["network"], cfg["train"], cfg["loss"], cfg["sampling"]
    loss = LossConfig.for_voxel(oc["voxel_size"], tr["batch_size"], **lo)
    return TrainConfig(
        levels=int(oc["levels"]),
        voxel_size=float(oc["voxel_size"]),
        feature_dim=int(oc["feature_dim"]),
        width=int(net["width"]),
        depth=int(net["depth"]),
        steps=int(tr["steps"]),
        batch_size=int(tr["batch_size"]),
        lr_features=float(tr["lr_features"]),
        lr_mlp=float(tr["lr_mlp"]),
        seed=int(cfg["seed"]),
        threads=int(cfg["threads"]),
        sampling=SamplingConfig(int(sa["n_surface"]), int(sa["n_free"]), float(sa["truncation"])),
        loss=loss,
    )


def refine_config(cfg: dict) -> refine_mod.RefineConfig:
    r = cfg["refine"]
    return refine_mod.RefineConfig(eta=float(r["eta"]), max_iters=int(r["max_iters"]),
                                   plateau_tol=float(r["plateau_tol"]), weighted=bool(r["weighted"]), mode=r["mode"])


def build_scene(cfg: dict) -> SyntheticScene:
    sc = cfg["scene"]
    if "shapes" in sc:
        return SyntheticScene.from_dict(sc)
    return sphere_scene(float(sc["radius"]), int(sc["n_rays"]), float(sc["noise"]), int(sc["n_sensors"]))


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, cfg: dict, **extra) -> None:
    doc = copy.deepcopy(cfg)
    doc.update(extra)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def _read_gt(path, cfg: dict) -> np.ndarray:
    """Ground truth as points; meshes are sampled with the master seed."""
    path = Path(path)
    if path.suffix.lower() in (".obj", ".ply"):
        try:
            m = mesh_mod.read_mesh(path)
        except (mesh_mod.MeshError, KeyError, ValueError):
            m = None
        if m is not None and m.n_faces > 0:
            return sample_surface(m, int(cfg["eval"]["n_samples"]), int(cfg["seed"]))
    return read_points(path)


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: dict, out) -> dict:
    """Scan the configured scene. Writes one XYZ per sensor in its local frame,
    KITTI-style ``poses.txt`` and dense ground-truth surface points."""
    out = _outdir(out)
    scene = build_scene(cfg)
    cloud = synth_scan(scene, int(cfg["seed"]))
    scans = out / "scans"
    if scans.exists():
        shutil.rmtree(scans)
    scans.mkdir()
    poses = []
    for frame, origin in enumerate(scene.sensors):
        sel = cloud.frame_ids == frame
        save_xyz(scans / f"{frame:06d}.xyz", cloud.positions[sel] - origin)
        poses.append(np.hstack([np.eye(3), origin[:, None]]).reshape(-1))
    np.savetxt(out / "poses.txt", np.asarray(poses), fmt="%.9f")
    save_xyz(out / "gt.xyz", scene.sample_surface(int(cfg["eval"]["n_gt"]), int(cfg["seed"])))
    _echo(out, cfg)
    return {"points": scans, "poses": out / "poses.txt", "gt": out / "gt.xyz", "n_points": len(cloud)}


def cmd_train(cfg: dict, points, out, poses=None) -> dict:
    out = _outdir(out)
    cloud = points if isinstance(points, PointCloud) else load_pointcloud(points, poses)
    tcfg = train_config(cfg)
    fld, grid, state = train(cloud, tcfg)
    field_mod.save_checkpoint(out / "checkpoint.npz", fld, grid, {"train": config_dict(tcfg), "run": cfg})
    write_history_csv(out / "loss.csv", state.history)
    _echo(out, cfg)
    return {"checkpoint": out / "checkpoint.npz", "loss": out / "loss.csv", "steps": state.step,
            "final_loss": state.history[-1]["total"]}


def cmd_extract(cfg: dict, checkpoint, out, fmt: str = "ply") -> dict:
    out = _outdir(out)
    fld, grid, _ = field_mod.load_checkpoint(checkpoint)
    cell = cfg["extract"]["cell"]
    m = mesh_mod.extract_mesh(fld, grid, None if cell is None else float(cell), int(cfg["extract"]["dilation"]),
                              threads=int(cfg["threads"]))
    path = out / f"mesh.{fmt}"
    mesh_mod.write_mesh(m, path)
    _echo(out, cfg)
    return {"mesh": path, "n_vertices": m.n_vertices, "n_faces": m.n_faces, "watertight": m.is_watertight()}


def cmd_refine(cfg: dict, mesh_path, out, gt=None, fmt: str = "ply") -> dict:
    out = _outdir(out)
    m = mesh_mod.read_mesh(mesh_path)
    metric = None
    if gt is not None:
        gt_pts = _read_gt(gt, cfg)
        ev = cfg["eval"]

        def fscore(cur):
            pts = sample_surface(cur, int(ev["n_samples"]), int(cfg["seed"]))
            return evaluate(pts, gt_pts, float(ev["threshold_cm"]), workers=int(cfg["threads"])).f_score_pct

        metric = fscore

    refined, report = refine_mod.refine(m, refine_config(cfg), metric)
    path = out / f"refined.{fmt}"
    mesh_mod.write_mesh(refined, path)
    report.write_csv(out / "refine.csv")
    if not m.is_empty():
        mesh_mod.write_mesh(refine_mod.heatmap(m), out / "heatmap_before.ply")
        mesh_mod.write_mesh(refine_mod.heatmap(refined), out / "heatmap_after.ply")
    _echo(out, cfg)
    return {"mesh": path, "iterations": report.iterations, "stopped": report.stopped,
            "digest_in": mesh_mod.mesh_digest(m), "digest_out": mesh_mod.mesh_digest(refined)}


def cmd_eval(cfg: dict, mesh_path, gt, out) -> dict:
    out = _outdir(out)
    m = mesh_mod.read_mesh(mesh_path)
    ev = cfg["eval"]
    pts = sample_surface(m, int(ev["n_samples"]), int(cfg["seed"]))
    report = evaluate(pts, _read_gt(gt, cfg), float(ev["threshold_cm"]), workers=int(cfg["threads"]))
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    _echo(out, cfg)
    return {"report": out / "report.json", **report.to_dict()}


def cmd_run(cfg: dict, out) -> dict:
    """synth -> train -> extract -> refine -> eval under ``out``."""
    out = _outdir(out)
    s = cmd_synth(cfg, out / "synth")
    t = cmd_train(cfg, s["points"], out / "train", poses=s["poses"])
    e = cmd_extract(cfg, t["checkpoint"], out / "extract")
    r = cmd_refine(cfg, e["mesh"], out / "refine")
    raw = cmd_eval(cfg, e["mesh"], s["gt"], out / "eval_extracted")
    final = cmd_eval(cfg, r["mesh"], s["gt"], out / "eval")
    shutil.copyfile(final["report"], out / "report.json")
    _echo(out, cfg)
    return {"report": out / "report.json", "f_score_extracted": raw["f_score_pct"],
            "f_score_refined": final["f_score_pct"]}


# ---------------------------------------------------------------------- argparse


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


def _default_of(name: str):
    node = DEFAULTS
    for p in OVERRIDES[name]:
        node = node[p]
    return node


FLAG_TYPES = {"seed": int, "threads": int, "levels": int, "feature_dim": int, "width": int, "depth": int,
              "steps": int, "batch_size": int, "max_iters": int, "n_samples": int}


def _add_common(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", type=Path, help="YAML config; unknown keys are rejected")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for name in COMMAND_FLAGS[command]:
        d = _default_of(name)
        shown = "derived from voxel_size" if d is None else d
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=FLAG_TYPES.get(name, float), default=None,
                       help=f"overrides {'.'.join(OVERRIDES[name])} (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octsdf", description="Neural SDF mapping from LiDAR scans",
                                     formatter_class=_HelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate a LiDAR scan of the configured scene", formatter_class=_HelpFormatter)
    _add_common(p, "synth")

    p = sub.add_parser("train", help="fit the neural SDF to a point cloud", formatter_class=_HelpFormatter)
    p.add_argument("points", type=Path, help="XYZ/PLY file or directory of per-frame scans")
    p.add_argument("--poses", type=Path, default=None, help="3x4 pose per frame, 12 floats per line")
    _add_common(p, "train")

    p = sub.add_parser("extract", help="marching cubes on a trained checkpoint", formatter_class=_HelpFormatter)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--format", choices=("ply", "obj"), default="ply")
    _add_common(p, "extract")

    p = sub.add_parser("refine", help="cotangent-Laplacian mesh refinement", formatter_class=_HelpFormatter)
    p.add_argument("mesh", type=Path)
    p.add_argument("--gt", type=Path, default=None, help="ground truth for the F-score plateau test")
    p.add_argument("--format", choices=("ply", "obj"), default="ply")
    _add_common(p, "refine")

    p = sub.add_parser("eval", help="accuracy/completeness/Chamfer/F-score report", formatter_class=_HelpFormatter)
    p.add_argument("mesh", type=Path)
    p.add_argument("gt", type=Path, help="ground-truth points (XYZ/PLY) or mesh")
    _add_common(p, "eval")

    p = sub.add_parser("run", help="synth, train, extract, refine and eval in one go", formatter_class=_HelpFormatter)
    _add_common(p, "run")
    return parser


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = load_config(args.config, {k: getattr(args, k) for k in COMMAND_FLAGS[args.command]})
    if args.command == "synth":
        return cmd_synth(cfg, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.points, args.out, args.poses)
    if args.command == "extract":
        return cmd_extract(cfg, args.checkpoint, args.out, args.format)
    if args.command == "refine":
        return cmd_refine(cfg, args.mesh, args.out, args.gt, args.format)
    if args.command == "eval":
        return cmd_eval(cfg, args.mesh, args.gt, args.out)
    return cmd_run(cfg, args.out)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = next((a for a in argv if not a.startswith("-")), "?")
    try:
        result = run(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - turned into the one-line error contract
        msg = " ".join(str(exc).split())
        print(f"octsdf-error command={command} type={type(exc).__name__} message={json.dumps(msg)}", file=sys.stderr)
        return 1
    print(json.dumps({k: str(v) if isinstance(v, Path) else v for k, v in result.items()}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
