"""Reconstruction quality: accuracy, completeness, Chamfer-L1 and F-score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh


@dataclass(frozen=True)
class ReconReport:
    accuracy_cm: float
    completeness_cm: float
    chamfer_l1_m: float
    acc_ratio_pct: float
    comp_ratio_pct: float
    f_score_pct: float
    threshold_cm: float
    n_pred: int
    n_gt: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"accuracy        {self.accuracy_cm:.4f} cm",
            f"completeness    {self.completeness_cm:.4f} cm",
            f"chamfer_l1      {self.chamfer_l1_m:.6f} m",
            f"acc_ratio       {self.acc_ratio_pct:.2f} %",
            f"comp_ratio      {self.comp_ratio_pct:.2f} %",
            f"f_score         {self.f_score_pct:.2f} %",
            f"threshold       {self.threshold_cm:g} cm",
            f"n_pred          {self.n_pred}",
            f"n_gt            {self.n_gt}",
        ]
        return "\n".join(lines) + "\n"


def f_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh triangles."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    return (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]


def nearest_distances(query: np.ndarray, reference: np.ndarray, workers: int = 1) -> np.ndarray:
    tree = cKDTree(reference)
    d, _ = tree.query(query, k=1, workers=workers)
    return d


def evaluate(pred_points, gt_points, threshold_cm: float = 10.0, workers: int = 1) -> ReconReport:
    """Compare predicted and ground-truth point sets (metres in, report in the
    usual units: cm for accuracy/completeness, m for Chamfer-L1, % for ratios)."""
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("both point sets must be non-empty")
    thr = threshold_cm / 100.0
    d_pred = nearest_distances(pred, gt, workers)
    d_gt = nearest_distances(gt, pred, workers)
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    p = 100.0 * float(np.mean(d_pred < thr))
    r = 100.0 * float(np.mean(d_gt < thr))
    return ReconReport(
        accuracy_cm=acc * 100.0,
        completeness_cm=comp * 100.0,
        chamfer_l1_m=0.5 * (acc + comp),
        acc_ratio_pct=p,
        comp_ratio_pct=r,
        f_score_pct=f_score(p, r),
        threshold_cm=float(threshold_cm),
        n_pred=len(pred),
        n_gt=len(gt),
    )


def evaluate_mesh(mesh: TriangleMesh, gt_points, threshold_cm: float = 10.0, n_samples: int = 10_000,
                  seed: int = 0, workers: int = 1) -> ReconReport:
    return evaluate(sample_surface(mesh, n_samples, seed), gt_points, threshold_cm, workers)
