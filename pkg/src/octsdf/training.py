"""Composite occupancy/Eikonal/biharmonic loss and the optimization loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field, replace

import numpy as np
import torch

from . import octree
from .autodiff import NonFiniteError, Stencil
from .field import MultiScaleField
from .octree import OctreeGrid
from .pointcloud import PointCloud, SamplingConfig, TrainingSamples, sample_rays

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 1e-7
SECOND_ORDER_SCALE = 1e-8
HISTORY_COLUMNS = ("step", "total", "bce", "eikonal", "hessian", "wall_ms")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, breakdown: dict):
        terms = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.breakdown = breakdown


@dataclass(frozen=True)
class LossConfig:
    lambda_bce: float = 1.0
    lambda_eikonal: float = 0.1
    lambda_hessian: float = 1.0
    sigma_occ: float = 0.05
    hessian_scale: float = 1e-11
    fdm_step: float = 0.0125
    n_hessian_samples: int = 128

    def __post_init__(self):
        if min(self.lambda_bce, self.lambda_eikonal, self.lambda_hessian) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma_occ <= 0 or self.fdm_step <= 0:
            raise ValueError("sigma_occ and fdm_step must be positive")

    @classmethod
    def for_voxel(cls, voxel_size: float, batch_size: int, **overrides) -> "LossConfig":
        """Defaults tied to the leaf size: ``sigma_occ = W/2``, ``fdm_step = W/8``,
        Hessian subsample of one eighth of the batch."""
        base = dict(sigma_occ=voxel_size / 2, fdm_step=voxel_size / 8, n_hessian_samples=max(1, batch_size // 8))
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass(frozen=True)
class TrainConfig:
    levels: int = 3
    voxel_size: float = 0.1
    feature_dim: int = 128
    width: int = 128
    depth: int = 2
    steps: int = 2000
    batch_size: int = 1024
    lr_features: float = 1e-3
    lr_mlp: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    seed: int = 0
    threads: int = 1
    sampling: SamplingConfig = dc_field(default_factory=SamplingConfig)
    loss: LossConfig | None = None

    def resolved_loss(self) -> LossConfig:
        return self.loss or LossConfig.for_voxel(self.voxel_size, self.batch_size)


@dataclass
class TrainState:
    step: int = 0
    seed: int = 0
    threads: int = 1
    history: list[dict] = dc_field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None


# ------------------------------------------------------------------ loss terms


def occupancy(sdf, sigma: float):
    return torch.sigmoid(-torch.as_tensor(sdf, dtype=torch.float64) / sigma)


def loss_bce(pred_sdf, label_sdf, sigma_occ: float) -> torch.Tensor:
    """Element-wise binary cross-entropy between logistic occupancies."""
    if sigma_occ <= 0:
        raise ValueError("sigma_occ must be positive")
    p = occupancy(pred_sdf, sigma_occ).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    q = occupancy(label_sdf, sigma_occ).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return -(q * torch.log(p) + (1.0 - q) * torch.log(1.0 - p))


def loss_eikonal(field: MultiScaleField, grid: OctreeGrid, xs) -> torch.Tensor:
    xs = torch.as_tensor(xs, dtype=torch.float64).reshape(-1, 3)
    if len(xs) == 0:
        raise ValueError("eikonal loss needs at least one point")
    _, grad, _ = field.forward_jet(grid, xs, second_order=False)
    return ((grad.norm(dim=1) - 1.0) ** 2).mean()


def biharmonic(field: MultiScaleField, grid: OctreeGrid, xs: torch.Tensor, fdm_step: float):
    """Biharmonic estimate and centre Laplacian at ``xs``: a 7-point stencil
    over the field's exact Laplacian."""
    stencil = Stencil.laplacian7(fdm_step)
    lap = field.laplacian(grid, stencil.points(xs)).reshape(7, -1)
    return stencil.apply(lap), lap[0]


def loss_hessian(field: MultiScaleField, grid: OctreeGrid, xs, fdm_step: float) -> torch.Tensor:
    xs = torch.as_tensor(xs, dtype=torch.float64).reshape(-1, 3)
    if len(xs) == 0:
        raise ValueError("hessian loss needs at least one point")
    bih, _ = biharmonic(field, grid, xs, fdm_step)
    return (bih**2).mean()


def total_loss(field: MultiScaleField, grid: OctreeGrid, query, label, near, cfg: LossConfig,
               hessian_points=None) -> tuple[torch.Tensor, dict]:
    """Weighted loss and its per-term breakdown.

    ``near`` flags near-surface samples; the Eikonal term uses all of them and
    the Hessian term the first ``cfg.n_hessian_samples`` (or
    ``hessian_points`` when given).
    """
    query = torch.as_tensor(query, dtype=torch.float64).reshape(-1, 3)
    label = torch.as_tensor(label, dtype=torch.float64).reshape(-1)
    near = np.asarray(near, dtype=bool).reshape(-1)
    if len(query) == 0:
        raise ValueError("empty batch")
    zero = torch.zeros((), dtype=torch.float64)

    terms = {}
    if cfg.lambda_bce > 0:
        pred = field(grid, query)
        terms["bce"] = loss_bce(pred, label, cfg.sigma_occ).mean()
    else:
        terms["bce"] = zero
    surf = query[torch.as_tensor(near)]
    if cfg.lambda_eikonal > 0 and len(surf):
        terms["eikonal"] = loss_eikonal(field, grid, surf)
    else:
        terms["eikonal"] = zero
    hpts = surf[: cfg.n_hessian_samples] if hessian_points is None else torch.as_tensor(hessian_points, dtype=torch.float64)
    diag = zero
    if cfg.lambda_hessian > 0 and len(hpts):
        bih, lap = biharmonic(field, grid, hpts, cfg.fdm_step)
        terms["hessian"] = (bih**2).mean()
        diag = SECOND_ORDER_SCALE * lap.detach().abs().mean()
    else:
        terms["hessian"] = zero

    weighted = {
        "bce": cfg.lambda_bce * terms["bce"],
        "eikonal": cfg.lambda_eikonal * terms["eikonal"],
        "hessian": cfg.lambda_hessian * cfg.hessian_scale * terms["hessian"],
    }
    total = weighted["bce"] + weighted["eikonal"] + weighted["hessian"]
    breakdown = {k: float(v.detach()) for k, v in weighted.items()}
    breakdown["total"] = float(total.detach())
    breakdown["laplacian_diag"] = float(diag)
    return total, breakdown


# ------------------------------------------------------------------ training


def named_parameters(field: MultiScaleField, grid: OctreeGrid) -> list[tuple[str, torch.Tensor]]:
    """Grid features first (one block per level), then the network weights."""
    params = [(f"grid.level{lvl}", t.features) for lvl, t in enumerate(grid.tables)]
    params += [(f"field.{n}", p) for n, p in field.named_parameters()]
    return params


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def train(points: PointCloud, cfg: TrainConfig | None = None, steps: int | None = None, seed: int | None = None,
          samples: TrainingSamples | None = None, callback=None):
    """Fit grid features and network weights to ray samples of ``points``.

    Returns ``(field, grid, state)``. Raises :class:`TrainingDiverged` when a
    loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    loss_cfg = cfg.resolved_loss()

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(max(1, cfg.threads))
    try:
        rng = _seed_everything(cfg.seed)
        if samples is None:
            samples = sample_rays(points, cfg.sampling, seed=cfg.seed)
        grid = octree.build(points, cfg.levels, cfg.voxel_size, cfg.feature_dim, seed=cfg.seed)
        field = MultiScaleField(cfg.levels, cfg.feature_dim, cfg.width, cfg.depth, seed=cfg.seed)
        opt = torch.optim.Adam(
            [
                {"params": grid.parameters(), "lr": cfg.lr_features},
                {"params": list(field.parameters()), "lr": cfg.lr_mlp},
            ],
            betas=cfg.betas,
        )
        state = TrainState(seed=cfg.seed, threads=cfg.threads, optimizer=opt)
        query = torch.as_tensor(samples.query)
        label = torch.as_tensor(samples.sdf_label)
        near = samples.near_surface
        n = len(samples)
        if n == 0:
            raise ValueError("no training samples")

        for step in range(cfg.steps):
            t0 = time.perf_counter()
            idx = rng.integers(0, n, size=min(cfg.batch_size, n))
            opt.zero_grad(set_to_none=True)
            loss, breakdown = total_loss(field, grid, query[idx], label[idx], near[idx], loss_cfg)
            if not math.isfinite(breakdown["total"]):
                raise TrainingDiverged(step, breakdown)
            if loss.requires_grad:
                loss.backward()
                for name, p in named_parameters(field, grid):
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise TrainingDiverged(step, {**breakdown, "bad_block": float("nan")}) from NonFiniteError(name, name)
                opt.step()
            state.step = step + 1
            row = {"step": step, **{k: breakdown[k] for k in ("total", "bce", "eikonal", "hessian")},
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            state.history.append(row)
            if callback is not None:
                callback(step, breakdown)
            if step % 500 == 0:
                logger.info("step %d total %.5g bce %.5g eik %.5g hess %.5g", step, row["total"], row["bce"],
                            row["eikonal"], row["hessian"])
        return field, grid, state
    finally:
        torch.set_num_threads(prev_threads)


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (row[k] if k == "step" else f"{row[k]:.10g}") for k in HISTORY_COLUMNS})


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"] = asdict(cfg.resolved_loss())
    d["betas"] = list(cfg.betas)
    return d
