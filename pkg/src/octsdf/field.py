"""Multi-scale SDF network evaluated over an :class:`~octsdf.octree.OctreeGrid`.

Evaluation mirrors a multigrid V-cycle. With ``f_l`` the trilinearly
aggregated corner feature at level ``l`` (0 finest, ``L-1`` coarsest)::

    down_0 = f_0 + D_0(f_0)
    down_l = D_l(down_{l-1}) + f_l              l = 1 .. L-1
    up_{L-1} = down_{L-1}
    up_l   = U_l(up_{l+1}) + down_l             l = L-2 .. 0
    sdf    = head(up_0)

``D_l`` and ``U_l`` are the 2L kernel MLPs; ``U_{L-1}`` is allocated but the
coarsest upward step is an identity skip, so each query runs exactly
``2L - 1`` kernel MLPs and one head.

Parameter count, with ``H`` features, hidden ``width`` and ``depth`` hidden
layers::

    kernel = H*width + width + (depth-1)*(width**2 + width) + width*H + H
    head   = H*width + width + (depth-1)*(width**2 + width) + width + 1
    total  = 2*L*kernel + head
"""

from __future__ import annotations

import io
import json
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .octree import OctreeGrid

CHECKPOINT_VERSION = 1
SOFTPLUS_BETA = 100.0


class Softplus(nn.Module):
    """Smooth activation; ReLU would make every second derivative vanish."""

    def __init__(self, beta: float = SOFTPLUS_BETA):
        super().__init__()
        self.beta = beta

    def forward(self, x):
        return nn.functional.softplus(x, beta=self.beta)


def mlp(n_in: int, n_out: int, width: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    dims = [n_in] + [width] * depth
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [nn.Linear(a, b, dtype=torch.float64), Softplus()]
    layers.append(nn.Linear(dims[-1], n_out, dtype=torch.float64))
    return nn.Sequential(*layers)


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 3
    feature_dim: int = 128
    width: int = 128
    depth: int = 2


def parameter_count(levels: int, feature_dim: int, width: int, depth: int) -> int:
    hidden = (depth - 1) * (width * width + width)
    kernel = feature_dim * width + width + hidden + width * feature_dim + feature_dim
    head = feature_dim * width + width + hidden + width + 1
    return 2 * levels * kernel + head


class MultiScaleField(nn.Module):
    def __init__(self, levels: int = 3, feature_dim: int = 128, width: int = 128, depth: int = 2, seed: int = 0):
        super().__init__()
        if levels < 1 or depth < 1:
            raise ValueError("levels and depth must be >= 1")
        self.config = FieldConfig(levels, feature_dim, width, depth)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.down_mlps = nn.ModuleList(mlp(feature_dim, feature_dim, width, depth) for _ in range(levels))
            self.up_mlps = nn.ModuleList(mlp(feature_dim, feature_dim, width, depth) for _ in range(levels))
            self.head = mlp(feature_dim, 1, width, depth)
        nn.init.zeros_(self.head[-1].bias)
        self.mlp_calls = 0

    @property
    def levels(self) -> int:
        return self.config.levels

    def _check_grid(self, grid: OctreeGrid):
        if grid.levels != self.config.levels or grid.feature_dim != self.config.feature_dim:
            raise ValueError(
                f"field expects L={self.config.levels}, H={self.config.feature_dim}; "
                f"grid has L={grid.levels}, H={grid.feature_dim}"
            )

    def _kernel(self, net: nn.Module, v: torch.Tensor) -> torch.Tensor:
        self.mlp_calls += 1
        return net(v)

    def aggregate(self, features: list[torch.Tensor]) -> torch.Tensor:
        """Run the V-cycle on per-level point features and return the head input."""
        L = self.config.levels
        down = [features[0] + self._kernel(self.down_mlps[0], features[0])]
        for lvl in range(1, L):
            down.append(self._kernel(self.down_mlps[lvl], down[-1]) + features[lvl])
        up = down[-1]
        for lvl in range(L - 2, -1, -1):
            up = self._kernel(self.up_mlps[lvl], up) + down[lvl]
        return up

    def forward(self, grid: OctreeGrid, x: torch.Tensor) -> torch.Tensor:
        self._check_grid(grid)
        feats = [q.aggregate() for q in grid.query(x)]
        return self.head(self.aggregate(feats)).squeeze(-1)

    # ------------------------------------------------------ Taylor-mode jets
    #
    # A jet carries a value (n, d), its spatial first derivatives (n, 3, d) and
    # its pure second derivatives d2/dx_i^2 (n, 3, d). Pushing jets through the
    # network gives gradient and Laplacian in one forward pass that remains
    # differentiable with respect to the parameters.

    def _mlp_jet(self, net: nn.Sequential, v0, v1, v2):
        for layer in net:
            if isinstance(layer, nn.Linear):
                v0 = layer(v0)
                v1 = v1 @ layer.weight.T
                v2 = None if v2 is None else v2 @ layer.weight.T
            else:
                beta = layer.beta
                # torch's softplus is exactly linear above beta*x > 20
                s = torch.where(beta * v0 > 20.0, torch.ones_like(v0), torch.sigmoid(beta * v0))
                a0 = nn.functional.softplus(v0, beta=beta)
                s_ = s[:, None, :]
                if v2 is not None:
                    v2 = beta * s_ * (1.0 - s_) * v1 * v1 + s_ * v2
                v1 = s_ * v1
                v0 = a0
        return v0, v1, v2

    def _kernel_jet(self, net, jet):
        self.mlp_calls += 1
        return self._mlp_jet(net, *jet)

    @staticmethod
    def _add(a, b):
        return tuple(None if x is None else x + y for x, y in zip(a, b))

    def forward_jet(self, grid: OctreeGrid, x: torch.Tensor, second_order: bool = True):
        """Return ``(sdf, gradient, laplacian)``; the Laplacian is ``None`` when
        ``second_order`` is false."""
        self._check_grid(grid)
        L = self.config.levels
        feats = []
        for q in grid.query(x):
            v0 = q.aggregate()
            v1 = q.aggregate_gradient()
            feats.append((v0, v1, torch.zeros_like(v1) if second_order else None))
        down = [self._add(feats[0], self._kernel_jet(self.down_mlps[0], feats[0]))]
        for lvl in range(1, L):
            down.append(self._add(self._kernel_jet(self.down_mlps[lvl], down[-1]), feats[lvl]))
        up = down[-1]
        for lvl in range(L - 2, -1, -1):
            up = self._add(self._kernel_jet(self.up_mlps[lvl], up), down[lvl])
        v0, v1, v2 = self._mlp_jet(self.head, *up)
        lap = None if v2 is None else v2[..., 0].sum(dim=1)
        return v0[:, 0], v1[..., 0], lap

    def laplacian(self, grid: OctreeGrid, x: torch.Tensor) -> torch.Tensor:
        return self.forward_jet(grid, x)[2]

    def as_function(self, grid: OctreeGrid):
        return lambda x: self(grid, x)

    def named_parameter_bundle(self) -> list[tuple[str, torch.Tensor]]:
        return list(self.named_parameters())

    # ---------------------------------------------------------- checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


def eval_sdf(field: MultiScaleField, grid: OctreeGrid, x) -> float:
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(1, 3))
    with torch.no_grad():
        return float(field(grid, xt)[0])


def eval_batch(field: MultiScaleField, grid: OctreeGrid, xs, chunk: int = 8192, threads: int = 1) -> np.ndarray:
    """Evaluate the SDF at many points.

    Points are processed in fixed-size chunks, so results do not depend on the
    number of worker threads.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    chunks = [xs[i:i + chunk] for i in range(0, len(xs), chunk)]
    if not chunks:
        return np.zeros(0)

    def run(c):
        with torch.no_grad():
            return field(grid, torch.as_tensor(c)).numpy()

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def save_checkpoint(path, field: MultiScaleField, grid: OctreeGrid, config: dict | None = None) -> None:
    """Write an ``.npz`` bundle holding the grid blob, MLP weights and a config echo."""
    arrays = {f"mlp/{k}": v for k, v in field.state_arrays().items()}
    arrays["grid"] = np.frombuffer(grid.to_bytes(), dtype=np.uint8)
    meta = {"version": CHECKPOINT_VERSION, "field": asdict(field.config), "config": config or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed zip timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[MultiScaleField, OctreeGrid, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        grid = OctreeGrid.from_bytes(bytes(data["grid"]))
        field = MultiScaleField(**meta["field"])
        state = {k[4:]: torch.as_tensor(data[k]) for k in data.files if k.startswith("mlp/")}
    field.load_state_dict(state)
    return field, grid, meta["config"]
