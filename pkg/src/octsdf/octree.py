"""Sparse multi-level octree with corner-keyed learnable features.

Level 0 is the finest level; a node at level ``n`` has edge ``2**n * W``.
Every node is addressed by the Morton code of its integer cell index and
every corner by the Morton code of its integer corner index, so a corner
shared by neighbouring nodes owns a single feature row.

Corner ``k`` of a node sits at offset ``(k & 1, (k >> 1) & 1, (k >> 2) & 1)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

MORTON_BITS = 21
MAX_CELL = 1 << MORTON_BITS
CORNER_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)

_GRID_MAGIC = b"OSDG"
_GRID_VERSION = 1


def _spread(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v.astype(np.int64)


def morton_encode(cells) -> np.ndarray:
    """Interleave cell indices as ``x0 y0 z0 x1 y1 z1 ...`` (x in the lowest bit).

    ``cells`` is ``(3,)`` or ``(n, 3)``; every index must lie in ``[0, 2**21)``.
    """
    cells = np.asarray(cells)
    if not np.issubdtype(cells.dtype, np.integer):
        if not np.all(cells == np.floor(cells)):
            raise ValueError("cell indices must be integers")
        cells = cells.astype(np.int64)
    if cells.shape[-1] != 3:
        raise ValueError("cells must have a trailing dimension of 3")
    if np.any(cells < 0) or np.any(cells >= MAX_CELL):
        raise ValueError(f"cell index out of range [0, {MAX_CELL})")
    code = _spread(cells[..., 0]) | (_spread(cells[..., 1]) << np.uint64(1)) | (_spread(cells[..., 2]) << np.uint64(2))
    return code.astype(np.int64)


def morton_decode(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).astype(np.uint64)
    return np.stack([_compact(codes), _compact(codes >> np.uint64(1)), _compact(codes >> np.uint64(2))], axis=-1)


@dataclass(frozen=True)
class MortonKey:
    level: int
    code: int

    @classmethod
    def from_cell(cls, cell, level: int) -> "MortonKey":
        return cls(int(level), int(morton_encode(np.asarray(cell))))

    def cell(self) -> tuple[int, int, int]:
        return tuple(int(c) for c in morton_decode(self.code))


@dataclass
class OctreeLevel:
    """Sorted node and corner tables of one level.

    ``node_corners[i, k]`` is the feature row of corner ``k`` of node
    ``node_codes[i]``.
    """

    node_codes: np.ndarray
    corner_codes: np.ndarray
    node_corners: np.ndarray
    features: torch.Tensor

    def lookup_nodes(self, codes: np.ndarray) -> np.ndarray:
        """Row index of each node code, or -1 when absent."""
        if len(self.node_codes) == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.node_codes, codes)
        pos_c = np.minimum(pos, len(self.node_codes) - 1)
        found = self.node_codes[pos_c] == codes
        return np.where(found, pos_c, -1)


@dataclass
class LevelQuery:
    corner_features: torch.Tensor  # (n, 8, H)
    weights: torch.Tensor  # (n, 8)
    occupied: np.ndarray  # (n,) bool
    local: torch.Tensor  # (n, 3) position inside the node, in [0, 1)
    size: float

    def aggregate(self) -> torch.Tensor:
        return torch.einsum("nk,nkh->nh", self.weights, self.corner_features)

    def aggregate_gradient(self) -> torch.Tensor:
        """Spatial derivative of :meth:`aggregate`, shape (n, 3, H).

        Trilinear weights are affine in each coordinate, so the pure second
        derivatives of the aggregate are identically zero.
        """
        dw = trilinear_weight_gradients(self.local) / self.size
        dw = dw * torch.as_tensor(self.occupied, dtype=dw.dtype)[:, None, None]
        return torch.einsum("nik,nkh->nih", dw, self.corner_features)


@dataclass
class OctreeGrid:
    levels: int
    base_size: float
    feature_dim: int
    origin: np.ndarray
    tables: list[OctreeLevel]
    lookup_count: int = field(default=0, compare=False)

    def node_size(self, level: int) -> float:
        return self.base_size * (2**level)

    # ----------------------------------------------------------------- queries

    def cell_index(self, x: np.ndarray, level: int) -> np.ndarray:
        return np.floor((np.asarray(x) - self.origin) / self.node_size(level)).astype(np.int64)

    def query(self, x: torch.Tensor) -> list[LevelQuery]:
        """Per-level corner features and trilinear weights for ``x`` of shape (n, 3).

        Weights are differentiable functions of ``x`` within a node; the node
        index is treated as piecewise constant. Points outside the occupied
        set at a level get zero features and uniform weights.
        """
        xs = x.detach().cpu().numpy().reshape(-1, 3)
        n = len(xs)
        out = []
        for level, table in enumerate(self.tables):
            size = self.node_size(level)
            cells = np.floor((xs - self.origin) / size).astype(np.int64)
            valid = np.all((cells >= 0) & (cells < MAX_CELL), axis=1)
            rows = np.full(n, -1, dtype=np.int64)
            if valid.any():
                rows[valid] = table.lookup_nodes(morton_encode(cells[valid]))
            self.lookup_count += n
            occ = rows >= 0

            local = (x - torch.as_tensor(self.origin, dtype=x.dtype)) / size - torch.as_tensor(cells, dtype=x.dtype)
            weights = trilinear_weights(local)
            occ_t = torch.as_tensor(occ)
            weights = torch.where(occ_t[:, None], weights, torch.full_like(weights, 0.125))
            corner_rows = torch.as_tensor(np.where(occ[:, None], table.node_corners[np.maximum(rows, 0)], 0))
            feats = table.features.index_select(0, corner_rows.reshape(-1)).reshape(n, 8, self.feature_dim)
            feats = feats * occ_t[:, None, None].to(feats.dtype)
            out.append(LevelQuery(feats, weights, occ, local, size))
        return out

    def query_features(self, x) -> list[tuple[np.ndarray, np.ndarray, bool]]:
        """Single-point query returning ``(corner features 8xH, weights 8, occupied)`` per level."""
        xt = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(1, 3))
        with torch.no_grad():
            res = self.query(xt)
        return [(q.corner_features[0].numpy().copy(), q.weights[0].numpy().copy(), bool(q.occupied[0])) for q in res]

    # ---------------------------------------------------------------- geometry

    def occupied_leaf_bounds(self, dilation: int = 0) -> np.ndarray:
        """Boxes ``(n, 2, 3)`` of occupied leaf cells grown by ``dilation`` cells on each side."""
        if dilation < 0:
            raise ValueError("dilation must be non-negative")
        cells = morton_decode(self.tables[0].node_codes)
        lo = self.origin + (cells - dilation) * self.base_size
        hi = self.origin + (cells + 1 + dilation) * self.base_size
        return np.stack([lo, hi], axis=1).reshape(-1, 2, 3)

    def parameters(self) -> list[torch.Tensor]:
        return [t.features for t in self.tables]

    def storage_size(self) -> int:
        return sum(int(t.features.numel()) for t in self.tables)

    # ----------------------------------------------------------- serialization

    def to_bytes(self) -> bytes:
        """Binary layout (little endian)::

            magic 'OSDG' | u32 version | u32 L | f64 W | u32 H | 3 x f64 origin
            per level: u64 node count | node codes (i64) |
                       u64 corner count | per corner: i64 code, H x f64 feature
        """
        buf = io.BytesIO()
        buf.write(_GRID_MAGIC)
        buf.write(struct.pack("<IIdI3d", _GRID_VERSION, self.levels, self.base_size, self.feature_dim, *self.origin))
        for t in self.tables:
            buf.write(struct.pack("<Q", len(t.node_codes)))
            buf.write(t.node_codes.astype("<i8").tobytes())
            buf.write(struct.pack("<Q", len(t.corner_codes)))
            rec = np.empty(len(t.corner_codes), dtype=[("key", "<i8"), ("feat", "<f8", (self.feature_dim,))])
            rec["key"] = t.corner_codes
            rec["feat"] = t.features.detach().cpu().numpy()
            buf.write(rec.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OctreeGrid":
        if data[:4] != _GRID_MAGIC:
            raise ValueError("not an octree grid blob")
        pos = 4
        version, L, W, H, ox, oy, oz = struct.unpack_from("<IIdI3d", data, pos)
        if version != _GRID_VERSION:
            raise ValueError(f"unsupported grid version {version}")
        pos += struct.calcsize("<IIdI3d")
        rec_dtype = np.dtype([("key", "<i8"), ("feat", "<f8", (H,))])
        tables = []
        for _ in range(L):
            (nn,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            nodes = np.frombuffer(data, dtype="<i8", count=nn, offset=pos).astype(np.int64)
            pos += 8 * nn
            (nc,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            rec = np.frombuffer(data, dtype=rec_dtype, count=nc, offset=pos)
            pos += rec_dtype.itemsize * nc
            corners = rec["key"].astype(np.int64)
            feats = torch.nn.Parameter(torch.tensor(np.array(rec["feat"]), dtype=torch.float64))
            tables.append(OctreeLevel(nodes, corners, _node_corner_rows(nodes, corners), feats))
        return cls(L, W, H, np.array([ox, oy, oz]), tables)


def trilinear_weights(local: torch.Tensor) -> torch.Tensor:
    """Weights of the 8 corners for local coordinates in ``[0, 1]^3``, shape (n, 8)."""
    t = local
    offs = torch.as_tensor(CORNER_OFFSETS, dtype=t.dtype)
    per_axis = torch.where(offs[None] > 0, t[:, None, :], 1.0 - t[:, None, :])
    return per_axis.prod(dim=-1)


def trilinear_weight_gradients(local: torch.Tensor) -> torch.Tensor:
    """d weight_k / d local_i, shape (n, 3, 8)."""
    offs = torch.as_tensor(CORNER_OFFSETS, dtype=local.dtype)
    factors = torch.where(offs[None] > 0, local[:, None, :], 1.0 - local[:, None, :])  # (n, 8, 3)
    sign = 2.0 * offs - 1.0  # (8, 3)
    rows = []
    for i in range(3):
        others = [j for j in range(3) if j != i]
        rows.append(sign[:, i] * factors[..., others[0]] * factors[..., others[1]])
    return torch.stack(rows, dim=1)


def _node_corner_rows(node_codes: np.ndarray, corner_codes: np.ndarray) -> np.ndarray:
    if len(node_codes) == 0:
        return np.zeros((0, 8), dtype=np.int64)
    cells = morton_decode(node_codes)
    corner_cells = cells[:, None, :] + CORNER_OFFSETS[None]
    keys = morton_encode(corner_cells.reshape(-1, 3))
    rows = np.searchsorted(corner_codes, keys)
    return rows.reshape(-1, 8)


def build(points, levels: int = 3, base_size: float = 0.1, feature_dim: int = 128, seed: int = 0,
          init_scale: float = 1e-4) -> OctreeGrid:
    """Allocate every node containing a point (at every level) and its corner features.

    ``points`` is a :class:`~octsdf.pointcloud.PointCloud` or an ``(n, 3)`` array.
    The quantization origin is the floor of the bounding box minimum minus one
    leaf cell.
    """
    if levels < 1 or base_size <= 0 or feature_dim < 1:
        raise ValueError("need levels >= 1, base_size > 0, feature_dim >= 1")
    pts = getattr(points, "positions", points)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        origin = (np.floor(pts.min(axis=0) / base_size) - 1.0) * base_size
    else:
        origin = np.zeros(3)
    gen = torch.Generator().manual_seed(int(seed))
    leaf_cells = np.floor((pts - origin) / base_size).astype(np.int64)
    if len(pts) and leaf_cells.max() >= MAX_CELL:
        raise ValueError("point cloud extent exceeds the addressable octree range")
    tables = []
    for level in range(levels):
        cells = np.unique(leaf_cells >> level, axis=0) if len(pts) else np.zeros((0, 3), dtype=np.int64)
        nodes = np.unique(morton_encode(cells)) if len(cells) else np.zeros(0, dtype=np.int64)
        if len(cells):
            corner_cells = (cells[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
            corners = np.unique(morton_encode(corner_cells))
        else:
            corners = np.zeros(0, dtype=np.int64)
        feats = (torch.rand(len(corners), feature_dim, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * init_scale
        tables.append(OctreeLevel(nodes, corners, _node_corner_rows(nodes, corners), torch.nn.Parameter(feats)))
    return OctreeGrid(levels, float(base_size), int(feature_dim), origin, tables)
