"""Triangle meshes: zero-level-set extraction, OBJ/PLY IO and adjacency."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .pointcloud import read_ply_elements


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    scalars: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.scalars is not None:
            self.scalars = np.asarray(self.scalars, dtype=np.float64).reshape(-1)
            if len(self.scalars) != len(self.vertices):
                raise MeshError("scalar channel length differs from vertex count")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        f = self.faces
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate faces: {np.flatnonzero(degenerate)[:10].tolist()}")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), None if self.scalars is None else self.scalars.copy())

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def edges(self) -> np.ndarray:
        """Directed half-edges ``(3F, 2)`` in face order."""
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def edge_face_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and the number of faces using each."""
        e = np.sort(self.edges(), axis=1)
        if len(e) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        _, counts = self.edge_face_counts()
        return len(counts) > 0 and bool(np.all(counts == 2))


# ---------------------------------------------------------------- extraction


def _node_mask(bounds: np.ndarray, lo: np.ndarray, cell: float, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    i0 = np.ceil((bounds[:, 0] - lo) / cell - 1e-9).astype(np.int64)
    i1 = np.floor((bounds[:, 1] - lo) / cell + 1e-9).astype(np.int64)
    i0 = np.clip(i0, 0, np.asarray(shape) - 1)
    i1 = np.clip(i1, 0, np.asarray(shape) - 1)
    for a, b in zip(i0, i1):
        mask[a[0]:b[0] + 1, a[1]:b[1] + 1, a[2]:b[2] + 1] = True
    return mask


def marching_cubes(sdf: Callable[[np.ndarray], np.ndarray], cell: float, bounds) -> TriangleMesh:
    """Triangulate the zero level set of ``sdf`` on a lattice of spacing ``cell``.

    ``bounds`` is an ``(n, 2, 3)`` list of boxes; only cubes whose eight corners
    lie in the union of the boxes are triangulated and ``sdf`` is only
    evaluated there. Samples that are exactly zero are nudged to ``-1e-9``.
    Face winding makes normals point towards positive SDF.
    """
    if cell <= 0:
        raise ValueError("cell must be positive")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2, 3)
    if len(bounds) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    lo = np.floor(bounds[:, 0].min(axis=0) / cell) * cell
    hi = bounds[:, 1].max(axis=0)
    shape = tuple(int(s) for s in np.floor((hi - lo) / cell + 1e-9).astype(np.int64) + 1)
    if min(shape) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    nodes = _node_mask(bounds, lo, cell, shape)

    idx = np.argwhere(nodes)
    values = np.full(shape, 1.0)
    values[nodes] = np.asarray(sdf(lo + idx * cell), dtype=np.float64).reshape(-1)
    if not np.isfinite(values).all():
        raise MeshError("SDF returned non-finite values")
    values[values == 0.0] = -1e-9

    cubes = nodes[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cubes &= nodes[dx:shape[0] - 1 + dx, dy:shape[1] - 1 + dy, dz:shape[2] - 1 + dz]
    # skimage enables the cube [i-1, i] through mask[i]
    mc_mask = np.zeros(shape, dtype=bool)
    mc_mask[1:, 1:, 1:] = cubes
    if values[nodes].min() > 0 or values[nodes].max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = _skimage_mc(values, level=0.0, spacing=(cell, cell, cell), mask=mc_mask,
                                         allow_degenerate=True)
    except RuntimeError:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts.astype(np.float64) + lo
    return _clean(verts, faces.astype(np.int64))


def _clean(verts: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Weld coincident vertices, then drop index-degenerate faces and unreferenced vertices."""
    # zero samples put vertices of several edges on the same lattice node
    if len(verts):
        verts, inverse = np.unique(verts, axis=0, return_inverse=True)
        faces = inverse.reshape(-1)[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    used = np.zeros(len(verts), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return TriangleMesh(verts[used], remap[faces])


def extract_mesh(field, grid, cell: float | None = None, dilation: int = 1, threads: int = 1) -> TriangleMesh:
    """Marching cubes over the dilated occupied leaf cells of ``grid``."""
    from .field import eval_batch

    cell = grid.base_size / 2 if cell is None else cell
    bounds = grid.occupied_leaf_bounds(dilation)
    return marching_cubes(lambda p: eval_batch(field, grid, p, threads=threads), cell, bounds)


# ------------------------------------------------------------------------ IO


def write_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif fmt == "ply":
        has_q = mesh.scalars is not None
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
                  "property float x", "property float y", "property float z"]
        if has_q:
            header.append("property float quality")
        header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
        vdtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + ([("quality", "<f4")] if has_q else [])
        vrec = np.empty(mesh.n_vertices, dtype=vdtype)
        vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
        if has_q:
            vrec["quality"] = mesh.scalars
        frec = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
        frec["n"] = 3
        frec["i"] = mesh.faces
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())
    else:
        raise MeshError(f"unknown mesh format {fmt!r}")


def read_mesh(path, fmt: str | None = None) -> TriangleMesh:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        verts, faces = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
        return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if fmt == "ply":
        el = read_ply_elements(path)
        v = el.get("vertex", {})
        verts = np.column_stack([np.asarray(v.get(k, []), dtype=np.float64) for k in "xyz"]).reshape(-1, 3)
        f = el.get("face", {})
        lists = f.get("vertex_indices", f.get("vertex_index", []))
        faces = [[p[0], p[k], p[k + 1]] for p in lists for k in range(1, len(p) - 1)]
        q = v.get("quality")
        return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                            None if q is None else np.asarray(q, dtype=np.float64))
    raise MeshError(f"unknown mesh format {fmt!r}")


def mesh_digest(mesh: TriangleMesh) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(struct.pack("<QQ", mesh.n_vertices, mesh.n_faces))
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------- adjacency


@dataclass
class Adjacency:
    neighbors: list[np.ndarray]
    edges: np.ndarray  # (E, 2) undirected, i < j
    edge_angles: list[tuple[float, ...]]  # angles opposite each edge, one per incident face
    boundary: np.ndarray  # (E,) bool

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.edges[self.boundary].reshape(-1))


def corner_angles(mesh: TriangleMesh) -> np.ndarray:
    """Interior angle at each face corner, shape (F, 3)."""
    v = mesh.vertices[mesh.faces]
    out = np.empty((mesh.n_faces, 3))
    for k in range(3):
        a = v[:, (k + 1) % 3] - v[:, k]
        b = v[:, (k + 2) % 3] - v[:, k]
        out[:, k] = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))
    return out


def vertex_adjacency(mesh: TriangleMesh) -> Adjacency:
    """Sorted neighbour lists and, per undirected edge, the opposite angles."""
    e, counts = mesh.edge_face_counts()
    if np.any(counts > 2):
        bad = e[counts > 2]
        raise MeshError(f"non-manifold edges: {bad[:10].tolist()}")
    angles = corner_angles(mesh)
    edge_index = {tuple(x): i for i, x in enumerate(e.tolist())}
    per_edge: list[list[float]] = [[] for _ in range(len(e))]
    f = mesh.faces
    for k in range(3):
        i, j = f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        for a, b, ang in zip(lo.tolist(), hi.tolist(), angles[:, k].tolist()):
            per_edge[edge_index[(a, b)]].append(ang)
    nbrs: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for a, b in e.tolist():
        nbrs[a].append(b)
        nbrs[b].append(a)
    return Adjacency(
        [np.array(sorted(n), dtype=np.int64) for n in nbrs],
        e,
        [tuple(p) for p in per_edge],
        counts == 1,
    )


def mesh_laplacian_norms(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex norm of the uniform (umbrella) Laplacian ``mean(v_j) - v_i``."""
    e, _ = mesh.edge_face_counts()
    n = mesh.n_vertices
    deg = np.bincount(e.reshape(-1), minlength=n).astype(np.float64)
    acc = np.zeros((n, 3))
    np.add.at(acc, e[:, 0], mesh.vertices[e[:, 1]])
    np.add.at(acc, e[:, 1], mesh.vertices[e[:, 0]])
    with np.errstate(invalid="ignore", divide="ignore"):
        lap = acc / deg[:, None] - mesh.vertices
    lap[deg == 0] = 0.0
    return np.linalg.norm(lap, axis=1)
