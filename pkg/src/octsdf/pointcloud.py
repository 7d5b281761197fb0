"""Point cloud ingestion and ray-based training sample generation.

Sign convention used throughout the package: signed distances are positive
in free space (the sensor side of a surface) and negative behind it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_TRUNCATION = 0.3


class PointCloudError(ValueError):
    """Raised for malformed or inconsistent point cloud input."""

    def __init__(self, message: str, line: int | None = None, index: int | None = None):
        super().__init__(message)
        self.line = line
        self.index = index


@dataclass(frozen=True)
class PointSample:
    position: tuple[float, float, float]
    sensor_origin: tuple[float, float, float]
    frame_id: int = 0


@dataclass
class PointCloud:
    """Column-oriented storage for a sequence of :class:`PointSample`."""

    positions: np.ndarray
    origins: np.ndarray
    frame_ids: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.origins) != n or len(self.frame_ids) != n:
            raise PointCloudError("positions, origins and frame_ids differ in length")
        bad = ~np.isfinite(self.positions).all(axis=1) | ~np.isfinite(self.origins).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise PointCloudError(f"non-finite coordinate at index {i}", index=i)
        zero = np.all(self.positions == self.origins, axis=1)
        if zero.any():
            i = int(np.flatnonzero(zero)[0])
            raise PointCloudError(f"zero-length ray at index {i}", index=i)
        if (self.frame_ids < 0).any():
            raise PointCloudError("frame ids must be non-negative")

    @classmethod
    def from_positions(cls, positions, origin=(0.0, 0.0, 0.0), frame_id: int = 0) -> "PointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        origins = np.broadcast_to(np.asarray(origin, dtype=np.float64), positions.shape).copy()
        return cls(positions, origins, np.full(len(positions), frame_id, dtype=np.int64))

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty(0, dtype=np.int64))
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.origins for c in clouds]),
            np.concatenate([c.frame_ids for c in clouds]),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> PointSample:
        return PointSample(
            tuple(float(v) for v in self.positions[i]),
            tuple(float(v) for v in self.origins[i]),
            int(self.frame_ids[i]),
        )

    def __iter__(self) -> Iterator[PointSample]:
        for i in range(len(self)):
            yield self[i]


@dataclass
class TrainingSamples:
    """Ray samples with signed-distance labels.

    ``near_surface`` marks samples drawn from the band around the ray
    endpoint; the remainder are free-space samples with clamped labels.
    """

    query: np.ndarray
    sdf_label: np.ndarray
    weight: np.ndarray
    near_surface: np.ndarray

    def __len__(self) -> int:
        return len(self.sdf_label)


@dataclass(frozen=True)
class SamplingConfig:
    n_surface: int = 4
    n_free: int = 2
    truncation: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        if self.n_surface < 0 or self.n_free < 0:
            raise ValueError("sample counts must be non-negative")


# --------------------------------------------------------------------------- readers


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) < 3:
                raise PointCloudError(f"{path}:{lineno}: expected 'x y z'", line=lineno)
            try:
                xyz = [float(p) for p in parts[:3]]
            except ValueError:
                raise PointCloudError(f"{path}:{lineno}: cannot parse {text!r}", line=lineno) from None
            if not all(np.isfinite(xyz)):
                raise PointCloudError(f"{path}:{lineno}: non-finite coordinate", line=lineno)
            rows.append(xyz)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_ply_header(fh):
    """Parse a PLY header. Returns (format, elements) where elements is a list of
    ``(name, count, [(prop_name, type, list_count_type_or_None)])``."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PointCloudError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PointCloudError("truncated PLY header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], tokens[3], tokens[2]))
            else:
                elements[-1][2].append((tokens[2], tokens[1], None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PointCloudError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply_elements(path: Path) -> dict[str, list]:
    """Read every element of a PLY file into ``{name: {prop: values}}``."""
    out = {}
    with open(path, "rb") as fh:
        fmt, elements = read_ply_header(fh)
        if fmt == "ascii":
            tokens = fh.read().decode("ascii").split()
            pos = 0
            for name, count, props in elements:
                cols = {p[0]: [] for p in props}
                for _ in range(count):
                    for pname, ptype, ltype in props:
                        if ltype is None:
                            cols[pname].append(float(tokens[pos]))
                            pos += 1
                        else:
                            k = int(tokens[pos])
                            cols[pname].append([int(t) for t in tokens[pos + 1:pos + 1 + k]])
                            pos += 1 + k
                out[name] = cols
            return out
        endian = "<" if fmt == "binary_little_endian" else ">"
        data = fh.read()
        pos = 0
        for name, count, props in elements:
            if all(ltype is None for _, _, ltype in props):
                dtype = np.dtype([(p, endian + _PLY_TYPES[t]) for p, t, _ in props])
                arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
                pos += dtype.itemsize * count
                out[name] = {p: arr[p].astype(np.float64) for p, _, _ in props}
                continue
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, ptype, ltype in props:
                    if ltype is None:
                        fmt_c = endian + _PLY_TYPES[ptype]
                        cols[pname].append(struct.unpack_from(fmt_c, data, pos)[0])
                        pos += struct.calcsize(fmt_c)
                    else:
                        cfmt = endian + _PLY_TYPES[ltype]
                        k = struct.unpack_from(cfmt, data, pos)[0]
                        pos += struct.calcsize(cfmt)
                        vfmt = endian + _PLY_TYPES[ptype] * k
                        cols[pname].append(list(struct.unpack_from(vfmt, data, pos)))
                        pos += struct.calcsize(vfmt)
            out[name] = cols
    return out


def _read_ply_points(path: Path) -> np.ndarray:
    elements = read_ply_elements(path)
    vertex = elements.get("vertex")
    if vertex is None or not {"x", "y", "z"} <= set(vertex):
        raise PointCloudError(f"{path}: PLY lacks vertex x/y/z properties")
    pts = np.column_stack([np.asarray(vertex[k], dtype=np.float64) for k in "xyz"]).reshape(-1, 3)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PointCloudError(f"{path}: non-finite coordinate at index {i}", index=i)
    return pts


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _read_ply_points(path)
    return _read_xyz(path)


def load_poses(path) -> np.ndarray:
    """Read KITTI-style poses: 12 floats (a row-major 3x4 transform) per line."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise PointCloudError(f"{path}:{lineno}: cannot parse pose", line=lineno) from None
            if len(vals) != 12 or not np.all(np.isfinite(vals)):
                raise PointCloudError(f"{path}:{lineno}: pose needs 12 finite values", line=lineno)
            poses.append(np.asarray(vals).reshape(3, 4))
    return np.asarray(poses, dtype=np.float64).reshape(-1, 3, 4)


def load_pointcloud(path, pose_path=None) -> PointCloud:
    """Load scans in world frame.

    ``path`` is a single XYZ/PLY file (one frame) or a directory whose
    ``*.xyz``/``*.ply`` files, sorted by name, are consecutive frames. With a
    pose file each frame is transformed into the world and its sensor origin
    is the pose translation; otherwise the origin is the world origin.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".txt", ".ply"))
    else:
        files = [path]
    poses = load_poses(pose_path) if pose_path is not None else None
    if poses is not None and len(poses) != len(files):
        raise PointCloudError(f"pose file has {len(poses)} frames but {len(files)} scans were given")

    clouds = []
    for frame, f in enumerate(files):
        pts = read_points(f)
        if poses is None:
            origin = np.zeros(3)
        else:
            rot, trans = poses[frame][:, :3], poses[frame][:, 3]
            pts = pts @ rot.T + trans
            origin = trans
        clouds.append(PointCloud.from_positions(pts, origin, frame))
    return PointCloud.concatenate(clouds)


def save_xyz(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)
    np.savetxt(path, pts.reshape(-1, 3), fmt="%.9f")


# --------------------------------------------------------------------------- ray sampling


def ray_label(origin, endpoint, query) -> np.ndarray:
    """Signed distance along the ray: endpoint depth minus query depth."""
    origin, endpoint, query = (np.asarray(a, dtype=np.float64) for a in (origin, endpoint, query))
    direction = endpoint - origin
    depth = np.linalg.norm(direction, axis=-1)
    s = np.sum((query - origin) * direction, axis=-1) / depth
    return depth - s


def sample_rays(points: PointCloud, cfg: SamplingConfig | None = None, seed: int = 0) -> TrainingSamples:
    """Draw near-surface and free-space samples along every sensor ray.

    Randomness is drawn per frame from ``(seed, frame_id)`` so that frames can
    be processed independently with identical results.
    """
    cfg = cfg or SamplingConfig()
    t = cfg.truncation
    out_q, out_l, out_s = [], [], []
    for frame in np.unique(points.frame_ids):
        sel = points.frame_ids == frame
        p, o = points.positions[sel], points.origins[sel]
        rng = np.random.default_rng((int(seed), int(frame)))
        ray = p - o
        depth = np.linalg.norm(ray, axis=1)
        direction = ray / depth[:, None]
        n = len(p)

        offsets = rng.uniform(-t, t, size=(n, cfg.n_surface))
        s_near = depth[:, None] + offsets
        free_len = np.maximum(depth - t, 0.0)
        s_free = rng.uniform(0.0, 1.0, size=(n, cfg.n_free)) * free_len[:, None]

        s = np.concatenate([s_near, s_free], axis=1)
        labels = np.concatenate([-offsets, np.minimum(depth[:, None] - s_free, t)], axis=1)
        near = np.zeros(s.shape, dtype=bool)
        near[:, : cfg.n_surface] = True
        out_q.append((o[:, None, :] + s[..., None] * direction[:, None, :]).reshape(-1, 3))
        out_l.append(labels.reshape(-1))
        out_s.append(near.reshape(-1))

    if not out_q:
        return TrainingSamples(np.empty((0, 3)), np.empty(0), np.empty(0), np.empty(0, dtype=bool))
    labels = np.concatenate(out_l)
    return TrainingSamples(
        np.concatenate(out_q),
        labels,
        np.ones_like(labels),
        np.concatenate(out_s),
    )
