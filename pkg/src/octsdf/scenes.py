"""Analytic shapes and simulated LiDAR scans used as desk-scale ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pointcloud import PointCloud


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(x) - np.asarray(self.center), axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    half_extents: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(np.asarray(x) - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def _face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half_extents
        a = np.array([hy * hz, hx * hz, hx * hy]) * 4.0
        return np.repeat(a, 2)

    def area(self) -> float:
        return float(self._face_areas().sum())

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        areas = self._face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        uv[np.arange(n), axis] = sign
        return np.asarray(self.center) + uv * np.asarray(self.half_extents)


@dataclass(frozen=True)
class CorrugatedPlane:
    """Height field ``z = height + amplitude * sin(2*pi*x/wavelength)`` over a
    rectangular patch. Its SDF is the first-order distance estimate
    ``(z - h) / sqrt(1 + |h'|^2)``, which is not exact but bounds the distance
    closely for small ``amplitude / wavelength``."""

    height: float = 0.0
    amplitude: float = 0.05
    wavelength: float = 1.0
    half_size: tuple[float, float] = (1.0, 1.0)

    def _h(self, x):
        k = 2.0 * np.pi / self.wavelength
        return self.height + self.amplitude * np.sin(k * x), self.amplitude * k * np.cos(k * x)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        h, dh = self._h(x[..., 0])
        return (x[..., 2] - h) / np.sqrt(1.0 + dh**2)

    def area(self) -> float:
        return 4.0 * self.half_size[0] * self.half_size[1]

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        xy = rng.uniform(-1.0, 1.0, size=(n, 2)) * np.asarray(self.half_size)
        return np.column_stack([xy, self._h(xy[:, 0])[0]])


Shape = Sphere | Box | CorrugatedPlane


@dataclass
class SyntheticScene:
    """Union of analytic shapes plus the sensor rig used to scan it."""

    shapes: Sequence[Shape]
    sensors: np.ndarray = field(default_factory=lambda: np.array([[3.0, 0.0, 0.0]]))
    rays_per_sensor: int = 1000
    noise: float = 0.0
    max_range: float = 50.0
    aim_at: tuple[float, float, float] | None = None
    cone_deg: float = 180.0

    def __post_init__(self):
        if not self.shapes:
            raise SceneError("scene needs at least one shape")
        self.sensors = np.asarray(self.sensors, dtype=np.float64).reshape(-1, 3)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.min([s.sdf(x) for s in self.shapes], axis=0)

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        """Dense ground-truth samples of the union's boundary."""
        rng = np.random.default_rng(seed)
        areas = np.array([s.area() for s in self.shapes])
        counts = rng.multinomial(n, areas / areas.sum())
        pts = np.concatenate([s.sample_surface(int(c), rng) for s, c in zip(self.shapes, counts)])
        if len(self.shapes) > 1:
            pts = pts[np.abs(self.sdf(pts)) < 1e-6]
        return pts

    def to_dict(self) -> dict:
        shapes = []
        for s in self.shapes:
            d = {"type": type(s).__name__.lower()}
            d.update({k: list(v) if isinstance(v, tuple) else v for k, v in s.__dict__.items()})
            shapes.append(d)
        return {
            "shapes": shapes,
            "sensors": self.sensors.tolist(),
            "rays_per_sensor": self.rays_per_sensor,
            "noise": self.noise,
            "max_range": self.max_range,
            "aim_at": None if self.aim_at is None else list(self.aim_at),
            "cone_deg": self.cone_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        kinds = {"sphere": Sphere, "box": Box, "corrugatedplane": CorrugatedPlane, "corrugated_plane": CorrugatedPlane}
        shapes = []
        for spec in d["shapes"]:
            spec = dict(spec)
            kind = spec.pop("type").lower()
            if kind not in kinds:
                raise SceneError(f"unknown shape type {kind!r}")
            shapes.append(kinds[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()}))
        extra = set(d) - {"shapes", "sensors", "rays_per_sensor", "noise", "max_range", "aim_at", "cone_deg"}
        if extra:
            raise SceneError(f"unknown scene keys: {sorted(extra)}")
        return cls(
            shapes,
            np.asarray(d.get("sensors", [[3.0, 0.0, 0.0]])),
            int(d.get("rays_per_sensor", 1000)),
            float(d.get("noise", 0.0)),
            float(d.get("max_range", 50.0)),
            None if d.get("aim_at") is None else tuple(float(v) for v in d["aim_at"]),
            float(d.get("cone_deg", 180.0)),
        )


def sphere_scene(radius: float = 1.0, n_rays: int = 50_000, noise: float = 0.0, n_sensors: int = 8) -> SyntheticScene:
    """Sphere at the origin scanned from sensors on the vertices of a cube."""
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    sensors = corners[:n_sensors] * (1.8 * radius)
    dist = np.linalg.norm(sensors[0])
    cone = float(np.degrees(np.arcsin(radius / dist)))
    return SyntheticScene([Sphere((0.0, 0.0, 0.0), radius)], sensors, n_rays // len(sensors), noise,
                          aim_at=(0.0, 0.0, 0.0), cone_deg=cone)


def cone_directions(rng: np.random.Generator, n: int, axis, half_angle_deg: float) -> np.ndarray:
    """Directions uniform over the spherical cap of ``half_angle_deg`` around ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    cos_max = np.cos(np.radians(min(half_angle_deg, 180.0)))
    z = rng.uniform(cos_max, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    local = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return local @ np.stack([u, v, axis])


def first_hit(scene: SyntheticScene, origin: np.ndarray, directions: np.ndarray,
              tol: float = 1e-6, max_steps: int = 1000):
    """First zero crossing of the scene SDF along unit rays.

    Sphere tracing brings each ray within a small band of a surface; a sign
    change is then bracketed and bisected to ``tol``. Returns ``(t, hit)``.
    """
    n = len(directions)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    near = 1e-4
    probe = 2e-3
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        d = scene.sdf(origin + t[idx, None] * directions[idx])
        close = d < near
        far = ~close
        t[idx[far]] += d[far]
        cidx = idx[close]
        if len(cidx):
            ahead = scene.sdf(origin + (t[cidx] + probe)[:, None] * directions[cidx])
            crossed = ahead <= 0
            lo = t[cidx[crossed]].copy()
            hi = lo + probe
            for _ in range(int(np.ceil(np.log2(probe / tol))) + 1):
                mid = 0.5 * (lo + hi)
                v = scene.sdf(origin + mid[:, None] * directions[cidx[crossed]])
                neg = v <= 0
                hi = np.where(neg, mid, hi)
                lo = np.where(neg, lo, mid)
            # hi is the first sample on the negative side of the crossing
            t[cidx[crossed]] = 0.5 * (lo + hi)
            hit[cidx[crossed]] = True
            active[cidx[crossed]] = False
            # grazing rays that did not cross keep marching
            t[cidx[~crossed]] += probe
        active &= t < scene.max_range
    return t, hit


def synth_scan(scene: SyntheticScene, seed: int = 0) -> PointCloud:
    """Simulate a scan of ``scene`` from every sensor. Missing rays are dropped."""
    inside = scene.sdf(scene.sensors) <= 0
    if inside.any():
        raise SceneError(f"sensor {int(np.flatnonzero(inside)[0])} lies inside a shape")
    clouds = []
    for frame, origin in enumerate(scene.sensors):
        rng = np.random.default_rng((int(seed), frame))
        if scene.aim_at is None:
            dirs = rng.standard_normal((scene.rays_per_sensor, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        else:
            dirs = cone_directions(rng, scene.rays_per_sensor, np.asarray(scene.aim_at) - origin, scene.cone_deg)
        clouds.append(_scan_rays(scene, origin, dirs, rng, frame))
    return PointCloud.concatenate(clouds)


def scan_directions(scene: SyntheticScene, origin, directions, seed: int = 0, frame: int = 0) -> PointCloud:
    """Cast explicit unit ``directions`` from ``origin``."""
    origin = np.asarray(origin, dtype=np.float64)
    if scene.sdf(origin[None])[0] <= 0:
        raise SceneError("sensor lies inside a shape")
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    return _scan_rays(scene, origin, directions, np.random.default_rng((int(seed), frame)), frame)


def _scan_rays(scene, origin, dirs, rng, frame) -> PointCloud:
    t, hit = first_hit(scene, origin, dirs)
    pts = origin + t[hit, None] * dirs[hit]
    noise = rng.standard_normal(pts.shape) * scene.noise
    if scene.noise > 0:
        pts = pts + noise
    return PointCloud.from_positions(pts, origin, frame)
