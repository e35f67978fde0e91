"""Point clouds, analytic shapes with exact occupancy, and seeded sampling.

All randomness goes through ``make_rng(seed)``, a Philox counter-based
generator, so every draw is reproducible from (seed, parameters).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# -- point clouds ---------------------------------------------------------------


@dataclass
class PointCloud:
    """Points in the unit cube plus the affine map ``normalized = scale * raw + offset``."""

    points: np.ndarray
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_raw(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.offset) / self.scale

    def to_normalized(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) * self.scale + self.offset

    def __len__(self) -> int:
        return len(self.points)


def normalize_cloud(raw: np.ndarray, padding: float = 0.1) -> PointCloud:
    """Map the bounding box isotropically into ``[padding/2, 1 - padding/2]^3``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 3 or len(raw) < 1:
        raise ValueError(f"expected an (S, 3) array with S >= 1, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("point cloud contains non-finite coordinates")
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    extent = float((hi - lo).max())
    center = (lo + hi) / 2
    if extent == 0.0:
        warnings.warn("zero-extent point cloud; centring with unit scale", RuntimeWarning)
        scale = 1.0
    else:
        scale = (1.0 - padding) / extent
    offset = 0.5 - scale * center
    pts = np.clip(raw * scale + offset, 0.0, 1.0)
    return PointCloud(points=pts, scale=scale, offset=offset)


# -- analytic shapes ------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def contains(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        return np.sum((p - c) ** 2, axis=-1) <= self.radius**2

    def area(self) -> float:
        return 4 * np.pi * self.radius**2

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d


@dataclass(frozen=True)
class Box:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.all((p >= np.asarray(self.min)) & (p <= np.asarray(self.max)), axis=-1)

    def face_areas(self) -> np.ndarray:
        e = np.asarray(self.max) - np.asarray(self.min)
        # faces ordered -x, +x, -y, +y, -z, +z
        yz, xz, xy = e[1] * e[2], e[0] * e[2], e[0] * e[1]
        return np.array([yz, yz, xz, xz, xy, xy])

    def area(self) -> float:
        return float(self.face_areas().sum())

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = np.asarray(self.min, float), np.asarray(self.max, float)
        areas = self.face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = lo + rng.random((n, 3)) * (hi - lo)
        axis, side = face // 2, face % 2
        rows = np.arange(n)
        pts[rows, axis] = np.where(side == 1, hi[axis], lo[axis])
        normals = np.zeros((n, 3))
        normals[rows, axis] = np.where(side == 1, 1.0, -1.0)
        return pts, normals


@dataclass(frozen=True)
class Torus:
    """Torus with its axis along z."""

    center: tuple[float, float, float]
    major: float
    minor: float

    def contains(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        rho = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
        return (rho - self.major) ** 2 + q[..., 2] ** 2 <= self.minor**2

    def area(self) -> float:
        return 4 * np.pi**2 * self.major * self.minor

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        R, r = self.major, self.minor
        out_u = np.empty(0)
        out_v = np.empty(0)
        # area element is proportional to R + r cos v; rejection-sample v
        while len(out_u) < n:
            m = 2 * (n - len(out_u)) + 16
            u = rng.random(m) * 2 * np.pi
            v = rng.random(m) * 2 * np.pi
            keep = rng.random(m) * (R + r) <= R + r * np.cos(v)
            out_u = np.concatenate([out_u, u[keep]])
            out_v = np.concatenate([out_v, v[keep]])
        u, v = out_u[:n], out_v[:n]
        normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
        return np.asarray(self.center) + ring + r * normals, normals


Primitive = Union[Sphere, Box, Torus]


@dataclass(frozen=True)
class ShapeSpec:
    """Union of primitives; boundaries count as inside."""

    primitives: tuple[Primitive, ...]
    name: str = "shape"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a shape needs at least one primitive")
        for prim in self.primitives:
            if isinstance(prim, Sphere) and prim.radius <= 0:
                raise ValueError("sphere radius must be positive")
            if isinstance(prim, Torus) and (prim.minor <= 0 or prim.major <= 0):
                raise ValueError("torus radii must be positive")
            if isinstance(prim, Box) and np.any(np.asarray(prim.max) < np.asarray(prim.min)):
                raise ValueError("box max must be >= min")

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        prims = []
        for p in d["primitives"]:
            kind = p.get("type")
            args = {k: v for k, v in p.items() if k != "type"}
            if kind == "sphere":
                prims.append(Sphere(center=tuple(args["center"]), radius=float(args["radius"])))
            elif kind == "box":
                prims.append(Box(min=tuple(args["min"]), max=tuple(args["max"])))
            elif kind == "torus":
                prims.append(Torus(center=tuple(args["center"]), major=float(args["major"]), minor=float(args["minor"])))
            else:
                raise ValueError(f"unknown primitive type {kind!r}")
            expected = {"sphere": {"center", "radius"}, "box": {"min", "max"}, "torus": {"center", "major", "minor"}}[kind]
            if set(args) != expected:
                raise ValueError(f"{kind} takes keys {sorted(expected)}, got {sorted(args)}")
        return cls(primitives=tuple(prims), name=d.get("name", "shape"))

    def to_dict(self) -> dict:
        out = []
        for p in self.primitives:
            if isinstance(p, Sphere):
                out.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
            elif isinstance(p, Box):
                out.append({"type": "box", "min": list(p.min), "max": list(p.max)})
            else:
                out.append({"type": "torus", "center": list(p.center), "major": p.major, "minor": p.minor})
        return {"name": self.name, "primitives": out}


def sphere(center=(0.5, 0.5, 0.5), radius=0.3) -> ShapeSpec:
    return ShapeSpec((Sphere(tuple(center), radius),), name="sphere")


def occupancy_oracle(spec: ShapeSpec, coords: np.ndarray) -> np.ndarray:
    """1 where a coordinate lies in the (closed) union of primitives, else 0."""
    coords = np.asarray(coords, dtype=np.float64)
    inside = np.zeros(coords.shape[:-1], dtype=bool)
    for prim in spec.primitives:
        inside |= prim.contains(coords)
    return inside.astype(np.float64)


def _strictly_inside(prim: Primitive, p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    if isinstance(prim, Sphere):
        return np.linalg.norm(p - np.asarray(prim.center), axis=-1) < prim.radius - tol
    if isinstance(prim, Box):
        return np.all((p > np.asarray(prim.min) + tol) & (p < np.asarray(prim.max) - tol), axis=-1)
    q = p - np.asarray(prim.center)
    rho = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
    return np.sqrt((rho - prim.major) ** 2 + q[..., 2] ** 2) < prim.minor - tol


def sample_surface_with_normals(spec: ShapeSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform samples on the union boundary with outward unit normals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    prims = spec.primitives
    areas = np.array([p.area() for p in prims])
    pts_acc, nrm_acc = [], []
    have = 0
    while have < n:
        m = max(2 * (n - have), 64)
        which = rng.choice(len(prims), size=m, p=areas / areas.sum())
        for k, prim in enumerate(prims):
            cnt = int(np.sum(which == k))
            if cnt == 0:
                continue
            p, nr = prim.sample(cnt, rng)
            keep = np.ones(cnt, dtype=bool)
            for j, other in enumerate(prims):
                if j != k:
                    keep &= ~_strictly_inside(other, p)
            pts_acc.append(p[keep])
            nrm_acc.append(nr[keep])
            have += int(keep.sum())
    pts = np.concatenate(pts_acc)[:n]
    nrm = np.concatenate(nrm_acc)[:n]
    return pts, nrm


def sample_surface(spec: ShapeSpec, n: int, seed: int) -> np.ndarray:
    return sample_surface_with_normals(spec, n, seed)[0]


def add_noise(points: np.ndarray, sigma: float = 0.005, seed: int = 0) -> np.ndarray:
    """Isotropic Gaussian jitter, clamped back into the unit cube."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    points = np.asarray(points, dtype=np.float64)
    if sigma == 0:
        return points.copy()
    noisy = points + sigma * make_rng(seed).standard_normal(points.shape)
    return np.clip(noisy, 0.0, 1.0)


@dataclass
class QueryBatch:
    coords: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.coords):
            raise ValueError(f"{len(self.labels)} labels for {len(self.coords)} queries")

    def __len__(self) -> int:
        return len(self.coords)


def sample_queries_uniform(n: int, seed: int) -> QueryBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    return QueryBatch(coords=make_rng(seed).random((n, 3)))


def labeled_queries(spec: ShapeSpec, n: int, seed: int) -> QueryBatch:
    q = sample_queries_uniform(n, seed)
    q.labels = occupancy_oracle(spec, q.coords)
    return q
