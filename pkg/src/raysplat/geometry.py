"""Pinhole camera math: projection, lifting, rays and two-ray triangulation.

Conventions:
  * pixel centers sit at integer coordinates, homogeneous pixel ``[u, v, 1]``;
  * ``Camera.R`` / ``Camera.t`` are camera-to-world, so the camera center is ``t``
    and a world point maps to camera space as ``R^T (X - t)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    NonPositiveDepth,
    NonPositiveDistance,
    ParallelRays,
    ParseError,
)

EPS_DEPTH = 1e-8


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    id: str = "0"
    near: float | None = None
    far: float | None = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "id", str(self.id))
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DataError(f"camera {self.id}: rotation is not a proper orthonormal matrix")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DataError(f"camera {self.id}: focal lengths must be positive")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
            raise DataError(f"camera {self.id}: intrinsics must be upper triangular with K[2,2] = 1")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise DataError(f"camera {self.id}: principal point outside the image")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        return self.t

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into camera coordinates."""
        return (np.asarray(X, dtype=np.float64) - self.t) @ self.R

    def in_bounds(self, p: np.ndarray) -> np.ndarray:
        """True for pixels inside the image, with pixel centers at integers."""
        p = np.asarray(p, dtype=np.float64)
        u, v = p[..., 0], p[..., 1]
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "width": int(self.width),
            "height": int(self.height),
            "K": self.K.reshape(-1).tolist(),
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
        }
        if self.near is not None:
            d["near"] = float(self.near)
        if self.far is not None:
            d["far"] = float(self.far)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                K=np.array(d["K"], dtype=np.float64),
                R=np.array(d["R"], dtype=np.float64),
                t=np.array(d["t"], dtype=np.float64),
                width=int(d["width"]),
                height=int(d["height"]),
                id=str(d["id"]),
                near=d.get("near"),
                far=d.get("far"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad camera record: {exc}") from exc


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray = field()

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise DataError("ray direction must be nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)


def project_points(camera: Camera, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (..., 2), camera depth (...)).

    No depth check is applied; callers mask on the returned depth.
    """
    Xc = camera.world_to_camera(X)
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * Xc[..., 0] / z + camera.K[0, 1] * Xc[..., 1] / z + camera.cx
        v = camera.fy * Xc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1), z


def project_point(camera: Camera, X, eps: float = EPS_DEPTH) -> np.ndarray:
    """Project one world point to pixel coordinates, ``pi(K R^T (X - t))``."""
    uv, z = project_points(camera, np.asarray(X, dtype=np.float64).reshape(3))
    if not z > eps:
        raise NonPositiveDepth(f"point has camera depth {float(z):.3g}")
    return uv


def pixel_rays(camera: Camera, p: np.ndarray) -> np.ndarray:
    """Unnormalized world directions ``R K^-1 [u, v, 1]`` for pixels (..., 2); unit camera z."""
    p = np.asarray(p, dtype=np.float64)
    ph = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return ph @ (camera.R @ camera.K_inv).T


def lift_pixels(camera: Camera, p: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorized ``R (D K^-1 p~) + t`` without precondition checks."""
    return np.asarray(depth, dtype=np.float64)[..., None] * pixel_rays(camera, p) + camera.t


def lift_pixel(camera: Camera, p, depth: float) -> np.ndarray:
    """Back-project a pixel at a given camera-space depth into world space."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    return lift_pixels(camera, np.asarray(p, dtype=np.float64).reshape(2), np.float64(depth))


def ray_from_pixel(camera: Camera, p) -> Ray:
    return Ray(camera.center.copy(), pixel_rays(camera, np.asarray(p, dtype=np.float64).reshape(2)))


def point_on_ray(ray: Ray, z: float) -> np.ndarray:
    if not z > 0:
        raise NonPositiveDistance(f"ray distance must be positive, got {z}")
    return ray.origin + z * ray.direction


def triangulate(ray_i: Ray, ray_j: Ray) -> tuple[np.ndarray, float]:
    """Midpoint of the closest-approach segment between two rays and its length.

    Solves the 2x2 normal equations for the ray parameters minimizing
    ``|o_i + a d_i - (o_j + b d_j)|^2``.
    """
    di, dj = ray_i.direction, ray_j.direction
    c = float(di @ dj)
    if abs(c) >= 1.0 - 1e-9:
        raise ParallelRays("rays are parallel")
    w = ray_i.origin - ray_j.origin
    A = np.array([[1.0, -c], [-c, 1.0]])
    rhs = np.array([-(di @ w), dj @ w])
    a, b = np.linalg.solve(A, rhs)
    pi = ray_i.origin + a * di
    pj = ray_j.origin + b * dj
    return 0.5 * (pi + pj), float(np.linalg.norm(pi - pj))


def triangulate_many(oi, di, oj, dj) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched closest-approach midpoints for unit-direction rays.

    Returns (midpoints, gaps, distance along ray i, distance along ray j);
    parallel pairs yield NaN.
    """
    c = np.einsum("ij,ij->i", di, dj)
    w = oi - oj
    r1 = -np.einsum("ij,ij->i", di, w)
    r2 = np.einsum("ij,ij->i", dj, w)
    det = 1.0 - c * c
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (r1 + c * r2) / det
        b = (c * r1 + r2) / det
    bad = np.abs(c) >= 1.0 - 1e-9
    a[bad] = np.nan
    b[bad] = np.nan
    pi = oi + a[:, None] * di
    pj = oj + b[:, None] * dj
    return 0.5 * (pi + pj), np.linalg.norm(pi - pj, axis=1), a, b


def load_cameras(path) -> list[Camera]:
    """Read the scene camera file: ``{"cameras": [...]}`` or a bare list."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    records = doc["cameras"] if isinstance(doc, dict) else doc
    cams = [Camera.from_dict(r) for r in records]
    ids = [c.id for c in cams]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate camera ids")
    return cams


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=1))


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``center`` looking at ``target``.

    Camera axes are x right, y down, z forward; ``down`` is the world direction
    that should appear downward in the image.
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(np.asarray(down, dtype=np.float64), fwd)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise DataError("look_at: down vector parallel to viewing direction")
    right /= n
    return np.stack([right, np.cross(fwd, right), fwd], axis=1)
