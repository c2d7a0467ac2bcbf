"""Hybrid Gaussian scene model: free primitives plus primitives bound to matching rays.

Parameters are held structure-of-arrays. Ray-bound primitives always occupy
the leading rows so that pair-table indices survive pruning of free ones.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sh as shlib
from .errors import DataError, NonPositiveDepth, ParseError, SingularCovariance, ZeroQuaternion
from .geometry import EPS_DEPTH, Camera, Ray

FREE = 0
RAY_BOUND = 1

LOW_PASS = 0.3

PARAM_FIELDS = ("xyz", "z_raw", "log_scale", "quat", "opacity_logit", "sh")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class GaussianPrimitive:
    """One primitive's raw (pre-activation) attributes."""

    kind: int
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    xyz: np.ndarray | None = None
    ray_index: int = -1
    z_raw: float = 0.0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def z(self) -> float:
        return float(softplus(self.z_raw))


@dataclass
class HybridModel:
    kind: np.ndarray
    xyz: np.ndarray
    ray_index: np.ndarray
    z_raw: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    rays_o: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rays_d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pair_table: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    active: np.ndarray | None = None
    sh_degree: int = 0
    max_sh_degree: int = shlib.MAX_DEGREE

    def __post_init__(self):
        n = len(self.kind)
        if self.active is None:
            self.active = np.ones(n, dtype=bool)
        self.validate()

    # construction ------------------------------------------------------

    @classmethod
    def empty(cls, max_sh_degree: int = shlib.MAX_DEGREE) -> "HybridModel":
        k = shlib.num_coeffs(max_sh_degree)
        return cls(
            kind=np.zeros(0, dtype=np.int8),
            xyz=np.zeros((0, 3)),
            ray_index=np.zeros(0, dtype=np.int64),
            z_raw=np.zeros(0),
            log_scale=np.zeros((0, 3)),
            quat=np.zeros((0, 4)),
            opacity_logit=np.zeros(0),
            sh=np.zeros((0, k, 3)),
            max_sh_degree=max_sh_degree,
        )

    @classmethod
    def from_primitives(cls, prims, rays=(), pairs=(), max_sh_degree: int = shlib.MAX_DEGREE, sh_degree: int | None = None):
        k = shlib.num_coeffs(max_sh_degree)
        prims = list(prims)
        n = len(prims)
        # ray-bound first, keeping relative order; pair entries follow their primitives
        order = sorted(range(n), key=lambda i: prims[i].kind != RAY_BOUND)
        new_index = {old: new for new, old in enumerate(order)}
        prims = [prims[i] for i in order]
        pairs = [(new_index[a], new_index[b], m) for a, b, m in pairs]
        sh = np.zeros((n, k, 3))
        for i, p in enumerate(prims):
            c = np.asarray(p.sh, dtype=np.float64).reshape(-1, 3)
            sh[i, : len(c)] = c
        model = cls(
            kind=np.array([p.kind for p in prims], dtype=np.int8),
            xyz=np.array([p.xyz if p.xyz is not None else np.zeros(3) for p in prims], dtype=np.float64).reshape(n, 3),
            ray_index=np.array([p.ray_index for p in prims], dtype=np.int64),
            z_raw=np.array([p.z_raw for p in prims], dtype=np.float64),
            log_scale=np.array([p.log_scale for p in prims], dtype=np.float64).reshape(n, 3),
            quat=np.array([p.quat for p in prims], dtype=np.float64).reshape(n, 4),
            opacity_logit=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            sh=sh,
            rays_o=np.array([r.origin for r in rays], dtype=np.float64).reshape(-1, 3),
            rays_d=np.array([r.direction for r in rays], dtype=np.float64).reshape(-1, 3),
            pair_table=np.array(list(pairs), dtype=np.int64).reshape(-1, 3),
            max_sh_degree=max_sh_degree,
            sh_degree=max_sh_degree if sh_degree is None else sh_degree,
        )
        return model

    def validate(self) -> None:
        n = len(self.kind)
        for name in ("xyz", "ray_index", "z_raw", "log_scale", "quat", "opacity_logit", "sh", "active"):
            if len(getattr(self, name)) != n:
                raise DataError(f"model field {name} has length {len(getattr(self, name))}, expected {n}")
        rb = self.kind == RAY_BOUND
        if np.any(rb) and (self.ray_index[rb].min() < 0 or self.ray_index[rb].max() >= len(self.rays_o)):
            raise DataError("ray-bound primitive references an invalid ray")
        nr = int(rb.sum())
        if np.any(self.kind[:nr] != RAY_BOUND):
            raise DataError("ray-bound primitives must precede free ones")
        if len(self.pair_table):
            a, b = self.pair_table[:, 0], self.pair_table[:, 1]
            if a.max() >= nr or b.max() >= nr or a.min() < 0 or b.min() < 0:
                raise DataError("pair table must reference ray-bound primitives")

    # activated attributes ------------------------------------------------

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def num_ray_bound(self) -> int:
        return int(np.count_nonzero(self.kind == RAY_BOUND))

    @property
    def num_free(self) -> int:
        return len(self) - self.num_ray_bound

    @property
    def ray_mask(self) -> np.ndarray:
        return self.kind == RAY_BOUND

    def z(self) -> np.ndarray:
        return softplus(self.z_raw)

    def ray_dirs(self) -> np.ndarray:
        """Per-primitive unit ray direction (zeros for free primitives)."""
        d = np.zeros((len(self), 3))
        rb = self.ray_mask
        d[rb] = self.rays_d[self.ray_index[rb]]
        return d

    def positions(self) -> np.ndarray:
        pos = self.xyz.copy()
        rb = self.ray_mask
        if np.any(rb):
            ri = self.ray_index[rb]
            pos[rb] = self.rays_o[ri] + softplus(self.z_raw[rb])[:, None] * self.rays_d[ri]
        return pos

    def position_of(self, idx: int) -> np.ndarray:
        if self.kind[idx] == RAY_BOUND:
            r = self.ray_index[idx]
            return self.rays_o[r] + float(softplus(self.z_raw[idx])) * self.rays_d[r]
        return self.xyz[idx].copy()

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def primitive(self, idx: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            kind=int(self.kind[idx]),
            log_scale=self.log_scale[idx].copy(),
            quat=self.quat[idx].copy(),
            opacity_logit=float(self.opacity_logit[idx]),
            sh=self.sh[idx].copy(),
            xyz=self.xyz[idx].copy() if self.kind[idx] == FREE else None,
            ray_index=int(self.ray_index[idx]),
            z_raw=float(self.z_raw[idx]),
        )

    def ray(self, idx: int) -> Ray:
        return Ray(self.rays_o[idx], self.rays_d[idx])

    # structural edits -----------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "HybridModel":
        return HybridModel(
            **{name: getattr(self, name).copy() for name in (*PARAM_FIELDS, "kind", "ray_index", "rays_o", "rays_d", "pair_table", "active")},
            sh_degree=self.sh_degree,
            max_sh_degree=self.max_sh_degree,
        )

    def subset(self, idx: np.ndarray) -> "HybridModel":
        """Rows ``idx`` (indices or mask); the pair table is passed through untouched."""
        per_prim = {name: getattr(self, name)[idx].copy() for name in (*PARAM_FIELDS, "kind", "ray_index", "active")}
        return HybridModel(
            **per_prim,
            rays_o=self.rays_o.copy(),
            rays_d=self.rays_d.copy(),
            pair_table=self.pair_table.copy(),
            sh_degree=self.sh_degree,
            max_sh_degree=self.max_sh_degree,
        )

    def append_free(self, xyz, log_scale, quat, opacity_logit, sh) -> None:
        n = len(xyz)
        self.kind = np.concatenate([self.kind, np.full(n, FREE, dtype=np.int8)])
        self.xyz = np.concatenate([self.xyz, xyz])
        self.ray_index = np.concatenate([self.ray_index, np.full(n, -1, dtype=np.int64)])
        self.z_raw = np.concatenate([self.z_raw, np.zeros(n)])
        self.log_scale = np.concatenate([self.log_scale, log_scale])
        self.quat = np.concatenate([self.quat, quat])
        self.opacity_logit = np.concatenate([self.opacity_logit, opacity_logit])
        self.sh = np.concatenate([self.sh, sh])
        self.active = np.concatenate([self.active, np.ones(n, dtype=bool)])

    # checkpoint IO ------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self))

    @classmethod
    def load(cls, path) -> "HybridModel":
        return checkpoint_from_bytes(Path(path).read_bytes())


# --- per-primitive math ---------------------------------------------------


def quat_to_rotation(r) -> np.ndarray:
    """Rotation matrix of quaternion ``r = (w, x, y, z)``; normalized internally."""
    r = np.asarray(r, dtype=np.float64)
    n = np.linalg.norm(r)
    if n == 0:
        raise ZeroQuaternion("quaternion has zero norm")
    return quat_to_rotation_batch((r / n)[None])[0]


def quat_to_rotation_batch(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (N, 4) -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_rotation_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. unit quaternion components given dL/dR (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance_3d(s, r) -> np.ndarray:
    """``R S S^T R^T`` for activated scale ``s`` and quaternion ``r``."""
    M = quat_to_rotation(r) * np.asarray(s, dtype=np.float64)[None, :]
    return M @ M.T


def camera_jacobian(camera: Camera, tc: np.ndarray) -> np.ndarray:
    """Affine pinhole Jacobians (N, 2, 3) at camera-space points (N, 3)."""
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    J = np.zeros((len(tc), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / (z * z)
    return J


def project_covariance(cov3d, camera: Camera, mu, low_pass: float = LOW_PASS) -> np.ndarray:
    """Screen-space covariance ``J W Sigma W^T J^T`` plus a low-pass floor."""
    tc = camera.world_to_camera(np.asarray(mu, dtype=np.float64).reshape(1, 3))
    if not tc[0, 2] > EPS_DEPTH:
        raise NonPositiveDepth(f"mean has camera depth {tc[0, 2]:.3g}")
    T = camera_jacobian(camera, tc)[0] @ camera.R.T
    cov2d = T @ np.asarray(cov3d, dtype=np.float64) @ T.T
    return cov2d + low_pass * np.eye(2)


def gaussian_weight_2d(p, mu2d, cov2d) -> float:
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = np.linalg.det(cov2d)
    if not abs(det) > 1e-300:
        raise SingularCovariance("2D covariance is singular")
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu2d, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov2d, d)))


# --- binary checkpoint -----------------------------------------------------

MAGIC = b"SCGS"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def _record_dtype(max_sh_degree: int) -> np.dtype:
    k = shlib.num_coeffs(max_sh_degree)
    return np.dtype(
        [
            ("kind", "<u1"),
            ("active", "<u1"),
            ("ray_index", "<i8"),
            ("pos", "<f8", (3,)),
            ("log_scale", "<f8", (3,)),
            ("quat", "<f8", (4,)),
            ("opacity_logit", "<f8"),
            ("sh", "<f8", (k, 3)),
        ]
    )


def checkpoint_bytes(model: HybridModel) -> bytes:
    """Serialize: header, primitive records, ray table, pair table (little-endian).

    A free record stores its position in ``pos``; a ray-bound record stores
    its ray index plus raw distance in ``pos[0]``.
    """
    n = len(model)
    rec = np.zeros(n, dtype=_record_dtype(model.max_sh_degree))
    rec["kind"] = model.kind
    rec["active"] = model.active
    rec["ray_index"] = model.ray_index
    rb = model.ray_mask
    rec["pos"][~rb] = model.xyz[~rb]
    rec["pos"][rb, 0] = model.z_raw[rb]
    rec["log_scale"] = model.log_scale
    rec["quat"] = model.quat
    rec["opacity_logit"] = model.opacity_logit
    rec["sh"] = model.sh
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, model.max_sh_degree, model.sh_degree),
        rec.tobytes(),
        struct.pack("<Q", len(model.rays_o)),
        np.concatenate([model.rays_o, model.rays_d], axis=1).astype("<f8").tobytes(),
        struct.pack("<Q", len(model.pair_table)),
        model.pair_table.astype("<i8").tobytes(),
    ]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> HybridModel:
    try:
        magic, version, n, max_deg, deg = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ParseError("not a checkpoint (bad magic)")
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        off = _HEADER.size
        dt = _record_dtype(max_deg)
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
        off += n * dt.itemsize
        (nr,) = struct.unpack_from("<Q", buf, off)
        off += 8
        rays = np.frombuffer(buf, dtype="<f8", count=6 * nr, offset=off).reshape(nr, 6)
        off += 48 * nr
        (npairs,) = struct.unpack_from("<Q", buf, off)
        off += 8
        pairs = np.frombuffer(buf, dtype="<i8", count=3 * npairs, offset=off).reshape(npairs, 3)
        off += 24 * npairs
    except (struct.error, ValueError) as exc:
        raise ParseError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise ParseError("trailing bytes after checkpoint")
    kind = rec["kind"].astype(np.int8)
    rb = kind == RAY_BOUND
    xyz = np.where(rb[:, None], 0.0, rec["pos"])
    z_raw = np.where(rb, rec["pos"][:, 0], 0.0)
    return HybridModel(
        kind=kind,
        xyz=xyz.astype(np.float64),
        ray_index=rec["ray_index"].astype(np.int64),
        z_raw=z_raw.astype(np.float64),
        log_scale=rec["log_scale"].astype(np.float64),
        quat=rec["quat"].astype(np.float64),
        opacity_logit=rec["opacity_logit"].astype(np.float64),
        sh=rec["sh"].astype(np.float64),
        rays_o=rays[:, :3].astype(np.float64),
        rays_d=rays[:, 3:].astype(np.float64),
        pair_table=pairs.astype(np.int64),
        active=rec["active"].astype(bool),
        sh_degree=int(deg),
        max_sh_degree=int(max_deg),
    )
