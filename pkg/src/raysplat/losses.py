"""Training objectives: photometric, Gaussian-position and rendering-geometry losses.

Every loss returns its value together with an analytic gradient so the
trainer can chain it into the rasterizer's backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import ShapeMismatch
from .geometry import Camera
from .matching import MatchSet, pair_active
from .model import HybridModel, sigmoid

BEHIND_PENALTY_PX = 100.0
BEHIND_HINGE_SLOPE = 100.0
MIN_ALPHA_FOR_DEPTH = 0.1


@dataclass
class LossWeights:
    lam: float = 0.2
    beta: float = 1.0
    delta: float = 0.3
    delta_start: int = 1000
    eta: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if min(self.beta, self.delta, self.eta) < 0:
            raise ValueError("beta, delta and eta must be non-negative")

    def at(self, iteration: int) -> tuple[float, float]:
        """(beta, delta) in effect at ``iteration``; delta steps up at ``delta_start``."""
        return self.beta, (self.delta if iteration >= self.delta_start else 0.0)


@dataclass
class LossReport:
    total: float
    photo: float
    l1: float
    ssim_term: float
    gp: float
    rg: float
    beta: float
    delta: float
    per_pair_gp: np.ndarray = field(default_factory=lambda: np.zeros(0))


# --- photometric ---------------------------------------------------------------


def photometric_loss(rendered, target, lam: float = 0.2, with_grad: bool = False):
    """``(1 - lam) * L1 + lam * (1 - SSIM)``.

    Returns the scalar, or (scalar, l1, ssim_term, d/d rendered) with ``with_grad``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    if lam > 0:
        s, ds = metrics.ssim_with_grad(rendered, target)
    else:
        s, ds = 1.0, 0.0
    loss = (1.0 - lam) * l1 + lam * (1.0 - s)
    if not with_grad:
        return loss
    grad = (1.0 - lam) * np.sign(diff) / diff.size - lam * ds
    return loss, l1, 1.0 - s, grad


# --- reprojection helpers --------------------------------------------------------


@dataclass
class CameraStack:
    """Per-camera matrices stacked for vectorized many-camera projection."""

    ids: list[str]
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    Kinv: np.ndarray

    @classmethod
    def of(cls, cameras) -> "CameraStack":
        cams = list(cameras)
        return cls(
            [c.id for c in cams],
            np.stack([c.K for c in cams]),
            np.stack([c.R for c in cams]),
            np.stack([c.t for c in cams]),
            np.stack([c.K_inv for c in cams]),
        )

    def lookup(self, ids) -> np.ndarray:
        pos = {v: k for k, v in enumerate(self.ids)}
        return np.array([pos[v] for v in ids], dtype=np.int64)


def _reproject(X, K, R, t, p_target, norm: str = "l2", eps: float = 1e-8):
    """Pixel error of points X (N, 3) seen by per-point cameras, with dError/dX.

    Points at or behind a camera get ``BEHIND_PENALTY_PX`` plus a hinge on
    camera depth whose gradient pushes them back in front.
    """
    tc = np.einsum("nji,nj->ni", R, X - t)
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    front = z > eps
    zs = np.where(front, z, 1.0)
    fx, fy, cx, cy = K[:, 0, 0], K[:, 1, 1], K[:, 0, 2], K[:, 1, 2]
    uv = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1)
    e = uv - p_target
    if norm == "l2":
        err = np.hypot(e[:, 0], e[:, 1])
        g_uv = np.where(err[:, None] > 0, -e / np.where(err > 0, err, 1.0)[:, None], 0.0)
    elif norm == "l1":
        err = np.abs(e).sum(axis=1)
        g_uv = -np.sign(e)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    # d err / d tc  (g_uv is d err / d p_target^-; d err / d uv = -g_uv)
    g_tc = np.zeros_like(tc)
    du = -g_uv[:, 0]
    dv = -g_uv[:, 1]
    g_tc[:, 0] = du * fx / zs
    g_tc[:, 1] = dv * fy / zs
    g_tc[:, 2] = -(du * fx * x + dv * fy * y) / zs**2
    behind = ~front
    err = np.where(behind, BEHIND_PENALTY_PX + BEHIND_HINGE_SLOPE * (eps - z), err)
    g_tc[behind] = 0.0
    g_tc[behind, 2] = -BEHIND_HINGE_SLOPE
    g_X = np.einsum("nij,nj->ni", R, g_tc)
    return err, g_X, front


@dataclass
class PositionLoss:
    value: float
    per_pair: np.ndarray
    grad_z_raw: np.ndarray
    n_terms: int


def gaussian_position_loss(model: HybridModel, cameras, matches: MatchSet, norm: str = "l2") -> PositionLoss:
    """Mean reprojection error of ray-bound pairs into their partner views.

    Row ``(a, b, k)`` of the pair table binds primitive ``a`` to match k's
    pixel in view i and ``b`` to its pixel in view j; ``a`` is scored in view j
    and ``b`` in view i. The mean runs over both directions of every active
    pair; ``per_pair`` holds the mean of a pair's two terms (NaN if inactive).
    """
    n = len(model)
    grad = np.zeros(n)
    pt = model.pair_table
    per_pair = np.full(len(pt), np.nan)
    act = pair_active(model) if len(pt) else np.zeros(0, dtype=bool)
    sel = np.flatnonzero(act)
    if len(sel) == 0:
        return PositionLoss(0.0, per_pair, grad, 0)
    cs = CameraStack.of(cameras)
    a, b, k = pt[sel, 0], pt[sel, 1], pt[sel, 2]
    ci = cs.lookup([matches.view_i[m] for m in k])
    cj = cs.lookup([matches.view_j[m] for m in k])
    pos = model.positions()
    err_a, gX_a, _ = _reproject(pos[a], cs.K[cj], cs.R[cj], cs.t[cj], matches.p_j[k], norm)
    err_b, gX_b, _ = _reproject(pos[b], cs.K[ci], cs.R[ci], cs.t[ci], matches.p_i[k], norm)
    n_terms = 2 * len(sel)
    value = float((err_a.sum() + err_b.sum()) / n_terms)
    per_pair[sel] = 0.5 * (err_a + err_b)
    dirs = model.rays_d[model.ray_index]
    sg = sigmoid(model.z_raw)
    grad[a] = np.einsum("ij,ij->i", gX_a, dirs[a]) * sg[a] / n_terms
    grad[b] = np.einsum("ij,ij->i", gX_b, dirs[b]) * sg[b] / n_terms
    return PositionLoss(value, per_pair, grad, n_terms)


@dataclass
class GeometryLoss:
    value: float
    d_depth: dict
    d_alpha: dict
    n_terms: int


def _bilinear_taps(p: np.ndarray, W: int, H: int):
    # same sampling rule as matching.sample_bilinear, including the extrapolated rim
    u = np.clip(p[:, 0], -0.5, W - 0.5)
    v = np.clip(p[:, 1], -0.5, H - 0.5)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    fu, fv = u - u0, v - v0
    u1, v1 = np.minimum(u0 + 1, W - 1), np.minimum(v0 + 1, H - 1)
    idx = np.stack([v0 * W + u0, v0 * W + u1, v1 * W + u0, v1 * W + u1], axis=1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return idx, wts


def rendering_geometry_loss_multi(depths: dict, alphas: dict, cameras, matches: MatchSet,
                                  active: np.ndarray | None = None, normalize_depth: bool = False,
                                  norm: str = "l2", min_alpha: float = MIN_ALPHA_FOR_DEPTH) -> GeometryLoss:
    """Depth-lifting reprojection loss over all matches and both directions.

    For direction i->j the rendered depth of view i is sampled bilinearly at
    p_i, the pixel is lifted to world space and reprojected into view j. Terms
    whose sampled alpha is below ``min_alpha``, whose depth is not positive,
    or whose lifted point falls behind the other camera are skipped.
    """
    cams = {c.id: c for c in cameras}
    d_depth = {v: np.zeros_like(d) for v, d in depths.items()}
    d_alpha = {v: np.zeros_like(a) for v, a in alphas.items()}
    if active is None:
        active = np.ones(len(matches), dtype=bool)
    terms = []  # (view_src, taps, weights, depth value, alpha value, grad wrt sampled depth, err)
    for (vi, vj), idx in matches.index.items():
        idx = idx[active[idx]]
        if len(idx) == 0 or vi not in depths or vj not in depths:
            continue
        for src, dst, p_src, p_dst in ((vi, vj, matches.p_i[idx], matches.p_j[idx]),
                                       (vj, vi, matches.p_j[idx], matches.p_i[idx])):
            cs, cd = cams[src], cams[dst]
            D, A = depths[src], alphas[src]
            H, W = D.shape
            taps, wts = _bilinear_taps(p_src, W, H)
            dval = (D.reshape(-1)[taps] * wts).sum(axis=1)
            aval = (A.reshape(-1)[taps] * wts).sum(axis=1)
            ok = aval >= min_alpha
            dz = np.where(ok, dval / np.where(ok, aval, 1.0), 0.0) if normalize_depth else dval
            ok &= dz > 0
            ph = np.concatenate([p_src, np.ones((len(p_src), 1))], axis=1)
            rays = ph @ (cs.R @ cs.K_inv).T
            X = dz[:, None] * rays + cs.t
            n = len(X)
            err, gX, front = _reproject(X, np.broadcast_to(cd.K, (n, 3, 3)), np.broadcast_to(cd.R, (n, 3, 3)),
                                        np.broadcast_to(cd.t, (n, 3)), p_dst, norm)
            ok &= front
            g_dz = np.einsum("ij,ij->i", gX, rays)
            terms.append((src, taps[ok], wts[ok], dval[ok], aval[ok], g_dz[ok], err[ok]))
    n_terms = sum(len(t[6]) for t in terms)
    if n_terms == 0:
        return GeometryLoss(0.0, d_depth, d_alpha, 0)
    value = float(sum(t[6].sum() for t in terms) / n_terms)
    for src, taps, wts, dval, aval, g_dz, _ in terms:
        g = g_dz / n_terms
        if normalize_depth:
            g_d = g / aval
            g_a = -g * dval / aval**2
            np.add.at(d_alpha[src].reshape(-1), taps.reshape(-1), (g_a[:, None] * wts).reshape(-1))
        else:
            g_d = g
        np.add.at(d_depth[src].reshape(-1), taps.reshape(-1), (g_d[:, None] * wts).reshape(-1))
    return GeometryLoss(value, d_depth, d_alpha, n_terms)


def rendering_geometry_loss(depth_i, depth_j, cam_i: Camera, cam_j: Camera, matches: MatchSet,
                            alpha_i=None, alpha_j=None, **kw) -> float:
    """Two-view form of :func:`rendering_geometry_loss_multi`; alpha defaults to fully opaque."""
    depths = {cam_i.id: np.asarray(depth_i, dtype=np.float64), cam_j.id: np.asarray(depth_j, dtype=np.float64)}
    alphas = {
        cam_i.id: np.ones_like(depths[cam_i.id]) if alpha_i is None else np.asarray(alpha_i, dtype=np.float64),
        cam_j.id: np.ones_like(depths[cam_j.id]) if alpha_j is None else np.asarray(alpha_j, dtype=np.float64),
    }
    return rendering_geometry_loss_multi(depths, alphas, [cam_i, cam_j], matches, **kw).value


def total_loss(iteration: int, weights: LossWeights, photo=None, gp: PositionLoss | None = None,
               rg: GeometryLoss | None = None) -> LossReport:
    """Combine the three objectives with the weights in effect at ``iteration``.

    ``photo`` is ``(loss, l1, ssim_term)`` or None.
    """
    beta, delta = weights.at(iteration)
    p, l1, st = photo if photo is not None else (0.0, 0.0, 0.0)
    g = gp.value if gp is not None else 0.0
    r = rg.value if rg is not None else 0.0
    return LossReport(
        total=p + beta * g + delta * r,
        photo=p,
        l1=l1,
        ssim_term=st,
        gp=g,
        rg=r,
        beta=beta,
        delta=delta,
        per_pair_gp=gp.per_pair if gp is not None else np.zeros(0),
    )
