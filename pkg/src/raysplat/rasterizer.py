"""Software splatting rasterizer with an analytic backward pass.

Every visible primitive is projected (EWA) and binned into 16x16 pixel tiles
by its 3-sigma box; tile lists keep one global front-to-back depth order.
The compiled loops in ``_kernels`` composite each pixel and, for the
backward pass, replay the pixel front to back before sweeping the suffix
sums back to front. Everything per primitive stays in numpy here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sh as shlib
from .errors import DataError, MissingContributorRecord
from ._kernels import composite_backward, composite_forward
from .geometry import Camera
from .model import LOW_PASS, RAY_BOUND, HybridModel, camera_jacobian, quat_rotation_backward, quat_to_rotation_batch, sigmoid

TILE = 16


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int | None = None
    retain_for_backward: bool = False
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    cull: bool = True
    low_pass: float = LOW_PASS
    near: float = 1e-2
    opacity_override: float | None = None
    include_inactive: bool = False


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    per_pixel_contributors: dict | None = None


@dataclass
class GradientBuffer:
    xyz: np.ndarray
    z_raw: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    view_grad: np.ndarray
    hits: np.ndarray

    @classmethod
    def zeros_like(cls, model: HybridModel) -> "GradientBuffer":
        n = len(model)
        return cls(
            xyz=np.zeros((n, 3)),
            z_raw=np.zeros(n),
            log_scale=np.zeros((n, 3)),
            quat=np.zeros((n, 4)),
            opacity_logit=np.zeros(n),
            sh=np.zeros_like(model.sh),
            view_grad=np.zeros(n),
            hits=np.zeros(n, dtype=np.int64),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("xyz", "z_raw", "log_scale", "quat", "opacity_logit", "sh")}

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        for k in ("xyz", "z_raw", "log_scale", "quat", "opacity_logit", "sh", "view_grad", "hits"):
            getattr(self, k).__iadd__(getattr(other, k))
        return self


def _prepare(model: HybridModel, camera: Camera, opts: RenderOptions):
    """Per-primitive projection quantities, depth-sorted, for primitives in front of the camera."""
    if camera.K[0, 1] != 0:
        raise DataError("rasterizer does not support skewed intrinsics")
    mask = np.ones(len(model), dtype=bool) if opts.include_inactive else model.active.copy()
    mu_all = model.positions()
    tc_all = camera.world_to_camera(mu_all)
    mask &= tc_all[:, 2] > opts.near
    vis = np.flatnonzero(mask)
    mu = mu_all[vis]
    tc = tc_all[vis]
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    uv = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=-1)

    qn = np.linalg.norm(model.quat[vis], axis=1)
    q = model.quat[vis] / qn[:, None]
    Rq = quat_to_rotation_batch(q)
    s = np.exp(model.log_scale[vis])
    M = Rq * s[:, None, :]
    cov3 = M @ np.transpose(M, (0, 2, 1))
    J = camera_jacobian(camera, tc)
    T = J @ camera.R.T
    cov2 = T @ cov3 @ np.transpose(T, (0, 2, 1))
    cov2[:, 0, 0] += opts.low_pass
    cov2[:, 1, 1] += opts.low_pass
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    good = det > 0
    conic = np.stack([c / det, -b / det, a / det], axis=-1)

    degree = model.sh_degree if opts.sh_degree is None else min(opts.sh_degree, model.max_sh_degree)
    nk = shlib.num_coeffs(degree)
    v = mu - camera.center
    vn = np.linalg.norm(v, axis=1)
    dirs = v / np.where(vn > 0, vn, 1.0)[:, None]
    basis = shlib.sh_basis(dirs, degree)
    rgb_raw = np.einsum("nk,nkc->nc", basis, model.sh[vis, :nk]) + shlib.COLOR_OFFSET
    rgb = np.maximum(rgb_raw, 0.0)

    if opts.opacity_override is not None:
        opac = np.full(len(vis), float(opts.opacity_override))
    else:
        opac = sigmoid(model.opacity_logit[vis])

    # drop degenerate splats, then order front to back (ties by storage index)
    sel = np.flatnonzero(good)
    sel = sel[np.lexsort((vis[sel], z[sel]))]
    return dict(
        vis=vis[sel], mu=mu[sel], tc=tc[sel], uv=uv[sel], q=q[sel], qn=qn[sel], Rq=Rq[sel], s=s[sel], M=M[sel],
        cov3=cov3[sel], J=J[sel], T=T[sel], cov2=cov2[sel], conic=conic[sel], det=det[sel], degree=degree,
        dirs=dirs[sel], vn=vn[sel], basis=basis[sel], rgb_raw=rgb_raw[sel], rgb=rgb[sel], opac=opac[sel],
    )


def _footprints(P: dict, camera: Camera, opts: RenderOptions):
    """Per-primitive pixel boxes (u0, v0, width, height) of the 3-sigma ellipse bound."""
    W, H = camera.width, camera.height
    n = len(P["vis"])
    if not opts.cull:
        z = np.zeros(n, dtype=np.int64)
        return z, z, np.full(n, W, dtype=np.int64), np.full(n, H, dtype=np.int64)
    cov2, uv = P["cov2"], P["uv"]
    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - P["det"]))
    r = 3.0 * np.sqrt(lam)
    u0 = np.clip(np.ceil(uv[:, 0] - r), 0, W).astype(np.int64)
    u1 = np.clip(np.floor(uv[:, 0] + r) + 1, 0, W).astype(np.int64)
    v0 = np.clip(np.ceil(uv[:, 1] - r), 0, H).astype(np.int64)
    v1 = np.clip(np.floor(uv[:, 1] + r) + 1, 0, H).astype(np.int64)
    return u0, v0, np.maximum(u1 - u0, 0), np.maximum(v1 - v0, 0)


def _tile_lists(u0, v0, bw, bh, W: int, H: int):
    """CSR lists of primitive ranks per tile; ranks are depth order, so lists stay sorted."""
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    live = (bw > 0) & (bh > 0)
    tx0 = np.where(live, u0 // TILE, 0)
    ty0 = np.where(live, v0 // TILE, 0)
    tw = np.where(live, (u0 + bw - 1) // TILE - tx0 + 1, 0)
    th = np.where(live, (v0 + bh - 1) // TILE - ty0 + 1, 0)
    cnt = tw * th
    total = int(cnt.sum())
    prim = np.repeat(np.arange(len(u0)), cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    twr = np.repeat(np.maximum(tw, 1), cnt)
    tile = (np.repeat(ty0, cnt) + offs // twr) * ntx + np.repeat(tx0, cnt) + offs % twr
    order = np.argsort(tile, kind="stable")
    start = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=ntx * nty), out=start[1:])
    return start, prim[order].astype(np.int64)


def _kernel_args(P: dict, camera: Camera, opts: RenderOptions):
    W, H = camera.width, camera.height
    u0, v0, bw, bh = _footprints(P, camera, opts)
    start, lists = _tile_lists(u0, v0, bw, bh, W, H)
    conic = P["conic"]
    opac = np.ascontiguousarray(P["opac"])
    with np.errstate(divide="ignore"):
        pfloor = np.log(opts.alpha_min / opac) if opts.alpha_min > 0 else np.full(len(opac), -np.inf)
    return (
        W, H, TILE, start, lists, u0, u0 + bw, v0, v0 + bh,
        np.ascontiguousarray(P["uv"][:, 0]), np.ascontiguousarray(P["uv"][:, 1]),
        np.ascontiguousarray(conic[:, 0]), np.ascontiguousarray(conic[:, 1]), np.ascontiguousarray(conic[:, 2]),
        opac, pfloor, np.ascontiguousarray(P["rgb"]), np.ascontiguousarray(P["tc"][:, 2]),
        np.asarray(opts.background, dtype=np.float64).reshape(3),
        float(opts.alpha_max), float(opts.alpha_min), float(opts.t_min),
    )


def render(model: HybridModel, camera: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    """Composite color, depth and accumulated alpha for one view.

    Primitives are visited front to back in camera depth (ties by storage
    index); overlaps below ``alpha_min`` are skipped and a pixel stops
    accumulating once its transmittance would fall under ``t_min``.
    """
    opts = opts or RenderOptions()
    W, H = camera.width, camera.height
    P = _prepare(model, camera, opts)
    args = _kernel_args(P, camera, opts)
    color, depth, t_final, n_contrib = composite_forward(*args)
    ctx = None
    if opts.retain_for_backward:
        ctx = dict(P=P, args=args, T_final=t_final, n_contrib=n_contrib, opts=opts, n_model=len(model), W=W, H=H)
    return RenderOutput(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        alpha=(1.0 - t_final).reshape(H, W),
        per_pixel_contributors=ctx,
    )


def render_backward(model: HybridModel, camera: Camera, output: RenderOutput,
                    d_color: np.ndarray | None = None, d_depth: np.ndarray | None = None,
                    d_alpha: np.ndarray | None = None) -> GradientBuffer:
    """Reverse-mode gradients of a scalar loss given its image-space gradients."""
    ctx = output.per_pixel_contributors
    if ctx is None:
        raise MissingContributorRecord("render with retain_for_backward=True first")
    W, H = ctx["W"], ctx["H"]
    if ctx["n_model"] != len(model):
        raise DataError("model changed between render and backward")
    gC = np.zeros((W * H, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64).reshape(W * H, 3)
    gD = np.zeros(W * H) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(W * H)
    gA = np.zeros(W * H) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(W * H)
    buf = GradientBuffer.zeros_like(model)
    P = ctx["P"]
    n = len(P["vis"])
    if n == 0:
        return buf
    d_opac, g_u, g_v, g_cA, g_cB, g_cC, g_rgb, g_depth, hits = composite_backward(
        *ctx["args"], ctx["T_final"], ctx["n_contrib"], np.ascontiguousarray(gC), np.ascontiguousarray(gD),
        np.ascontiguousarray(gA))

    # conic -> 2D covariance
    conic = P["conic"]
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    GQ = np.empty((n, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = g_cA, 0.5 * g_cB, 0.5 * g_cB, g_cC
    G2 = -Q @ GQ @ Q
    # 2D covariance -> 3D covariance and projection matrix T = J W
    T, cov3 = P["T"], P["cov3"]
    Tt = np.transpose(T, (0, 2, 1))
    G3 = Tt @ G2 @ T
    gT = 2.0 * G2 @ T @ cov3
    gJ = gT @ camera.R
    # 3D covariance -> scale and rotation
    M, Rq, s = P["M"], P["Rq"], P["s"]
    gM = 2.0 * G3 @ M
    g_s = np.einsum("nij,nij->nj", gM, Rq)
    g_Rq = gM * s[:, None, :]
    g_qn = quat_rotation_backward(P["q"], g_Rq)
    qv = P["q"]
    g_quat = (g_qn - qv * np.einsum("ni,ni->n", qv, g_qn)[:, None]) / P["qn"][:, None]

    # camera-space position
    tc = P["tc"]
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    fx, fy = camera.fx, camera.fy
    g_tc = np.zeros((n, 3))
    g_tc[:, 0] = g_u * fx / z + gJ[:, 0, 2] * (-fx / z**2)
    g_tc[:, 1] = g_v * fy / z + gJ[:, 1, 2] * (-fy / z**2)
    g_tc[:, 2] = (
        g_u * (-fx * x / z**2) + g_v * (-fy * y / z**2) + g_depth
        + gJ[:, 0, 0] * (-fx / z**2) + gJ[:, 0, 2] * (2 * fx * x / z**3)
        + gJ[:, 1, 1] * (-fy / z**2) + gJ[:, 1, 2] * (2 * fy * y / z**3)
    )
    g_mu = g_tc @ camera.R.T

    # spherical harmonics
    degree = P["degree"]
    nk = shlib.num_coeffs(degree)
    g_rgb = g_rgb * (P["rgb_raw"] > 0)
    g_sh = np.einsum("nk,nc->nkc", P["basis"], g_rgb)
    if degree > 0:
        sh_coef = model.sh[P["vis"], :nk]
        g_basis = np.einsum("nkc,nc->nk", sh_coef, g_rgb)
        g_dir = np.einsum("nk,nkj->nj", g_basis, shlib.sh_basis_jacobian(P["dirs"], degree))
        dirs = P["dirs"]
        g_mu += (g_dir - dirs * np.einsum("nj,nj->n", dirs, g_dir)[:, None]) / P["vn"][:, None]

    vis = P["vis"]
    rb = model.kind[vis] == RAY_BOUND
    ray_d = model.rays_d[model.ray_index[vis[rb]]]
    g_z = np.einsum("nj,nj->n", g_mu[rb], ray_d)
    buf.z_raw[vis[rb]] = g_z * sigmoid(model.z_raw[vis[rb]])
    buf.xyz[vis[~rb]] = g_mu[~rb]
    buf.log_scale[vis] = g_s * s
    buf.quat[vis] = g_quat
    if ctx["opts"].opacity_override is None:
        o = P["opac"]
        buf.opacity_logit[vis] = d_opac * o * (1.0 - o)
    buf.sh[vis, :nk] = g_sh
    buf.view_grad[vis] = np.hypot(g_u * 0.5 * W, g_v * 0.5 * H)
    buf.hits[vis] = hits
    return buf


def render_primitive_distance(model: HybridModel, camera: Camera, clamp: bool = True,
                              opts: RenderOptions | None = None) -> np.ndarray:
    """Depth composite with every opacity forced to 1, showing the nearest primitives."""
    base = opts or RenderOptions()
    o = RenderOptions(**{**base.__dict__, "opacity_override": 1.0, "retain_for_backward": False})
    if not clamp:
        # a fully opaque splat would otherwise trip the termination test before it lands
        o.alpha_max = 1.0
        o.t_min = 0.0
    return render(model, camera, o).depth
