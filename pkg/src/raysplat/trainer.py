"""Optimization loop: hybrid initialization, Adam updates, z caching, match filtering, densification."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .errors import EmptyMatchSet, NonFiniteLoss
from .geometry import Camera, pixel_rays, triangulate_many
from .losses import LossReport, LossWeights, gaussian_position_loss, photometric_loss, rendering_geometry_loss_multi, total_loss
from .matching import MatchSet, filter_pairs, pair_active, sample_bilinear
from .model import FREE, RAY_BOUND, HybridModel, logit, quat_to_rotation_batch, softplus_inv
from .rasterizer import GradientBuffer, RenderOptions, render, render_backward
from .sh import MAX_DEGREE, num_coeffs, rgb_to_dc

log = logging.getLogger(__name__)

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 10.0

LOG_COLUMNS = ("iter", "total", "photo", "l1", "ssim_term", "gp", "rg", "beta", "delta", "z_lr",
               "active_pairs", "n_raybound", "n_free")


@dataclass
class LearningRates:
    # positions of free primitives scale with the scene extent and decay over ``xyz_max_steps``
    xyz: float = 1.6e-4
    xyz_end: float = 1.6e-6
    xyz_max_steps: int = 30000
    log_scale: float = 0.005
    quat: float = 0.001
    opacity_logit: float = 0.05
    sh_dc: float = 0.0025
    sh_rest: float = 0.0025 / 20.0


@dataclass
class TrainConfig:
    iterations: int = 3000
    cache_window: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    z_lr_start: float = 0.1
    z_lr_end: float = 1.6e-6
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int | None = None
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    sh_interval: int = 1000
    max_sh_degree: int = MAX_DEGREE
    filter_interval: int = 500
    cache_mode: str = "per_primitive"  # or "snapshot"
    photometric: bool = True  # False trains the structure losses alone, without rendering
    normalize_depth: bool = False
    norm: str = "l2"
    init: str = "random"  # or "triangulate"
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        self.background = tuple(self.background)
        if self.cache_window > self.iterations:
            raise ValueError("cache_window must not exceed iterations")
        lrs = [self.z_lr_start, self.z_lr_end, *asdict(self.lr).values()]
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        if self.cache_mode not in ("per_primitive", "snapshot"):
            raise ValueError(f"unknown cache mode {self.cache_mode!r}")
        if self.init not in ("random", "triangulate"):
            raise ValueError(f"unknown init mode {self.init!r}")

    @property
    def structure_on(self) -> bool:
        """Caching and filtering only run when the position loss is part of the objective."""
        return self.weights.beta > 0

    def z_lr(self, iteration: int) -> float:
        t = min(max(iteration / max(self.iterations - 1, 1), 0.0), 1.0)
        return float(np.exp((1 - t) * np.log(self.z_lr_start) + t * np.log(self.z_lr_end)))

    def xyz_lr(self, iteration: int, extent: float) -> float:
        t = min(max(iteration / self.lr.xyz_max_steps, 0.0), 1.0)
        return float(extent * np.exp((1 - t) * np.log(self.lr.xyz) + t * np.log(self.lr.xyz_end)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- optimizer ----------------------------------------------------------------------


class Adam:
    """Adam over the model's parameter arrays with per-row freezing and row editing."""

    b1, b2, eps = 0.9, 0.999, 1e-15

    def __init__(self, model: HybridModel):
        self.m = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params().items()}
        self.t = 0

    def step(self, model: HybridModel, grads: dict, lrs: dict, frozen: np.ndarray | None = None):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            lr = lrs[k]
            m, v = self.m[k], self.v[k]
            if frozen is not None and frozen.any():
                live = ~frozen
                m[live] = self.b1 * m[live] + (1 - self.b1) * g[live]
                v[live] = self.b2 * v[live] + (1 - self.b2) * g[live] ** 2
            else:
                live = slice(None)
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
            p = getattr(model, k)
            # lr may be an array broadcast over trailing axes (per-SH-band rates)
            p[live] -= lr * (m[live] / c1) / (np.sqrt(v[live] / c2) + self.eps)

    def keep_rows(self, idx: np.ndarray):
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][idx]

    def add_rows(self, n: int):
        for d in (self.m, self.v):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros((n, *d[k].shape[1:]))])

    def reset(self, name: str, rows: np.ndarray):
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0


# --- initialization ---------------------------------------------------------------


def _frustum(cam: Camera) -> tuple[float, float]:
    near = cam.near if cam.near is not None else DEFAULT_NEAR
    far = cam.far if cam.far is not None else DEFAULT_FAR
    return near, far


def init_hybrid(matches: MatchSet, cameras, images: dict | None = None, rng=None, mode: str = "random",
                init_opacity: float = 0.1, max_sh_degree: int = MAX_DEGREE) -> HybridModel:
    """Two ray-bound primitives per match, bound to the rays through its two pixels.

    ``mode="random"`` draws z log-uniformly in [0.2 near, 2 far] of the source
    camera; ``mode="triangulate"`` uses the closest-approach distances of the
    two rays (falling back to random where a ray would need z <= 0).
    """
    if len(matches) == 0:
        raise EmptyMatchSet("initialization needs at least one match")
    rng = np.random.default_rng(rng)
    cams = {c.id: c for c in cameras}
    n = len(matches)
    ci = [cams[v] for v in matches.view_i]
    cj = [cams[v] for v in matches.view_j]
    oi = np.array([c.center for c in ci])
    oj = np.array([c.center for c in cj])
    di = np.empty((n, 3))
    dj = np.empty((n, 3))
    for (vi, vj), idx in matches.index.items():
        di[idx] = pixel_rays(cams[vi], matches.p_i[idx])
        dj[idx] = pixel_rays(cams[vj], matches.p_j[idx])
    di /= np.linalg.norm(di, axis=1, keepdims=True)
    dj /= np.linalg.norm(dj, axis=1, keepdims=True)

    def draw(cs):
        lo = np.array([0.2 * _frustum(c)[0] for c in cs])
        hi = np.array([2.0 * _frustum(c)[1] for c in cs])
        return np.exp(rng.uniform(np.log(lo), np.log(hi)))

    za, zb = draw(ci), draw(cj)
    if mode == "triangulate":
        _, _, ta, tb = triangulate_many(oi, di, oj, dj)
        ok = (ta > 1e-6) & (tb > 1e-6)
        za = np.where(ok, ta, za)
        zb = np.where(ok, tb, zb)
    elif mode != "random":
        raise ValueError(f"unknown init mode {mode!r}")

    # interleave: primitive 2k on ray 2k (view i), 2k + 1 on ray 2k + 1 (view j)
    rays_o = np.empty((2 * n, 3))
    rays_d = np.empty((2 * n, 3))
    rays_o[0::2], rays_o[1::2] = oi, oj
    rays_d[0::2], rays_d[1::2] = di, dj
    z = np.empty(2 * n)
    z[0::2], z[1::2] = za, zb
    pos = rays_o + z[:, None] * rays_d

    k = num_coeffs(max_sh_degree)
    sh = np.zeros((2 * n, k, 3))
    if images is not None:
        for (vi, vj), idx in matches.index.items():
            if vi in images:
                sh[2 * idx, 0] = rgb_to_dc(sample_bilinear(images[vi], matches.p_i[idx]))
            if vj in images:
                sh[2 * idx + 1, 0] = rgb_to_dc(sample_bilinear(images[vj], matches.p_j[idx]))

    if len(pos) > 1:
        d, _ = cKDTree(pos).query(pos, k=2)
        nn = float(np.mean(d[:, 1]))
    else:
        nn = 0.01
    nn = max(nn, 1e-7)

    model = HybridModel(
        kind=np.full(2 * n, RAY_BOUND, dtype=np.int8),
        xyz=np.zeros((2 * n, 3)),
        ray_index=np.arange(2 * n, dtype=np.int64),
        z_raw=softplus_inv(z),
        log_scale=np.full((2 * n, 3), np.log(nn)),
        quat=np.tile([1.0, 0.0, 0.0, 0.0], (2 * n, 1)),
        opacity_logit=np.full(2 * n, float(logit(init_opacity))),
        sh=sh,
        rays_o=rays_o,
        rays_d=rays_d,
        pair_table=np.stack([np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2), np.arange(n)], axis=1),
        max_sh_degree=max_sh_degree,
    )
    return model


def scene_extent(cameras) -> float:
    """Radius of the camera centers around their centroid, padded by 10%."""
    c = np.array([cam.center for cam in cameras])
    r = float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))) if len(c) else 0.0
    return 1.1 * (r if r > 0 else 1.0)


# --- cache -----------------------------------------------------------------------


@dataclass
class CacheState:
    """Best visited z per ray-bound primitive (per-primitive mode) or a whole-model snapshot."""

    best_z_raw: np.ndarray
    best_loss: np.ndarray

    @classmethod
    def create(cls, model: HybridModel) -> "CacheState":
        nr = model.num_ray_bound
        return cls(model.z_raw[:nr].copy(), np.full(nr, np.inf))

    def update(self, model: HybridModel, per_pair: np.ndarray, total_gp: float, mode: str):
        if mode == "snapshot":
            if len(self.best_loss) and total_gp < self.best_loss[0]:
                self.best_loss[:] = total_gp
                self.best_z_raw[:] = model.z_raw[: len(self.best_z_raw)]
            return
        pt = model.pair_table
        ok = np.isfinite(per_pair)
        for col in (0, 1):
            prim = pt[ok, col]
            loss = per_pair[ok]
            better = loss < self.best_loss[prim]
            self.best_loss[prim[better]] = loss[better]
            self.best_z_raw[prim[better]] = model.z_raw[prim[better]]

    def restore(self, model: HybridModel) -> np.ndarray:
        """Write cached z back; primitives never scored keep their current z."""
        seen = np.isfinite(self.best_loss)
        rows = np.flatnonzero(seen)
        model.z_raw[rows] = self.best_z_raw[rows]
        return rows


# --- densification -------------------------------------------------------------


@dataclass
class GradStats:
    accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, view_grad: np.ndarray, hits: np.ndarray):
        seen = hits > 0
        self.accum[seen] += view_grad[seen]
        self.denom[seen] += 1


def densify_and_prune(model: HybridModel, stats: GradStats, config: TrainConfig, extent: float,
                      rng, opt: Adam | None = None) -> HybridModel:
    """Clone/split free primitives with large view-space gradients and prune transparent ones.

    Ray-bound primitives are never pruned or split; one over the threshold
    adds a free copy at its current position. New rows are appended to
    ``model`` in place; the returned model is the pruned result.
    """
    n = len(model)
    mean_grad = np.where(stats.denom > 0, stats.accum / np.maximum(stats.denom, 1), 0.0)
    hot = (mean_grad >= config.grad_threshold) & model.active
    big = model.scales().max(axis=1) > config.percent_dense * extent
    free = model.kind == FREE
    clone = hot & (~big | ~free)
    split = hot & big & free

    pos = model.positions()
    new = {"xyz": [pos[clone]], "log_scale": [model.log_scale[clone]], "quat": [model.quat[clone]],
           "opacity_logit": [model.opacity_logit[clone]], "sh": [model.sh[clone]]}
    if split.any():
        s = model.scales()[split]
        R = quat_to_rotation_batch(model.quat[split])
        for _ in range(2):
            eps = rng.normal(size=s.shape) * s
            new["xyz"].append(np.einsum("nij,nj->ni", R, eps) + pos[split])
            new["log_scale"].append(np.log(s / config.split_factor))
            new["quat"].append(model.quat[split])
            new["opacity_logit"].append(model.opacity_logit[split])
            new["sh"].append(model.sh[split])
    added = {k: np.concatenate(v) for k, v in new.items()}
    n_added = len(added["xyz"])
    model.append_free(**added)
    if opt is not None:
        opt.add_rows(n_added)

    remove = np.zeros(len(model), dtype=bool)
    remove[:n] = split
    remove &= model.kind == FREE
    remove |= (model.kind == FREE) & (model.opacities() < config.prune_opacity)
    if remove.any():
        keep = np.flatnonzero(~remove)
        model = model.subset(keep)
        if opt is not None:
            opt.keep_rows(keep)
    return model


# --- training loop ----------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SCG_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class StepResult:
    report: LossReport
    z_lr: float
    active_pairs: int


class Trainer:
    """Holds the model, optimizer and schedule state; ``step`` advances one iteration."""

    def __init__(self, cameras, images: dict, matches: MatchSet, config: TrainConfig,
                 model: HybridModel | None = None, train_ids=None):
        self.config = config
        self.cameras = list(cameras)
        self.train_ids = list(train_ids) if train_ids is not None else [c.id for c in self.cameras]
        self.train_cams = [c for c in self.cameras if c.id in self.train_ids]
        self.images = images
        self.matches = matches
        self.rng = np.random.default_rng(config.seed)
        if model is None:
            model = init_hybrid(matches, self.cameras, images, self.rng, config.init, config.init_opacity,
                                config.max_sh_degree)
        self.model = model
        self.opt = Adam(model)
        self.cache = CacheState.create(model)
        self.stats = GradStats.zeros(len(model))
        self.extent = scene_extent(self.train_cams)
        self.iteration = 0
        self.n_raybound = model.num_ray_bound
        self._pool = ThreadPoolExecutor(_threads()) if _threads() > 1 else None

    # -- helpers

    def _lrs(self, it: int) -> dict:
        c = self.config
        sh_lr = np.full((self.model.sh.shape[1], 1), c.lr.sh_rest)
        sh_lr[0] = c.lr.sh_dc
        return {
            "xyz": c.xyz_lr(it, self.extent),
            "z_raw": c.z_lr(it),
            "log_scale": c.lr.log_scale,
            "quat": c.lr.quat,
            "opacity_logit": c.lr.opacity_logit,
            "sh": sh_lr,
        }

    def _render_view(self, cam: Camera):
        opts = RenderOptions(background=self.config.background, retain_for_backward=True)
        return render(self.model, cam, opts)

    def _cache_and_filter(self, it: int):
        """Cache bookkeeping before the update; reset and filter at the window's end."""
        c = self.config
        if not c.structure_on:
            return
        if it == c.cache_window:
            rows = self.cache.restore(self.model)
            self.opt.reset("z_raw", rows)
        if it >= c.cache_window and (it - c.cache_window) % c.filter_interval == 0:
            gp = gaussian_position_loss(self.model, self.cameras, self.matches, c.norm)
            filter_pairs(self.model, gp.per_pair, c.weights.eta)

    def step(self) -> StepResult:
        c = self.config
        it = self.iteration
        model = self.model
        if it > 0 and c.sh_interval > 0 and it % c.sh_interval == 0:
            model.sh_degree = min(model.sh_degree + 1, model.max_sh_degree)
        self._cache_and_filter(it)

        beta, delta = c.weights.at(it)
        grads = GradientBuffer.zeros_like(model)
        gp = gaussian_position_loss(model, self.cameras, self.matches, c.norm)
        if c.structure_on and it < c.cache_window:
            self.cache.update(model, gp.per_pair, gp.value, c.cache_mode)
        photo = None
        rg = None
        if c.photometric:
            cams = self.train_cams
            outs = list(self._pool.map(self._render_view, cams)) if self._pool else [self._render_view(cam) for cam in cams]
            V = len(cams)
            p_tot = l1_tot = s_tot = 0.0
            d_colors = []
            for cam, out in zip(cams, outs):
                p, l1, st, g = photometric_loss(out.color, self.images[cam.id], c.weights.lam, with_grad=True)
                p_tot += p / V
                l1_tot += l1 / V
                s_tot += st / V
                d_colors.append(g / V)
            photo = (p_tot, l1_tot, s_tot)
            d_depths = [None] * V
            d_alphas = [None] * V
            if delta > 0:
                act = np.zeros(len(self.matches), dtype=bool)
                pa = pair_active(model)
                act[model.pair_table[pa, 2]] = True
                rg = rendering_geometry_loss_multi({cam.id: o.depth for cam, o in zip(cams, outs)},
                                                   {cam.id: o.alpha for cam, o in zip(cams, outs)},
                                                   cams, self.matches, act, c.normalize_depth, c.norm)
                d_depths = [delta * rg.d_depth[cam.id] for cam in cams]
                d_alphas = [delta * rg.d_alpha[cam.id] for cam in cams]

            def back(k):
                return render_backward(model, cams[k], outs[k], d_colors[k], d_depths[k], d_alphas[k])

            bufs = list(self._pool.map(back, range(V))) if self._pool else [back(k) for k in range(V)]
            for b in bufs:  # fixed reduction order
                grads += b
                # per-view statistic on the un-averaged photometric loss
                self.stats.add(b.view_grad * V, b.hits)
        report = total_loss(it, c.weights, photo, gp, rg)
        if not np.isfinite(report.total):
            raise NonFiniteLoss(f"non-finite loss at iteration {it}: {report}")
        if beta > 0:
            grads.z_raw += beta * gp.grad_z_raw

        lrs = self._lrs(it)
        self.opt.step(model, grads.params(), lrs, frozen=~model.active)
        model.xyz[model.kind == RAY_BOUND] = 0.0

        if (c.photometric and it > c.densify_from and it % c.densify_interval == 0
                and (c.densify_until is None or it < c.densify_until) and it < c.iterations - 1):
            self.model = densify_and_prune(model, self.stats, c, self.extent, self.rng, self.opt)
            self.stats = GradStats.zeros(len(self.model))
        self.iteration += 1
        if self.iteration == c.iterations and c.iterations == c.cache_window and c.structure_on:
            self._cache_and_filter(self.iteration)
        return StepResult(report, lrs["z_raw"], int(pair_active(self.model).sum()))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _dump_nonfinite(out_dir: Path, trainer: Trainer, exc: Exception):
    m = trainer.model
    info = {"iteration": trainer.iteration, "error": str(exc)}
    for k, v in m.params().items():
        info[k] = {"finite": bool(np.all(np.isfinite(v))), "min": float(np.nanmin(v)) if v.size else 0.0,
                   "max": float(np.nanmax(v)) if v.size else 0.0}
    (out_dir / "nonfinite_dump.json").write_text(json.dumps(info, indent=1))


def train(cameras, images: dict, matches: MatchSet, config: TrainConfig, out_dir=None, train_ids=None,
          model: HybridModel | None = None, callback=None) -> tuple[HybridModel, list[dict]]:
    """Run the full schedule. Writes config, CSV log and checkpoints when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snap = {"version": __version__, "config": config.to_dict()}
        (out / "config.json").write_text(json.dumps(snap, indent=1, sort_keys=True))
    trainer = Trainer(cameras, images, matches, config, model, train_ids)
    rows = []
    fh = None
    writer = None
    if out is not None:
        fh = open(out / "log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        while trainer.iteration < config.iterations:
            it = trainer.iteration
            try:
                res = trainer.step()
            except NonFiniteLoss as exc:
                if out is not None:
                    _dump_nonfinite(out, trainer, exc)
                raise
            r = res.report
            row = {"iter": it, "total": r.total, "photo": r.photo, "l1": r.l1, "ssim_term": r.ssim_term,
                   "gp": r.gp, "rg": r.rg, "beta": r.beta, "delta": r.delta, "z_lr": res.z_lr,
                   "active_pairs": res.active_pairs, "n_raybound": trainer.model.num_ray_bound,
                   "n_free": trainer.model.num_free}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_COLUMNS])
            if callback is not None:
                callback(trainer, row)
            done = trainer.iteration
            if out is not None and config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
                trainer.model.save(out / f"ckpt_{done:05d}.scgs")
    finally:
        trainer.close()
        if fh is not None:
            fh.close()
    if out is not None:
        trainer.model.save(out / "model.scgs")
    return trainer.model, rows
