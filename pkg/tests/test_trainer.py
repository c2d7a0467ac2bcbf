import dataclasses
import json

import numpy as np
import pytest

from raysplat.errors import EmptyMatchSet, NonFiniteLoss
from raysplat.geometry import ray_from_pixel
from raysplat.losses import LossWeights, gaussian_position_loss
from raysplat.matching import MatchSet, synth_matches
from raysplat.model import FREE, RAY_BOUND, checkpoint_bytes, logit
from raysplat.rasterizer import GradientBuffer
from raysplat.scene import SceneParams, make_plane_scene, scene_matches, tilted_plane
from raysplat.sh import eval_sh
from raysplat.trainer import (
    Adam,
    GradStats,
    TrainConfig,
    Trainer,
    densify_and_prune,
    init_hybrid,
    train,
)

from conftest import simple_camera


def stereo(size=101, depth=5.0):
    c = (size - 1) / 2
    ci = dataclasses.replace(simple_camera(c=c, t=(-0.5, 0, 0), size=size, id="a"), near=1.0, far=10.0)
    cj = dataclasses.replace(simple_camera(c=c, t=(0.5, 0, 0), size=size, id="b"), near=1.0, far=10.0)
    return ci, cj, np.full((size, size), depth)


def collinearity(model):
    rb = model.kind == RAY_BOUND
    pos = model.positions()[rb]
    o = model.rays_o[model.ray_index[rb]]
    d = model.rays_d[model.ray_index[rb]]
    return np.abs(np.cross(pos - o, d)).max() if rb.any() else 0.0


@pytest.fixture(scope="module")
def tiny_scene():
    sc = make_plane_scene(SceneParams(planes=[tilted_plane(30.0)], num_views=2, width=16, height=16, focal=15,
                                      spread_deg=20, seed=0))
    ms = scene_matches(sc, 20, noise_px=0.5, seed=0)
    return sc, ms


# --- init -------------------------------------------------------------------------


def test_init_single_pair():
    ci, cj, _ = stereo()
    ms = MatchSet(["a"], ["b"], [[60.0, 50.0]], [[40.0, 50.0]], [1.0])
    m = init_hybrid(ms, [ci, cj], rng=0)
    assert len(m) == 2 and len(m.rays_o) == 2
    np.testing.assert_array_equal(m.pair_table, [[0, 1, 0]])
    ra, rb = ray_from_pixel(ci, ms.p_i[0]), ray_from_pixel(cj, ms.p_j[0])
    np.testing.assert_allclose(m.rays_o[0], ra.origin)
    np.testing.assert_allclose(m.rays_d[1], rb.direction / np.linalg.norm(rb.direction))
    np.testing.assert_allclose(m.opacities(), 0.1)


def test_init_many_pairs_on_rays_and_in_range():
    ci, cj, d = stereo()
    ms = synth_matches(d, ci, cj, 200, rng=0)
    m = init_hybrid(ms, [ci, cj], rng=1)
    assert len(m) == 400 and m.num_ray_bound == 400
    assert collinearity(m) < 1e-9
    z = m.z()
    assert z.min() >= 0.2 * 1.0 and z.max() <= 2 * 10.0
    # log-uniform: the median sits near the geometric mean of the range
    assert abs(np.log(np.median(z)) - np.log(np.sqrt(0.2 * 20))) < 0.3
    np.testing.assert_allclose(m.scales(), m.scales()[0, 0])


def test_init_dc_from_pixel_color():
    ci, cj, d = stereo(size=21)
    img = np.zeros((21, 21, 3))
    img[..., 0] = 0.8
    img[..., 2] = 0.3
    ms = synth_matches(d, ci, cj, 5, rng=0)
    m = init_hybrid(ms, [ci, cj], {"a": img, "b": img}, rng=0)
    rgb = eval_sh(m.sh[0, :1], np.array([0, 0, 1.0]), 0)
    np.testing.assert_allclose(rgb, [0.8, 0.0, 0.3], atol=1e-12)


def test_init_triangulated_zero_loss():
    ci, cj, d = stereo()
    ms = synth_matches(d, ci, cj, 50, rng=0, gt_depth_j=d)
    m = init_hybrid(ms, [ci, cj], rng=0, mode="triangulate")
    assert gaussian_position_loss(m, [ci, cj], ms).value < 1e-6


def test_init_empty():
    ci, cj, _ = stereo()
    with pytest.raises(EmptyMatchSet):
        init_hybrid(MatchSet(), [ci, cj])


# --- config and schedule ------------------------------------------------------------


def test_z_lr_endpoints():
    c = TrainConfig()
    assert c.z_lr(0) == pytest.approx(0.1, rel=1e-12)
    assert c.z_lr(c.iterations - 1) == pytest.approx(1.6e-6, rel=1e-12)
    mid = c.z_lr((c.iterations - 1) // 2)
    assert mid == pytest.approx(np.sqrt(0.1 * 1.6e-6), rel=0.01)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=500, cache_window=1000)
    with pytest.raises(ValueError):
        TrainConfig(z_lr_end=0.0)
    d = TrainConfig(seed=7).to_dict()
    assert TrainConfig.from_dict(json.loads(json.dumps(d))).to_dict() == d


# --- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    ci, cj, d = stereo()
    m = init_hybrid(synth_matches(d, ci, cj, 4, rng=0), [ci, cj], rng=0)
    before = {k: v.copy() for k, v in m.params().items()}
    opt = Adam(m)
    g = GradientBuffer.zeros_like(m).params()
    opt.step(m, g, {k: 0.1 for k in g})
    for k, v in m.params().items():
        np.testing.assert_array_equal(v, before[k])
    assert opt.t == 1


def test_adam_first_step_is_lr_sign():
    ci, cj, d = stereo()
    m = init_hybrid(synth_matches(d, ci, cj, 4, rng=0), [ci, cj], rng=0)
    z0 = m.z_raw.copy()
    opt = Adam(m)
    g = GradientBuffer.zeros_like(m).params()
    g["z_raw"] = np.linspace(-2, 2, len(m)) + 0.01
    frozen = np.zeros(len(m), dtype=bool)
    frozen[0] = True
    opt.step(m, g, {k: 0.05 for k in g}, frozen)
    np.testing.assert_allclose(m.z_raw[1:] - z0[1:], -0.05 * np.sign(g["z_raw"][1:]), rtol=1e-9)
    assert m.z_raw[0] == z0[0]


# --- cache ----------------------------------------------------------------------------


def structure_run(iters=60, window=30, noise=0.0, outliers=0.0, seed=0):
    ci, cj, d = stereo()
    ms = synth_matches(d, ci, cj, 40, noise_px=noise, outlier_rate=outliers, rng=seed, gt_depth_j=d)
    cfg = TrainConfig(iterations=iters, cache_window=window, photometric=False, seed=seed)
    return Trainer([ci, cj], {}, ms, cfg), ms


def test_cache_best_loss_monotone_and_restored():
    tr, ms = structure_run()
    history = []
    zs = []
    losses = []
    while tr.iteration < 30:
        pp = gaussian_position_loss(tr.model, tr.cameras, ms).per_pair
        zs.append(tr.model.z_raw.copy())
        losses.append(pp)
        tr.step()
        history.append(tr.cache.best_loss.copy())
    h = np.array(history)
    assert np.all(np.diff(h, axis=0) <= 0)
    # oracle: the cached z of primitive a is the visited z with its pair's smallest loss
    L = np.array(losses)
    Z = np.array(zs)
    best_it = np.argmin(L, axis=0)
    a = tr.model.pair_table[:, 0]
    tr.step()  # iteration 30 restores before updating
    expect = Z[best_it, a]
    np.testing.assert_array_equal(tr.cache.best_z_raw[a], expect)


def test_cache_reset_zeroes_moments_and_loss_trend():
    tr, ms = structure_run()
    gp0 = gaussian_position_loss(tr.model, tr.cameras, ms).value
    while tr.iteration < 30:
        tr.step()
    tr._cache_and_filter(30)
    np.testing.assert_array_equal(tr.opt.m["z_raw"][: tr.model.num_ray_bound], 0.0)
    assert gaussian_position_loss(tr.model, tr.cameras, ms).value <= gp0


def test_filter_runs_at_cache_window():
    tr, ms = structure_run(iters=120, window=100, noise=0.0, outliers=0.2, seed=3)
    while tr.iteration < 100:
        tr.step()
    assert tr.model.active.all()
    tr.step()
    assert not tr.model.active.all()


def test_collinearity_after_steps():
    tr, _ = structure_run(iters=20, window=10)
    for _ in range(20):
        tr.step()
        assert collinearity(tr.model) < 1e-9


# --- densification ---------------------------------------------------------------------


def free_model(n_free=3, scale=0.01):
    ci, cj, d = stereo()
    m = init_hybrid(synth_matches(d, ci, cj, 1, rng=0), [ci, cj], rng=0)
    m.append_free(np.arange(3 * n_free, dtype=float).reshape(n_free, 3), np.full((n_free, 3), np.log(scale)),
                  np.tile([1.0, 0, 0, 0], (n_free, 1)), np.zeros(n_free), np.zeros((n_free, 16, 3)))
    return m


def test_densify_nothing_hot_only_prunes():
    m = free_model()
    m.opacity_logit[3] = logit(0.001)
    m.opacity_logit[0] = logit(0.001)  # transparent ray-bound primitives are kept
    out = densify_and_prune(m, GradStats.zeros(len(m)), TrainConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == len(m) - 1 and out.num_ray_bound == 2


def test_densify_split_large_free():
    m = free_model(scale=0.5)
    st = GradStats.zeros(len(m))
    st.accum[2], st.denom[2] = 1.0, 1.0
    n, parent = len(m), m.positions()[2].copy()
    out = densify_and_prune(m, st, TrainConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == n + 1
    np.testing.assert_allclose(out.scales()[-2:], 0.5 / 1.6)
    assert not np.any(np.all(np.isclose(out.positions(), parent), axis=1))


def test_densify_clone_small_free():
    m = free_model(scale=0.001)
    st = GradStats.zeros(len(m))
    st.accum[3], st.denom[3] = 1.0, 1.0
    n, parent = len(m), m.positions()[3].copy()
    out = densify_and_prune(m, st, TrainConfig(), 1.0, np.random.default_rng(0))
    assert len(out) == n + 1
    np.testing.assert_array_equal(out.positions()[-1], parent)


def test_densify_ray_bound_spawns_free_clone():
    m = free_model(scale=0.5)
    m.log_scale[0] = np.log(0.5)
    st = GradStats.zeros(len(m))
    st.accum[0], st.denom[0] = 1.0, 1.0
    z0, n_free, parent = m.z_raw[0], m.num_free, m.positions()[0].copy()
    out = densify_and_prune(m, st, TrainConfig(), 1.0, np.random.default_rng(0))
    assert out.num_ray_bound == 2 and out.z_raw[0] == z0
    assert out.num_free == n_free + 1
    assert out.kind[-1] == FREE
    np.testing.assert_allclose(out.positions()[-1], parent)


# --- full loop ------------------------------------------------------------------------------


def small_config(**kw):
    base = dict(iterations=40, cache_window=20, densify_from=10, densify_interval=10, sh_interval=15,
                checkpoint_every=20, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_train_outputs_and_invariants(tmp_path, tiny_scene):
    sc, ms = tiny_scene
    imgs = dict(zip(sc.ids, sc.images))
    model, rows = train(sc.cameras, imgs, ms, small_config(), tmp_path)
    snap = json.loads((tmp_path / "config.json").read_text())
    assert snap["config"]["seed"] == 5 and "version" in snap
    assert (tmp_path / "ckpt_00020.scgs").exists() and (tmp_path / "model.scgs").exists()
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 41
    assert {r["n_raybound"] for r in rows} == {2 * len(ms)}
    assert [r["delta"] for r in rows[:20]] == [0.0] * 20
    assert all(r["beta"] == 1.0 for r in rows)
    assert model.sh_degree == 2
    assert collinearity(model) < 1e-9


def test_train_deterministic(tmp_path, tiny_scene):
    sc, ms = tiny_scene
    imgs = dict(zip(sc.ids, sc.images))
    a, _ = train(sc.cameras, imgs, ms, small_config())
    b, _ = train(sc.cameras, imgs, ms, small_config())
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_nonfinite_loss_dumps(tmp_path, tiny_scene):
    sc, ms = tiny_scene
    imgs = dict(zip(sc.ids, sc.images))
    model = init_hybrid(ms, sc.cameras, imgs, rng=0)
    model.sh[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train(sc.cameras, imgs, ms, small_config(), tmp_path, model=model)
    info = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert info["iteration"] == 0 and not info["sh"]["finite"]


def test_photometric_only_skips_cache(tiny_scene):
    sc, ms = tiny_scene
    imgs = dict(zip(sc.ids, sc.images))
    tr = Trainer(sc.cameras, imgs, ms, small_config(weights=LossWeights(beta=0.0, delta=0.0)))
    z = []
    for _ in range(25):
        tr.step()
        z.append(tr.model.z_raw[: tr.n_raybound].copy())
    assert np.all(np.isinf(tr.cache.best_loss))
    assert tr.model.active.all()
