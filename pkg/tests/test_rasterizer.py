import numpy as np
import pytest

from raysplat import sh as shlib
from raysplat.errors import DataError, MissingContributorRecord
from raysplat.model import FREE, RAY_BOUND, HybridModel
from raysplat.rasterizer import GradientBuffer, RenderOptions, render, render_backward, render_primitive_distance

from conftest import facing_camera
from oracles import ORACLE_OPTS, brute_force, make_model, random_scene

def test_empty_model_renders_background():
    cam = facing_camera([0, 0, -4.0])
    out = render(HybridModel.empty(), cam, RenderOptions(background=(0.2, 0.3, 0.4)))
    np.testing.assert_allclose(out.color, np.broadcast_to([0.2, 0.3, 0.4], out.color.shape))
    assert np.all(out.alpha == 0) and np.all(out.depth == 0)


def test_single_clamped_primitive_hand_oracle():
    cam = facing_camera([0, 0, -2.0], target=(0, 0, 0), size=33, f=33)
    m = make_model([[0, 0, 0]], np.log(np.full((1, 3), 0.05)), [0.999])
    bg = (0.2, 0.4, 0.6)
    out = render(m, cam, RenderOptions(background=bg))
    c = out.color[16, 16]
    np.testing.assert_allclose(c, 0.99 * 0.5 + 0.01 * np.array(bg), atol=1e-12)
    assert out.depth[16, 16] == pytest.approx(0.99 * 2.0)
    assert out.alpha[16, 16] == pytest.approx(0.99)


def test_two_primitives_hand_oracle():
    cam = facing_camera([0, 0, -2.0], size=33, f=33)
    red = np.zeros((16, 3))
    red[0] = shlib.rgb_to_dc(np.array([1.0, 0, 0]))
    blue = np.zeros((16, 3))
    blue[0] = shlib.rgb_to_dc(np.array([0, 0, 1.0]))
    w = 0.7
    m = make_model([[0, 0, 0], [0, 0, 1.0]], np.log(np.full((2, 3), 0.05)), [0.5, w], np.stack([red, blue]))
    bg = np.array([0.1, 0.2, 0.3])
    out = render(m, cam, RenderOptions(background=tuple(bg)))
    expect = 0.5 * np.array([1, 0, 0]) + 0.5 * w * np.array([0, 0, 1]) + (1 - 0.5 - 0.5 * w) * bg
    np.testing.assert_allclose(out.color[16, 16], expect, atol=1e-9)


def test_brute_force_equivalence():
    rng = np.random.default_rng(7)
    for _ in range(5):
        m, cam = random_scene(rng, ray_bound=2)
        out = render(m, cam, RenderOptions(background=(0.3, 0.1, 0.2), **ORACLE_OPTS))
        c, d, a = brute_force(m, cam, (0.3, 0.1, 0.2))
        np.testing.assert_allclose(out.color, c, atol=1e-9)
        np.testing.assert_allclose(out.depth, d, atol=1e-9)
        np.testing.assert_allclose(out.alpha, a, atol=1e-9)


def test_culled_render_close_to_oracle():
    # culling and early termination only drop sub-threshold contributions
    rng = np.random.default_rng(8)
    m, cam = random_scene(rng, n=8)
    full = render(m, cam, RenderOptions(**ORACLE_OPTS))
    fast = render(m, cam)
    assert np.abs(full.color - fast.color).max() < 0.05


def test_order_invariance():
    rng = np.random.default_rng(9)
    m, cam = random_scene(rng, n=9)
    perm = rng.permutation(len(m))
    p = m.subset(perm)
    a = render(m, cam)
    b = render(p, cam)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_alpha_bounds():
    rng = np.random.default_rng(10)
    for _ in range(10):
        m, cam = random_scene(rng)
        m.opacity_logit[:] = 20.0
        out = render(m, cam)
        assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0


def test_inactive_primitives_do_not_render():
    rng = np.random.default_rng(11)
    m, cam = random_scene(rng, n=3)
    m.active[:] = False
    out = render(m, cam)
    assert np.all(out.alpha == 0)


def test_backward_requires_record():
    m, cam = random_scene(np.random.default_rng(0), n=2)
    out = render(m, cam)
    with pytest.raises(MissingContributorRecord):
        render_backward(m, cam, out, np.ones_like(out.color))


def test_backward_model_mismatch():
    m, cam = random_scene(np.random.default_rng(0), n=2)
    out = render(m, cam, RenderOptions(retain_for_backward=True))
    with pytest.raises(DataError):
        render_backward(m.subset(np.array([0])), cam, out, np.ones_like(out.color))


def test_zero_upstream_gives_zero_buffer():
    m, cam = random_scene(np.random.default_rng(1), n=5)
    out = render(m, cam, RenderOptions(retain_for_backward=True))
    buf = render_backward(m, cam, out, np.zeros_like(out.color), np.zeros_like(out.depth))
    for v in buf.params().values():
        assert np.all(v == 0)


def scalar_loss(model, cam, opts):
    out = render(model, cam, opts)
    return out.color.sum() + out.depth.sum()


def fd_check(model, cam, opts, field, idx, h=1e-5):
    p = getattr(model, field)
    old = p[idx]
    p[idx] = old + h
    lp = scalar_loss(model, cam, opts)
    p[idx] = old - h
    lm = scalar_loss(model, cam, opts)
    p[idx] = old
    return (lp - lm) / (2 * h)


def analytic(model, cam, opts):
    o = RenderOptions(**{**opts.__dict__, "retain_for_backward": True})
    out = render(model, cam, o)
    return render_backward(model, cam, out, np.ones_like(out.color), np.ones_like(out.depth))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m, cam = random_scene(rng, n=6, size=24, ray_bound=2)
    opts = RenderOptions(**ORACLE_OPTS)
    buf = analytic(m, cam, opts)
    for field in ("xyz", "z_raw", "log_scale", "quat", "opacity_logit", "sh"):
        g = getattr(buf, field)
        p = getattr(m, field)
        rows = np.flatnonzero(m.kind == (RAY_BOUND if field == "z_raw" else FREE)) if field in ("xyz", "z_raw") else range(len(m))
        for i in rows:
            cols = [()] if p.ndim == 1 else [(c,) for c in range(p.shape[1])] if p.ndim == 2 else [(k, c) for k in range(shlib.num_coeffs(m.sh_degree)) for c in range(3)]
            for c in cols[:6]:
                idx = (i, *c)
                fd = fd_check(m, cam, opts, field, idx)
                assert abs(fd - g[idx]) <= max(1e-4, 1e-3 * abs(fd)), (field, idx, fd, g[idx])


def test_ray_bound_dz_matches_depth_loss_fd():
    rng = np.random.default_rng(5)
    m, cam = random_scene(rng, n=3, size=24, ray_bound=1)
    opts = RenderOptions(**ORACLE_OPTS)
    target = np.full((24, 24), 1.5)

    def depth_loss(mm):
        return float(np.sum((render(mm, cam, opts).depth - target) ** 2))

    out = render(m, cam, RenderOptions(**{**opts.__dict__, "retain_for_backward": True}))
    buf = render_backward(m, cam, out, None, 2 * (out.depth - target))
    h = 1e-6
    m.z_raw[0] += h
    lp = depth_loss(m)
    m.z_raw[0] -= 2 * h
    lm = depth_loss(m)
    m.z_raw[0] += h
    fd = (lp - lm) / (2 * h)
    assert abs(buf.z_raw[0] - fd) <= 1e-3 * abs(fd)


def test_alpha_gradient_fd():
    rng = np.random.default_rng(6)
    m, cam = random_scene(rng, n=4, size=24)
    out = render(m, cam, RenderOptions(retain_for_backward=True))
    w = rng.normal(size=out.alpha.shape)
    buf = render_backward(m, cam, out, None, None, w)
    h = 1e-6
    for i in range(len(m)):
        m.opacity_logit[i] += h
        lp = np.sum(render(m, cam).alpha * w)
        m.opacity_logit[i] -= 2 * h
        lm = np.sum(render(m, cam).alpha * w)
        m.opacity_logit[i] += h
        fd = (lp - lm) / (2 * h)
        assert abs(fd - buf.opacity_logit[i]) <= max(1e-6, 1e-4 * abs(fd))


def test_view_gradient_statistic_recorded():
    m, cam = random_scene(np.random.default_rng(3), n=4)
    buf = analytic(m, cam, RenderOptions())
    assert np.all(buf.view_grad >= 0)
    assert buf.hits.sum() > 0


def test_gradient_buffer_accumulates():
    m, cam = random_scene(np.random.default_rng(4), n=3)
    a = analytic(m, cam, RenderOptions())
    total = GradientBuffer.zeros_like(m)
    total += a
    total += a
    np.testing.assert_allclose(total.sh, 2 * a.sh)


def test_primitive_distance_single():
    cam = facing_camera([0, 0, -3.0], size=33, f=33)
    m = make_model([[0, 0, 0]], np.log(np.full((1, 3), 0.05)), [0.01])
    assert render_primitive_distance(m, cam)[16, 16] == pytest.approx(3 * 0.99)
    assert render_primitive_distance(m, cam, clamp=False)[16, 16] == pytest.approx(3.0)
    assert np.all(render_primitive_distance(HybridModel.empty(), cam) == 0)


def test_primitive_distance_front_dominates():
    cam = facing_camera([0, 0, -2.0], size=33, f=33)
    m = make_model([[0, 0, 0], [0, 0, 3.0]], np.log(np.full((2, 3), 0.05)), [0.01, 0.01])
    assert render_primitive_distance(m, cam, clamp=False)[16, 16] < 2.02
    # with the clamp the back splat still receives the 1% residual transmittance
    v = render_primitive_distance(m, cam)[16, 16]
    assert v == pytest.approx(0.99 * 2 + 0.01 * 0.99 * 5)


def test_skewed_intrinsics_rejected():
    import dataclasses
    cam = facing_camera([0, 0, -2.0])
    K = cam.K.copy()
    K[0, 1] = 0.5
    skewed = dataclasses.replace(cam, K=K)
    with pytest.raises(DataError):
        render(make_model([[0, 0, 0]]), skewed)
