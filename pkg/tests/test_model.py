import numpy as np
import pytest

from raysplat import sh as shlib
from raysplat.errors import ParseError, SingularCovariance, ZeroQuaternion, NonPositiveDepth
from raysplat.geometry import Ray
from raysplat.model import (
    FREE,
    RAY_BOUND,
    GaussianPrimitive,
    HybridModel,
    checkpoint_bytes,
    checkpoint_from_bytes,
    covariance_3d,
    gaussian_weight_2d,
    project_covariance,
    quat_rotation_backward,
    quat_to_rotation,
    quat_to_rotation_batch,
    softplus,
    softplus_inv,
)

from conftest import random_camera, simple_camera


def free_prim(xyz, sh=None, **kw):
    return GaussianPrimitive(FREE, np.zeros(3), np.array([1.0, 0, 0, 0]), 0.0,
                             np.zeros((16, 3)) if sh is None else sh, xyz=np.asarray(xyz, dtype=float), **kw)


def ray_prim(ray_index, z):
    return GaussianPrimitive(RAY_BOUND, np.zeros(3), np.array([1.0, 0, 0, 0]), 0.0, np.zeros((16, 3)),
                             ray_index=ray_index, z_raw=float(softplus_inv(z)))


def random_model(rng, n_free=4, n_ray=4):
    prims, rays = [], []
    for k in range(n_ray):
        rays.append(Ray(rng.normal(size=3), rng.normal(size=3)))
        prims.append(ray_prim(k, rng.uniform(0.5, 5)))
    for _ in range(n_free):
        prims.append(free_prim(rng.normal(size=3)))
    pairs = [(2 * k, 2 * k + 1, k) for k in range(n_ray // 2)]
    m = HybridModel.from_primitives(prims, rays, pairs)
    m.log_scale[:] = rng.normal(size=m.log_scale.shape) * 0.3
    m.quat[:] = rng.normal(size=m.quat.shape)
    m.opacity_logit[:] = rng.normal(size=len(m))
    m.sh[:] = rng.normal(size=m.sh.shape) * 0.2
    m.sh_degree = 2
    return m


def test_position_of_free_and_ray_bound():
    m = HybridModel.from_primitives([free_prim([1, 2, 3]), ray_prim(0, 4.0)],
                                    [Ray(np.zeros(3), np.array([0, 0, 1.0]))])
    # ray-bound primitives are stored first
    np.testing.assert_allclose(m.position_of(0), [0, 0, 4])
    np.testing.assert_allclose(m.position_of(1), [1, 2, 3])


def test_ray_bound_position_norm_and_collinearity(rng):
    ray = Ray(rng.normal(size=3), rng.normal(size=3))
    m = HybridModel.from_primitives([ray_prim(0, 2.7)], [ray])
    pos = m.position_of(0)
    assert abs(np.linalg.norm(pos - ray.origin) - 2.7) < 1e-12
    assert np.linalg.norm(np.cross(pos - ray.origin, ray.direction)) < 1e-9


def test_quat_identity_and_z90():
    np.testing.assert_allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3))
    h = np.sqrt(0.5)
    Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    np.testing.assert_allclose(quat_to_rotation([h, 0, 0, h]), Rz, atol=1e-15)


def test_quat_double_cover_and_scale_invariance(rng):
    for _ in range(10):
        q = rng.normal(size=4)
        R = quat_to_rotation(q)
        np.testing.assert_allclose(quat_to_rotation(-q), R, atol=1e-14)
        np.testing.assert_allclose(quat_to_rotation(2 * q), R, atol=1e-14)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_quat_axis_angle_oracle(rng):
    # Rodrigues formula as an independent oracle
    for _ in range(10):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(-np.pi, np.pi)
        q = np.r_[np.cos(ang / 2), np.sin(ang / 2) * axis]
        Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(ang) * Kx + (1 - np.cos(ang)) * Kx @ Kx
        np.testing.assert_allclose(quat_to_rotation(q), R, atol=1e-12)


def test_zero_quaternion():
    with pytest.raises(ZeroQuaternion):
        quat_to_rotation([0, 0, 0, 0])


def test_quat_backward_fd(rng):
    q = rng.normal(size=(3, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    G = rng.normal(size=(3, 3, 3))
    g = quat_rotation_backward(q, G)
    h = 1e-6
    for c in range(4):
        dq = np.zeros(4)
        dq[c] = h
        fd = (np.sum(quat_to_rotation_batch(q + dq) * G, axis=(1, 2)) - np.sum(quat_to_rotation_batch(q - dq) * G, axis=(1, 2))) / (2 * h)
        np.testing.assert_allclose(g[:, c], fd, rtol=1e-6, atol=1e-8)


def test_covariance_examples():
    np.testing.assert_allclose(covariance_3d([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(covariance_3d([2, 3, 4], [1, 0, 0, 0]), np.diag([4, 9, 16]))
    h = np.sqrt(0.5)
    np.testing.assert_allclose(covariance_3d([2, 1, 1], [h, 0, 0, h]), np.diag([1, 4, 1]), atol=1e-12)


def test_covariance_spd(rng):
    for _ in range(50):
        C = covariance_3d(np.exp(rng.normal(size=3)), rng.normal(size=4))
        np.testing.assert_allclose(C, C.T, atol=1e-12)
        np.linalg.cholesky(C)


def test_project_covariance_floor_and_axis():
    cam = simple_camera(f=80.0)
    np.testing.assert_allclose(project_covariance(1e-12 * np.eye(3), cam, [0, 0, 2]), 0.3 * np.eye(2), atol=1e-9)
    z = 2.0
    np.testing.assert_allclose(project_covariance(np.eye(3), cam, [0, 0, z]), (80.0**2 / z**2 + 0.3) * np.eye(2))
    with pytest.raises(NonPositiveDepth):
        project_covariance(np.eye(3), cam, [0, 0, -1])


def test_project_covariance_matches_fd_jacobian(rng):
    # oracle: numerical Jacobian of the projection at mu, J_fd Sigma J_fd^T
    cam = random_camera(rng)
    mu = cam.R @ np.array([0.3, -0.2, 4.0]) + cam.t
    from raysplat.geometry import project_points
    Jfd = np.zeros((2, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = 1e-6
        Jfd[:, k] = (project_points(cam, mu + d)[0] - project_points(cam, mu - d)[0]) / 2e-6
    S = covariance_3d(np.exp(rng.normal(size=3)) * 0.1, rng.normal(size=4))
    np.testing.assert_allclose(project_covariance(S, cam, mu), Jfd @ S @ Jfd.T + 0.3 * np.eye(2), rtol=1e-5)


def test_project_covariance_eigen_floor(rng):
    for _ in range(20):
        cam = random_camera(rng)
        mu = cam.R @ np.r_[rng.normal(size=2), 3.0] + cam.t
        C = project_covariance(covariance_3d(np.exp(rng.normal(size=3)), rng.normal(size=4)), cam, mu)
        np.testing.assert_allclose(C, C.T, atol=1e-9)
        assert np.linalg.eigvalsh(C).min() >= 0.3 - 1e-9


def test_gaussian_weight():
    assert gaussian_weight_2d([1, 2], [1, 2], np.eye(2)) == 1.0
    assert gaussian_weight_2d([1, 0], [0, 0], np.eye(2)) == pytest.approx(np.exp(-0.5))
    assert gaussian_weight_2d([2, 0], [0, 0], np.diag([4.0, 1.0])) == pytest.approx(np.exp(-0.5))
    with pytest.raises(SingularCovariance):
        gaussian_weight_2d([0, 0], [0, 0], np.zeros((2, 2)))


def test_sh_degree0_and_zero_coeffs():
    c = np.array([[0.7, -0.2, 0.1]])
    np.testing.assert_allclose(shlib.eval_sh(c, np.array([0, 0, 1.0]), 0), 0.5 + 0.28209479 * c[0], atol=1e-8)
    np.testing.assert_allclose(shlib.eval_sh(np.zeros((16, 3)), np.array([0.6, 0.8, 0]), 3), [0.5, 0.5, 0.5])


def test_sh_degree1_parity(rng):
    sh = np.zeros((4, 3))
    sh[1:] = rng.normal(size=(3, 3))
    sh[0] = 10.0  # keep the color positive so the clamp stays inactive
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    lin = shlib.sh_basis(d, 1)[1:] @ sh[1:]
    np.testing.assert_allclose(shlib.eval_sh(sh, d, 1) - shlib.eval_sh(sh, -d, 1), 2 * lin, atol=1e-12)


def test_sh_higher_bands_zero_reduce_to_constant(rng):
    sh = np.zeros((16, 3))
    sh[0] = rng.normal(size=3)
    for deg in range(4):
        np.testing.assert_allclose(shlib.eval_sh(sh, np.array([0.0, 0.6, 0.8]), deg), np.maximum(0.5 + shlib.C0 * sh[0], 0))


def test_sh_basis_orthonormal():
    # quadrature over the sphere: Gauss-Legendre in cos(theta), uniform in phi
    xs, ws = np.polynomial.legendre.leggauss(24)
    phi = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    ct, ph = np.meshgrid(xs, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = (ws[:, None] * np.full(48, 2 * np.pi / 48)[None, :]).reshape(-1)
    B = shlib.sh_basis(dirs, 3)
    gram = (B * w[:, None]).T @ B
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-10)


def test_sh_jacobian_fd(rng):
    d = rng.normal(size=(5, 3))
    J = shlib.sh_basis_jacobian(d, 3)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (shlib.sh_basis(d + e, 3) - shlib.sh_basis(d - e, 3)) / (2 * h)
        np.testing.assert_allclose(J[..., k], fd, atol=1e-7)


def test_activations(rng):
    x = rng.normal(size=100) * 5
    np.testing.assert_allclose(softplus_inv(softplus(x)), x, atol=1e-9)
    m = random_model(rng)
    assert np.all(m.scales() > 0)
    assert np.all((m.opacities() > 0) & (m.opacities() < 1))
    assert np.all(m.z() > 0)


def test_model_ray_bound_first_and_validation(rng):
    m = HybridModel.from_primitives([free_prim([0, 0, 1]), ray_prim(0, 1.0), free_prim([1, 1, 1])],
                                    [Ray(np.zeros(3), np.array([0, 0, 1.0]))])
    assert list(m.kind) == [RAY_BOUND, FREE, FREE]
    with pytest.raises(Exception):
        HybridModel.from_primitives([ray_prim(5, 1.0)], [Ray(np.zeros(3), np.array([0, 0, 1.0]))])


def test_checkpoint_bit_exact_round_trip(rng, tmp_path):
    m = random_model(rng)
    m.active[1] = False
    buf = checkpoint_bytes(m)
    back = checkpoint_from_bytes(buf)
    assert checkpoint_bytes(back) == buf
    for k in ("kind", "ray_index", "z_raw", "log_scale", "quat", "opacity_logit", "sh", "rays_o", "rays_d", "pair_table", "active"):
        np.testing.assert_array_equal(getattr(back, k), getattr(m, k))
    np.testing.assert_array_equal(back.positions(), m.positions())
    assert back.sh_degree == m.sh_degree
    m.save(tmp_path / "m.scgs")
    assert (tmp_path / "m.scgs").read_bytes()[:4] == b"SCGS"
    assert checkpoint_bytes(HybridModel.load(tmp_path / "m.scgs")) == buf


def test_checkpoint_corruption(rng):
    buf = checkpoint_bytes(random_model(rng))
    with pytest.raises(ParseError):
        checkpoint_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ParseError):
        checkpoint_from_bytes(buf[:-5])
    with pytest.raises(ParseError):
        checkpoint_from_bytes(buf + b"\0")


def test_empty_model_round_trip():
    m = HybridModel.empty()
    assert len(checkpoint_from_bytes(checkpoint_bytes(m))) == 0
