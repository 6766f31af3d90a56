import math

import numpy as np
import pytest
import scipy.special as sps
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation, Slerp

from admgs.errors import DegenerateGeometryError, InvalidArgumentError
from admgs.geom import (
    LOW_PASS,
    Camera,
    axis_angle_quat,
    covariance_from,
    project_gaussian,
    project_gaussians,
    quat_multiply,
    quat_to_rotmat,
    reflect,
    rotmat_to_quat,
    sh_basis,
    shortest_axis_normal,
    slerp,
)


def unit_vectors(n, seed=0):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def scipy_real_sh(dirs, degree):
    """Real SH from scipy's complex harmonics, Condon-Shortley phase kept."""
    theta = np.arccos(np.clip(dirs[:, 2], -1, 1))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    fn = getattr(sps, "sph_harm_y", None)

    def Y(l, m):
        return fn(l, m, theta, phi) if fn else sps.sph_harm(m, l, phi, theta)

    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            if m < 0:
                cols.append(math.sqrt(2) * Y(l, -m).imag)
            elif m == 0:
                cols.append(Y(l, 0).real)
            else:
                cols.append(math.sqrt(2) * Y(l, m).real)
    return np.stack(cols, axis=1)


unit3 = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v)).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))
quats = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 4).filter(lambda v: 0.1 < np.linalg.norm(v)).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))


class TestSphericalHarmonics:
    @pytest.mark.parametrize("degree", [0, 1, 2, 3, 4])
    def test_matches_scipy(self, degree):
        d = unit_vectors(200)
        np.testing.assert_allclose(sh_basis(d, degree), scipy_real_sh(d, degree), atol=1e-12)

    @pytest.mark.parametrize("degree,length", [(1, 4), (3, 16), (4, 25)])
    def test_lengths(self, degree, length):
        assert sh_basis(np.array([0.0, 0.0, 1.0]), degree).shape == (length,)

    def test_quadrature_orthonormal(self):
        # Gauss-Legendre in cos(theta) x uniform phi integrates degree <= 8 products exactly
        x, w = np.polynomial.legendre.leggauss(12)
        phi = np.arange(24) * 2 * np.pi / 24
        ct, ph = np.meshgrid(x, phi, indexing="ij")
        st_ = np.sqrt(1 - ct**2)
        d = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], -1).reshape(-1, 3)
        weights = (w[:, None] * np.full(24, 2 * np.pi / 24)[None, :]).reshape(-1)
        B = sh_basis(d, 4)
        G = (B * weights[:, None]).T @ B
        np.testing.assert_allclose(G, np.eye(25), atol=1e-12)

    def test_degree_one_first_entries_known(self):
        c1 = math.sqrt(3 / (4 * math.pi))
        np.testing.assert_allclose(sh_basis(np.array([0.0, 0.0, 1.0]), 1), [0.5 / math.sqrt(math.pi), 0, c1, 0])

    @pytest.mark.parametrize("degree", [-1, 5, 2.0])
    def test_bad_degree(self, degree):
        with pytest.raises(InvalidArgumentError):
            sh_basis(np.array([0.0, 0.0, 1.0]), degree)

    def test_non_unit_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sh_basis(np.array([0.0, 0.0, 1.1]), 2)

    def test_torch_input_keeps_tensor(self):
        out = sh_basis(torch.tensor([[0.0, 1.0, 0.0]]), 3)
        assert isinstance(out, torch.Tensor) and out.shape == (1, 16)

    @given(unit3)
    def test_parity(self, d):
        # Y_lm(-d) = (-1)^l Y_lm(d)
        b, bn = sh_basis(d, 4), sh_basis(-d, 4)
        sign = np.concatenate([np.full(2 * l + 1, (-1.0) ** l) for l in range(5)])
        np.testing.assert_allclose(bn, sign * b, atol=1e-12)


class TestReflect:
    def test_known(self):
        n = np.array([0.0, 0.0, 1.0])
        v = np.array([1.0, 0.0, 1.0]) / math.sqrt(2)
        np.testing.assert_allclose(reflect(n, v), [-1 / math.sqrt(2), 0, 1 / math.sqrt(2)], atol=1e-15)

    def test_head_on(self):
        n = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(reflect(n, n), n)

    @given(unit3, unit3)
    def test_properties(self, n, v):
        r = reflect(n, v)
        assert abs(np.linalg.norm(r) - 1) < 1e-9
        assert abs(np.dot(r, n) - np.dot(v, n)) < 1e-9
        np.testing.assert_allclose(reflect(n, r), v, atol=1e-9)

    def test_rejects_non_unit(self):
        with pytest.raises(InvalidArgumentError):
            reflect(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0]))


class TestQuaternions:
    @given(quats)
    def test_rotmat_matches_scipy(self, q):
        R = quat_to_rotmat(torch.tensor(q)).numpy()
        ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        np.testing.assert_allclose(R, ref, atol=1e-12)

    @given(quats)
    def test_round_trip(self, q):
        back = rotmat_to_quat(quat_to_rotmat(torch.tensor(q)).numpy())
        expected = q if q[0] >= 0 else -q
        # q and -q are the same rotation; w = 0 leaves the sign ambiguous
        assert np.allclose(back, expected, atol=1e-9) or (abs(q[0]) < 1e-9 and np.allclose(back, -expected, atol=1e-9))

    @given(quats, quats)
    def test_multiply_composes(self, a, b):
        ab = quat_multiply(torch.tensor(a), torch.tensor(b))
        np.testing.assert_allclose(quat_to_rotmat(ab).numpy(),
                                   quat_to_rotmat(torch.tensor(a)).numpy() @ quat_to_rotmat(torch.tensor(b)).numpy(),
                                   atol=1e-12)

    def test_axis_angle(self):
        q = axis_angle_quat([0, 0, 1], math.pi / 2)
        np.testing.assert_allclose(quat_to_rotmat(torch.tensor(q)).numpy() @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    @pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.9, 1.0])
    def test_slerp_matches_scipy(self, t):
        rots = Rotation.from_quat([[0, 0, 0, 1], [0.3, -0.2, 0.5, 0.7]])
        ref = Slerp([0, 1], rots)([t]).as_quat()[0]
        q0 = np.array([1.0, 0, 0, 0])
        q1 = np.array([0.7, 0.3, -0.2, 0.5]) / np.linalg.norm([0.7, 0.3, -0.2, 0.5])
        ours = slerp(q0, q1, t)
        ref = np.array([ref[3], ref[0], ref[1], ref[2]])
        assert np.allclose(ours, ref, atol=1e-12) or np.allclose(ours, -ref, atol=1e-12)

    def test_slerp_takes_short_arc(self):
        q0 = np.array([1.0, 0, 0, 0])
        q1 = -axis_angle_quat([1, 0, 0], 0.2)
        mid = slerp(q0, q1, 0.5)
        angle = 2 * math.acos(min(abs(mid[0]), 1.0))
        assert abs(angle - 0.1) < 1e-12


class TestCovariance:
    @given(st.tuples(*[st.floats(-3, 2)] * 3), quats)
    @settings(max_examples=60)
    def test_eigen_oracle(self, s, q):
        cov = covariance_from(np.array(s), q)
        np.testing.assert_array_equal(cov, cov.T)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * np.array(s))),
                                   rtol=1e-9, atol=1e-12)

    def test_axis_aligned(self):
        cov = covariance_from(np.log([1.0, 2.0, 3.0]), np.array([1.0, 0, 0, 0]))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]))

    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(InvalidArgumentError):
            covariance_from(np.zeros(3), np.array([2.0, 0, 0, 0]))


class TestShortestAxisNormal:
    def test_picks_smallest_and_faces_camera(self):
        q = np.array([1.0, 0, 0, 0])
        n = shortest_axis_normal(np.log([1.0, 1.0, 0.01]), q, np.zeros(3), np.array([0, 0, -5.0]))
        np.testing.assert_allclose(n, [0, 0, -1])
        n = shortest_axis_normal(np.log([1.0, 0.01, 1.0]), q, np.zeros(3), np.array([0, 5.0, 0]))
        np.testing.assert_allclose(n, [0, 1, 0])

    def test_tie_picks_lowest_index(self):
        n = shortest_axis_normal(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), np.array([3.0, 0, 0]))
        np.testing.assert_allclose(n, [1, 0, 0])

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            shortest_axis_normal(np.zeros(3), np.array([1.0, 0, 0, 0]), np.ones(3), np.ones(3))

    @given(st.tuples(*[st.floats(-3, 1)] * 3), quats, unit3)
    @settings(max_examples=60)
    def test_unit_and_facing(self, s, q, cam_dir):
        n = shortest_axis_normal(np.array(s), q, np.zeros(3), 4 * cam_dir)
        assert abs(np.linalg.norm(n) - 1) < 1e-9
        assert np.dot(n, cam_dir) >= -1e-12


class TestCamera:
    def test_look_at_center_and_axis(self):
        cam = Camera.look_at([1.0, -4.0, 2.0], [0.0, 0.0, 0.5], fx=50.0, width=32, height=24)
        np.testing.assert_allclose(cam.center, [1.0, -4.0, 2.0], atol=1e-12)
        p = cam.rotation @ np.array([0.0, 0.0, 0.5]) + cam.translation
        assert p[2] > 0 and abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidArgumentError):
            Camera(10, 10, 5, 5, 10, 10, np.eye(3) * 1.01, np.zeros(3))

    def test_dict_round_trip(self):
        cam = Camera.look_at([1.0, 2.0, 3.0], [0, 0, 0], fx=40.0, width=20, height=10)
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        assert back.width == 20 and back.fx == 40.0

    def test_ray_directions_through_principal_point(self):
        cam = Camera.look_at([0.0, -3.0, 0.0], [0, 0, 0], fx=10.0, width=5, height=5)
        rays = cam.ray_directions()
        np.testing.assert_allclose(rays[2, 2], [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0)


class TestProjection:
    cam = Camera(100.0, 90.0, 15.5, 11.5, 32, 24, np.eye(3), np.zeros(3))

    def test_pinhole_mean(self):
        s = project_gaussian([0.2, -0.1, 2.0], np.eye(3) * 1e-4, self.cam)
        np.testing.assert_allclose(s.mean, [15.5 + 10.0, 11.5 - 4.5])
        assert float(s.depth) == 2.0

    def test_culling(self):
        assert project_gaussian([0, 0, -1.0], np.eye(3), self.cam) is None
        assert project_gaussian([0, 0, 0.01], np.eye(3), self.cam) is None
        assert project_gaussian([0, 0, 0.0101], np.eye(3), self.cam) is not None

    def test_low_pass_added(self):
        s = project_gaussian([0, 0, 1.0], np.zeros((3, 3)), self.cam)
        np.testing.assert_allclose(s.cov2d, LOW_PASS * np.eye(2))

    def test_cov_matches_linearisation(self):
        # oracle: Jacobian of the pinhole map by torch autograd
        center = torch.tensor([0.3, 0.2, 3.0], dtype=torch.float64)
        cov = torch.tensor(covariance_from(np.log([0.2, 0.05, 0.1]), axis_angle_quat([1, 2, 3], 0.7)))
        R = torch.tensor(Rotation.from_euler("xyz", [0.1, -0.2, 0.3]).as_matrix())
        cam = Camera(80.0, 70.0, 16.0, 12.0, 32, 24, R.numpy(), np.array([0.1, 0.0, 0.5]))

        def pix(x):
            p = R @ x + torch.tensor(cam.translation)
            return torch.stack([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])

        J = torch.autograd.functional.jacobian(pix, center)
        expected = J @ cov @ J.T + LOW_PASS * torch.eye(2, dtype=torch.float64)
        proj = project_gaussians(center[None], cov[None], cam)
        np.testing.assert_allclose(proj.cov2d[0].numpy(), expected.numpy(), atol=1e-12)
        np.testing.assert_allclose(proj.means2d[0].numpy(), pix(center).numpy(), atol=1e-12)

    def test_projected_cov_is_spd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = rng.normal(size=4)
            cov = covariance_from(rng.uniform(-4, 0, 3), q / np.linalg.norm(q))
            s = project_gaussian(rng.uniform(-0.5, 0.5, 3) + [0, 0, 3], cov, self.cam)
            assert np.all(np.linalg.eigvalsh(s.cov2d.numpy()) >= LOW_PASS - 1e-12)
