"""Math-kernel checks: rotations against scipy, SH basis against exact
sphere quadrature, and every analytic gradient against central differences
in float64.
"""

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss
from scipy.spatial.transform import Rotation

from splatpaint import core
from splatpaint.errors import ValidationError

from oracles import fd_grad, rel_l2, ref_project


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_camera(width=32, height=24, fx=30.0, fy=28.0):
    w2c = np.eye(4, dtype=np.float32)
    return core.Camera(width=width, height=height, fx=fx, fy=fy,
                       cx=(width - 1) / 2, cy=(height - 1) / 2,
                       world_to_camera=w2c)


class TestQuatToRotmat:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(50, 4))  # unnormalized on purpose
        ours = core.quat_to_rotmat(q)
        theirs = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
        assert np.allclose(ours, theirs, atol=1e-12)

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(1)
        r = core.quat_to_rotmat(random_unit_quats(rng, 20))
        eye = np.einsum("nij,nkj->nik", r, r)
        assert np.allclose(eye, np.eye(3), atol=1e-12)
        assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)

    def test_single_input(self):
        r = core.quat_to_rotmat(np.array([1.0, 0.0, 0.0, 0.0]))
        assert r.shape == (3, 3)
        assert np.allclose(r, np.eye(3))


class TestBuildCovariance:
    def test_identity_rotation_gives_scale_diag(self):
        s = np.array([0.1, -0.3, 0.7])
        cov = core.build_covariance(np.array([1.0, 0, 0, 0]), s)
        assert np.allclose(cov, np.diag(np.exp(2 * s)))

    def test_eigenvalues_and_symmetry(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(30, 4))
        s = rng.uniform(-1, 0.5, size=(30, 3))
        cov = core.build_covariance(q, s)
        assert np.allclose(cov, np.swapaxes(cov, 1, 2))
        got = np.sort(np.linalg.eigvalsh(cov), axis=1)
        want = np.sort(np.exp(2 * s), axis=1)
        assert np.allclose(got, want, rtol=1e-9)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            q = rng.normal(size=4)
            q /= max(np.linalg.norm(q), 0.5)
            s = rng.uniform(-1, 0.5, size=3)
            g = rng.normal(size=(3, 3))

            grad_q, grad_s = core.build_covariance_backward(g, q, s)
            fq = fd_grad(lambda qq: float(np.sum(g * core.build_covariance(qq, s))),
                         q, h=1e-6)
            fs = fd_grad(lambda ss: float(np.sum(g * core.build_covariance(q, ss))),
                         s, h=1e-6)
            assert rel_l2(grad_q, fq) < 1e-6
            assert rel_l2(grad_s, fs) < 1e-6

    def test_backward_batch_matches_single(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(6, 4))
        s = rng.uniform(-1, 0.5, size=(6, 3))
        g = rng.normal(size=(6, 3, 3))
        gq, gs = core.build_covariance_backward(g, q, s)
        for i in range(6):
            gqi, gsi = core.build_covariance_backward(g[i], q[i], s[i])
            assert np.allclose(gq[i], gqi)
            assert np.allclose(gs[i], gsi)

    def test_rotation_swaps_principal_axes(self):
        half = np.sqrt(0.5)
        q90z = np.array([half, 0.0, 0.0, half])
        cov = core.build_covariance(q90z, np.array([np.log(2), 0.0, 0.0]))
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-6)

    def test_identity_upstream_gives_two_per_axis(self):
        _, gs = core.build_covariance_backward(np.eye(3),
                                               np.array([1.0, 0, 0, 0]),
                                               np.zeros(3))
        assert np.allclose(gs, [2.0, 2.0, 2.0])

    def test_zero_upstream_gives_zero(self):
        gq, gs = core.build_covariance_backward(np.zeros((3, 3)),
                                                np.array([0.5, 0.5, 0.5, 0.5]),
                                                np.array([0.1, 0.2, 0.3]))
        assert np.all(gq == 0) and np.all(gs == 0)

    def test_backward_fd_f32_hundred_seeds(self):
        # float32 forward, h = 1e-3 * max(1, |x|)
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            q = rng.normal(size=4)
            q /= max(np.linalg.norm(q), 0.5)
            s = rng.uniform(-1, 0.5, size=3)
            g = rng.normal(size=(3, 3))

            def loss(qq, ss):
                cov = core.build_covariance(qq.astype(np.float32),
                                            ss.astype(np.float32))
                return float(np.sum(g.astype(np.float32) * cov))

            gq, gs = core.build_covariance_backward(g, q, s)
            fq = fd_grad(lambda x: loss(x, s), q)
            fs = fd_grad(lambda x: loss(q, x), s)
            worst = max(worst, rel_l2(np.concatenate([gq, gs]),
                                      np.concatenate([fq, fs])))
        assert worst < 1e-3


class TestProjection:
    def test_on_axis_hits_principal_point(self):
        cam = make_camera()
        batch = core.project_gaussians(np.array([[0.0, 0.0, 5.0]]),
                                       0.01 * np.eye(3)[None], cam)
        assert batch.valid[0]
        assert np.allclose(batch.mean2d[0], [cam.cx, cam.cy], atol=1e-5)
        assert np.isclose(batch.depth[0], 5.0)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(5)
        cam = make_camera()
        rot = Rotation.from_euler("xyz", [0.2, -0.1, 0.4]).as_matrix()
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = [0.1, -0.2, 4.0]
        cam.world_to_camera = w2c.astype(np.float32)

        pos = rng.normal(size=(10, 3)).astype(np.float64)
        q = rng.normal(size=(10, 4))
        s = rng.uniform(-2, -0.5, size=(10, 3))
        cov = core.build_covariance(q, s)
        batch = core.project_gaussians(pos, cov, cam)
        for i in range(10):
            m, c, z = ref_project(pos[i], cov[i], w2c, cam.fx, cam.fy,
                                  cam.cx, cam.cy)
            assert np.isclose(batch.depth[i], z, atol=1e-9)
            if z > 0.01:
                assert np.allclose(batch.mean2d[i], m, atol=1e-9)
                assert np.allclose(batch.cov2d[i], c, atol=1e-9)

    def test_culls_behind_camera(self):
        cam = make_camera()
        batch = core.project_gaussians(np.array([[0.0, 0.0, -1.0]]),
                                       0.01 * np.eye(3)[None], cam)
        assert not batch.valid[0]

    def test_culls_far_off_screen(self):
        cam = make_camera()
        batch = core.project_gaussians(np.array([[1000.0, 0.0, 5.0]]),
                                       0.0001 * np.eye(3)[None], cam)
        assert not batch.valid[0]

    def test_low_pass_floors_footprint(self):
        cam = make_camera()
        tiny = core.project_gaussians(np.array([[0.0, 0.0, 5.0]]),
                                      1e-10 * np.eye(3)[None], cam)
        assert tiny.cov2d[0, 0, 0] >= 0.3
        assert tiny.cov2d[0, 1, 1] >= 0.3
        none = core.project_gaussians(np.array([[0.0, 0.0, 5.0]]),
                                      1e-10 * np.eye(3)[None], cam,
                                      low_pass=0.0)
        assert none.cov2d[0, 0, 0] < 1e-8

    def test_single_wrapper(self):
        cam = make_camera()
        p = core.project_gaussian(np.array([0.0, 0.0, 5.0]),
                                  0.01 * np.eye(3), cam)
        assert p is not None
        assert p.mean2d.shape == (2,)
        assert core.project_gaussian(np.array([0.0, 0.0, -5.0]),
                                     0.01 * np.eye(3), cam) is None

    def test_preserves_dtype(self):
        cam = make_camera()
        b32 = core.project_gaussians(np.array([[0, 0, 5]], dtype=np.float32),
                                     0.01 * np.eye(3, dtype=np.float32)[None], cam)
        b64 = core.project_gaussians(np.array([[0, 0, 5]], dtype=np.float64),
                                     0.01 * np.eye(3)[None], cam)
        assert b32.cov2d.dtype == np.float32
        assert b64.cov2d.dtype == np.float64

    def test_unit_focal_identity_covariance(self):
        cam = core.Camera(width=3, height=3, fx=1.0, fy=1.0, cx=1.0, cy=1.0,
                          world_to_camera=np.eye(4))
        p = core.project_gaussian(np.array([0.0, 0.0, 1.0]), np.eye(3), cam,
                                  low_pass=0.25)
        assert p is not None
        assert np.allclose(p.cov2d, 1.25 * np.eye(2), atol=1e-6)
        assert np.allclose(p.jacobian[:, :2], np.eye(2), atol=1e-6)

    def test_focal_scale_consistency(self):
        # doubling fx,fy doubles offsets from the principal point and
        # quadruples the pre-low-pass footprint
        rng = np.random.default_rng(10)
        pos = rng.normal(size=(5, 3)) * 0.5 + [0, 0, 6]
        cov = core.build_covariance(rng.normal(size=(5, 4)),
                                    rng.uniform(-2, -1, size=(5, 3)))
        c1 = make_camera(width=200, height=200, fx=50.0, fy=50.0)
        c2 = make_camera(width=200, height=200, fx=100.0, fy=100.0)
        b1 = core.project_gaussians(pos, cov, c1, low_pass=0.0)
        b2 = core.project_gaussians(pos, cov, c2, low_pass=0.0)
        off1 = b1.mean2d - [c1.cx, c1.cy]
        off2 = b2.mean2d - [c2.cx, c2.cy]
        assert np.allclose(off2, 2 * off1, rtol=1e-5)
        assert np.allclose(b2.cov2d, 4 * b1.cov2d, rtol=1e-5)

    def test_footprint_shrinks_with_depth(self):
        cam = make_camera(fx=50.0, fy=50.0, width=100, height=100)
        pos = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
        cov = 0.001 * np.eye(3)[None].repeat(2, axis=0)
        b = core.project_gaussians(pos, cov, cam, low_pass=0.0)
        area = np.linalg.det(b.cov2d)
        assert np.isclose(area[1], area[0] / 16, rtol=1e-4)  # det scales as 1/z^4


class TestShBasis:
    def test_orthonormal_under_exact_quadrature(self):
        # Gauss-Legendre in cos(theta) x uniform in phi integrates products
        # of degree-3 spherical polynomials exactly, so the Gram matrix of
        # the basis must come out as the identity to roundoff.
        u, w = leggauss(8)
        phi = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        uu, pp = np.meshgrid(u, phi, indexing="ij")
        st = np.sqrt(1 - uu ** 2)
        dirs = np.stack([st * np.cos(pp), st * np.sin(pp), uu],
                        axis=-1).reshape(-1, 3)
        weights = np.repeat(w, 16) * (2 * np.pi / 16)
        basis = core.sh_basis(dirs, 3)
        gram = np.einsum("n,ni,nj->ij", weights, basis, basis)
        assert np.allclose(gram, np.eye(16), atol=1e-10)

    def test_coefficient_counts(self):
        d = np.array([0.0, 0.0, 1.0])
        for degree, k in [(0, 1), (1, 4), (2, 9), (3, 16)]:
            assert core.sh_basis(d, degree).shape == (k,)
        with pytest.raises(ValidationError):
            core.sh_basis(d, 4)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(6)
        dirs = rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        grad = core.sh_basis_grad(dirs, 3)
        for n in range(5):
            for k in range(16):
                fd = fd_grad(lambda d: float(core.sh_basis(d, 3)[k]),
                             dirs[n], h=1e-5)
                assert np.allclose(grad[n, k], fd, atol=1e-8)


class TestEvalSh:
    def test_dc_only_is_offset_color(self):
        coeffs = np.zeros((1, 3))
        coeffs[0] = core.rgb_to_sh_dc([0.2, 0.5, 0.9])
        rgb = core.eval_sh(coeffs, np.array([0.0, 0.0, 1.0]), 0)
        assert np.allclose(rgb, [0.2, 0.5, 0.9], atol=1e-7)

    def test_clamps_below_zero(self):
        coeffs = np.zeros((1, 3))
        coeffs[0] = core.rgb_to_sh_dc([-0.4, 0.5, 0.5])
        rgb = core.eval_sh(coeffs, np.array([0.0, 0.0, 1.0]), 0)
        assert rgb[0] == 0.0

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(7)
        for trial in range(3):
            coeffs = rng.normal(size=(4, 3)) * 0.3
            coeffs[0] += core.rgb_to_sh_dc([0.6, 0.6, 0.6])
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            pre = 0.5 + core.sh_basis(d, 1) @ coeffs
            assert np.abs(pre).min() > 1e-2  # keep FD away from the clamp
            up = rng.normal(size=3)

            gc, gd = core.eval_sh_backward(up, coeffs, d, 1)
            fc = fd_grad(lambda c: float(np.sum(up * core.eval_sh(c, d, 1))),
                         coeffs, h=1e-6)
            fdir = fd_grad(lambda dd: float(np.sum(up * core.eval_sh(coeffs, dd, 1))),
                           d, h=1e-6)
            assert rel_l2(gc, fc) < 1e-6
            assert rel_l2(gd, fdir) < 1e-6

    def test_clamped_channel_gets_no_gradient(self):
        coeffs = np.zeros((1, 3))
        coeffs[0] = core.rgb_to_sh_dc([-0.4, 0.5, 0.5])
        gc, gd = core.eval_sh_backward(np.ones(3), coeffs, np.array([0.0, 0, 1.0]), 0)
        assert gc[0, 0] == 0.0
        assert gc[0, 1] != 0.0

    def test_degree_one_antipodal_negation(self):
        rng = np.random.default_rng(11)
        coeffs = rng.normal(size=(4, 3)) * 0.1
        coeffs[0] = 0.0  # isolate the degree-1 part
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        plus = core.eval_sh(coeffs, d, 1) - 0.5
        minus = core.eval_sh(coeffs, -d, 1) - 0.5
        assert np.allclose(plus, -minus, atol=1e-7)

    def test_higher_degree_with_zero_tail_matches_dc(self):
        rng = np.random.default_rng(12)
        dc = rng.normal(size=(5, 1, 3)) * 0.3
        full = np.zeros((5, 16, 3))
        full[:, :1] = dc
        d = rng.normal(size=(5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        assert np.allclose(core.eval_sh(full, d, 3), core.eval_sh(dc, d, 0),
                           atol=1e-7)

    def test_backward_fd_f32_hundred_seeds(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(2000 + seed)
            coeffs = rng.normal(size=(4, 3)) * 0.3
            coeffs[0] += core.rgb_to_sh_dc([0.6, 0.6, 0.6])
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if np.abs(0.5 + core.sh_basis(d, 1) @ coeffs).min() < 5e-3:
                continue  # FD would straddle the clamp
            up = rng.normal(size=3)

            def loss(c):
                rgb = core.eval_sh(c.astype(np.float32),
                                   d.astype(np.float32), 1)
                return float(np.sum(up.astype(np.float32) * rgb))

            gc, _ = core.eval_sh_backward(up, coeffs, d, 1)
            worst = max(worst, rel_l2(gc, fd_grad(loss, coeffs)))
        assert worst < 1e-3


class TestViewDirections:
    def test_unit_norm_and_geometry(self):
        cam = make_camera()
        pos = np.array([[0.0, 0.0, 5.0], [3.0, 4.0, 0.0]], dtype=np.float32)
        dirs, dist = core.view_directions(pos, cam)
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-6)
        assert np.allclose(dist, [5.0, 5.0], atol=1e-6)
        assert np.allclose(dirs[0], [0, 0, 1], atol=1e-6)

    def test_backward_matches_fd(self):
        cam = make_camera()
        rng = np.random.default_rng(8)
        pos = rng.normal(size=(3, 3)) + [0, 0, 5]
        up = rng.normal(size=(3, 3))

        def loss(p):
            d, _ = core.view_directions(p, cam)
            return float(np.sum(up * d))

        dirs, dist = core.view_directions(pos, cam)
        got = core.view_direction_backward(up, dirs, dist)
        want = fd_grad(loss, pos, h=1e-6)
        assert rel_l2(got, want) < 1e-6


class TestTypes:
    def make_set(self, n=4, degree=1):
        rng = np.random.default_rng(9)
        k = (degree + 1) ** 2
        return core.GaussianSet(
            positions=rng.normal(size=(n, 3)),
            rotations=random_unit_quats(rng, n),
            log_scales=rng.uniform(-2, -1, size=(n, 3)),
            opacity_logits=rng.normal(size=n),
            sh_coeffs=rng.normal(size=(n, k, 3)),
            id_features=rng.normal(size=(n, 16)),
        )

    def test_validate_passes_and_casts(self):
        gs = self.make_set()
        gs.validate()
        assert gs.positions.dtype == np.float32
        assert len(gs) == 4
        assert gs.sh_degree == 1

    def test_validate_rejects_bad_shapes(self):
        gs = self.make_set()
        gs.id_features = gs.id_features[:, :8]
        with pytest.raises(ValidationError):
            gs.validate()

    def test_validate_rejects_nonfinite(self):
        gs = self.make_set()
        gs.positions[0, 0] = np.nan
        with pytest.raises(ValidationError):
            gs.validate()

    def test_select_and_copy_are_independent(self):
        gs = self.make_set()
        sub = gs.select([0, 2])
        assert len(sub) == 2
        cp = gs.copy()
        cp.positions[0, 0] += 1
        assert gs.positions[0, 0] != cp.positions[0, 0]

    def test_renormalize_rotations(self):
        gs = self.make_set()
        gs.rotations *= 3.0
        gs.renormalize_rotations()
        assert np.allclose(np.linalg.norm(gs.rotations, axis=1), 1.0, atol=1e-6)

    def test_camera_center(self):
        rot = Rotation.from_euler("xyz", [0.3, 0.1, -0.2]).as_matrix()
        eye = np.array([1.0, 2.0, 3.0])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        cam = core.Camera(width=8, height=8, fx=4, fy=4, cx=3.5, cy=3.5,
                          world_to_camera=w2c)
        cam.validate()
        assert np.allclose(cam.center, eye, atol=1e-5)

    def test_camera_rejects_bad_rotation(self):
        w2c = np.eye(4)
        w2c[0, 0] = 2.0
        cam = core.Camera(width=8, height=8, fx=4, fy=4, cx=3.5, cy=3.5,
                          world_to_camera=w2c)
        with pytest.raises(ValidationError):
            cam.validate()
