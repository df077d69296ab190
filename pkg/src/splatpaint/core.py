"""Math kernel: quaternion/covariance algebra, perspective projection of 3D
Gaussians, and spherical-harmonic color evaluation, with hand-derived analytic
gradients for everything the optimizers need.

All functions accept either a single item (1-D / unbatched input) or a batch
(leading N axis) and preserve the input's floating dtype; the rest of the
engine calls them with float32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ValidationError

# Y_00 of the real spherical-harmonic basis; the DC color convention is
# rgb = 0.5 + c_dc * SH_DC.
SH_DC = 0.28209479177387814

_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
          1.0925484305920792, 0.5462742152960396)
_SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
          0.3731763325901154, 0.4570457994644658, 1.445305721320277,
          0.5900435899266435)

ID_FEATURE_DIM = 16
DEFAULT_NEAR_PLANE = 0.01
DEFAULT_LOW_PASS = 0.3  # px², added to the diagonal of the projected covariance


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValidationError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(count ** 0.5)) - 1
    if sh_coeff_count(max(0, min(3, degree))) != count:
        raise ValidationError(f"{count} is not a valid SH coefficient count")
    return degree


@dataclass
class GaussianSet:
    """All per-Gaussian learnable parameters in structure-of-arrays layout.

    positions       (N,3)  world units
    rotations       (N,4)  quaternion (w,x,y,z); may drift off unit length
                           between optimizer steps, renormalized on use
    log_scales      (N,3)  log of the principal axis lengths
    opacity_logits  (N,)   opacity = sigmoid(logit)
    sh_coeffs       (N,K,3) K = (degree+1)² coefficients per color channel
    id_features     (N,16) learnable identity vectors
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    id_features: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name),
                                                       dtype=np.float32))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh_coeffs.shape[1])

    def validate(self) -> None:
        n = len(self)
        if n < 1:
            raise ValidationError("GaussianSet must hold at least one Gaussian")
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh_coeffs": (n, self.sh_coeffs.shape[1], 3),
            "id_features": (n, ID_FEATURE_DIM),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValidationError(f"{name} has shape {got}, expected {want}")
        self.sh_degree  # raises on a bad coefficient count
        if not all(np.isfinite(getattr(self, f.name)).all() for f in fields(self)):
            raise ValidationError("GaussianSet contains non-finite values")

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).copy() for f in fields(self)))

    def select(self, indices) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name)[indices] for f in fields(self)))

    def renormalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, np.maximum(norms, 1e-12), out=self.rotations)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera
    transform (4×4, row-major).  Pixel (row i, col j) has center (x=j, y=i);
    camera space is x-right, y-down, z-forward.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.ascontiguousarray(self.world_to_camera,
                                                    dtype=np.float32)

    def validate(self, atol: float = 1e-5) -> None:
        if self.world_to_camera.shape != (4, 4):
            raise ValidationError("world_to_camera must be 4x4")
        r = self.world_to_camera[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=atol):
            raise ValidationError("world_to_camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ProjectedGaussian:
    """One Gaussian after EWA projection to the image plane."""

    mean2d: np.ndarray    # (2,) pixel coordinates
    cov2d: np.ndarray     # (2,2) symmetric, includes the low-pass term
    depth: float          # camera-space z
    jacobian: np.ndarray  # (2,3) affine approximation of the projection


@dataclass
class ProjectedBatch:
    """Vectorized projection of many Gaussians; `valid` marks survivors of
    frustum/footprint culling."""

    mean2d: np.ndarray   # (N,2)
    cov2d: np.ndarray    # (N,2,2)
    depth: np.ndarray    # (N,)
    jacobian: np.ndarray  # (N,2,3)
    radius: np.ndarray   # (N,) 3σ footprint radius in pixels
    valid: np.ndarray    # (N,) bool


def _batched(x, width):
    x = np.asarray(x)
    if x.ndim == width:
        return x[None], True
    return x, False


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions (w,x,y,z) and convert to rotation matrices."""
    q, single = _batched(q, 1)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Σ = R·S·Sᵀ·Rᵀ with S = diag(exp(log_scale)); symmetric PSD."""
    rotation, single = _batched(rotation, 1)
    log_scale, _ = _batched(log_scale, 1)
    r = quat_to_rotmat(rotation)
    d = np.exp(2.0 * log_scale)  # S·Sᵀ is diagonal in the Gaussian's frame
    cov = np.einsum("nij,nj,nkj->nik", r, d, r)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))  # exact symmetry at f32
    return cov[0] if single else cov


def _rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """∂R/∂q̂ for unit quaternions, shape (N,4,3,3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    jac = np.zeros((n, 4, 3, 3), dtype=q.dtype)
    zero = np.zeros_like(w)
    jac[:, 0] = 2 * np.stack([zero, -z, y, z, zero, -x, -y, x, zero],
                             axis=-1).reshape(n, 3, 3)
    jac[:, 1] = 2 * np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x],
                             axis=-1).reshape(n, 3, 3)
    jac[:, 2] = 2 * np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y],
                             axis=-1).reshape(n, 3, 3)
    jac[:, 3] = 2 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero],
                             axis=-1).reshape(n, 3, 3)
    return jac


def build_covariance_backward(upstream: np.ndarray, rotation: np.ndarray,
                              log_scale: np.ndarray):
    """Gradients of <upstream, Σ> w.r.t. the (possibly unnormalized)
    quaternion and the log-scales.

    With D = diag(exp(2s)):  dL/ds_i = 2·D_ii·(RᵀGR)_ii  and
    dL/dR = (G + Gᵀ)·R·D, pulled back through the quaternion normalization.
    """
    upstream, single = _batched(upstream, 2)
    rotation, _ = _batched(rotation, 1)
    log_scale, _ = _batched(log_scale, 1)

    norm = np.linalg.norm(rotation, axis=-1, keepdims=True)
    qhat = rotation / norm
    r = quat_to_rotmat(qhat)
    d = np.exp(2.0 * log_scale)

    g_sym = upstream + np.swapaxes(upstream, -1, -2)
    rtgr = np.einsum("nji,njk,nkl->nil", r, upstream, r)
    grad_s = 2.0 * d * np.einsum("nii->ni", rtgr)

    grad_r = np.einsum("nij,njk,nk->nik", g_sym, r, d)
    jac = _rotmat_quat_jacobian(qhat)
    grad_qhat = np.einsum("nqij,nij->nq", jac, grad_r)
    # through q̂ = q/‖q‖: dL/dq = (I − q̂q̂ᵀ)/‖q‖ · dL/dq̂
    grad_q = (grad_qhat - qhat * np.sum(grad_qhat * qhat, axis=-1,
                                        keepdims=True)) / norm
    if single:
        return grad_q[0], grad_s[0]
    return grad_q, grad_s


def project_gaussians(positions: np.ndarray, covariances: np.ndarray,
                      camera: Camera, near_plane: float = DEFAULT_NEAR_PLANE,
                      low_pass: float = DEFAULT_LOW_PASS) -> ProjectedBatch:
    """EWA projection of world-space Gaussians to the image plane.

    Means go through the pinhole projection; covariances through its local
    affine approximation: Σ′ = J·Wr·Σ·Wrᵀ·Jᵀ + low_pass·I.  Gaussians are
    culled when their depth is at or behind `near_plane` or their 3σ
    footprint misses the image rectangle.
    """
    positions = np.asarray(positions)
    covariances = np.asarray(covariances)
    dtype = positions.dtype
    wtc = camera.world_to_camera.astype(dtype)
    rot, tvec = wtc[:3, :3], wtc[:3, 3]

    t = positions @ rot.T + tvec
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    depth = tz
    in_front = depth > near_plane
    safe_z = np.where(in_front, tz, 1.0)

    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    mean2d = np.stack([fx * tx / safe_z + dtype.type(camera.cx),
                       fy * ty / safe_z + dtype.type(camera.cy)], axis=-1)

    jac = np.zeros((positions.shape[0], 2, 3), dtype=dtype)
    inv_z = 1.0 / safe_z
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * tx * inv_z * inv_z
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * ty * inv_z * inv_z

    vcam = np.einsum("ij,njk,lk->nil", rot, covariances, rot)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, vcam, jac)
    cov2d[:, 0, 0] += low_pass
    cov2d[:, 1, 1] += low_pass

    # 3σ radius from the larger eigenvalue of the 2×2 covariance
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = np.maximum(mid + disc, 1e-12)
    radius = 3.0 * np.sqrt(lam_max)

    x, y = mean2d[:, 0], mean2d[:, 1]
    on_screen = ((x + radius >= 0) & (x - radius <= camera.width - 1)
                 & (y + radius >= 0) & (y - radius <= camera.height - 1))
    finite = np.isfinite(mean2d).all(axis=1) & np.isfinite(cov2d).all(axis=(1, 2))
    valid = in_front & on_screen & finite

    return ProjectedBatch(mean2d=mean2d, cov2d=cov2d, depth=depth,
                          jacobian=jac, radius=radius, valid=valid)


def project_gaussian(position: np.ndarray, covariance: np.ndarray,
                     camera: Camera, near_plane: float = DEFAULT_NEAR_PLANE,
                     low_pass: float = DEFAULT_LOW_PASS):
    """Single-Gaussian wrapper around project_gaussians.

    Returns None when the Gaussian is culled (a normal outcome).
    """
    batch = project_gaussians(np.asarray(position)[None],
                              np.asarray(covariance)[None],
                              camera, near_plane, low_pass)
    if not batch.valid[0]:
        return None
    return ProjectedGaussian(mean2d=batch.mean2d[0], cov2d=batch.cov2d[0],
                             depth=float(batch.depth[0]),
                             jacobian=batch.jacobian[0])


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical-harmonic basis values at unit directions, (N,K)."""
    dirs, single = _batched(dirs, 1)
    k = sh_coeff_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = np.empty((dirs.shape[0], k), dtype=dirs.dtype)
    basis[:, 0] = SH_DC
    if degree >= 1:
        basis[:, 1] = _SH_C1 * y
        basis[:, 2] = _SH_C1 * z
        basis[:, 3] = _SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 4] = _SH_C2[0] * x * y
        basis[:, 5] = _SH_C2[1] * y * z
        basis[:, 6] = _SH_C2[2] * (2 * zz - xx - yy)
        basis[:, 7] = _SH_C2[3] * x * z
        basis[:, 8] = _SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 9] = _SH_C3[0] * y * (3 * xx - yy)
        basis[:, 10] = _SH_C3[1] * x * y * z
        basis[:, 11] = _SH_C3[2] * y * (4 * zz - xx - yy)
        basis[:, 12] = _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        basis[:, 13] = _SH_C3[4] * x * (4 * zz - xx - yy)
        basis[:, 14] = _SH_C3[5] * z * (xx - yy)
        basis[:, 15] = _SH_C3[6] * x * (xx - 3 * yy)
    return basis[0] if single else basis


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """∂(basis)/∂(x,y,z) of each basis polynomial, (N,K,3)."""
    dirs, single = _batched(dirs, 1)
    k = sh_coeff_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    g = np.zeros((dirs.shape[0], k, 3), dtype=dirs.dtype)
    if degree >= 1:
        g[:, 1] = np.stack([zero, zero + _SH_C1, zero], axis=-1)
        g[:, 2] = np.stack([zero, zero, zero + _SH_C1], axis=-1)
        g[:, 3] = np.stack([zero + _SH_C1, zero, zero], axis=-1)
    if degree >= 2:
        c0, c1, c2, c3, c4 = _SH_C2
        g[:, 4] = np.stack([c0 * y, c0 * x, zero], axis=-1)
        g[:, 5] = np.stack([zero, c1 * z, c1 * y], axis=-1)
        g[:, 6] = np.stack([-2 * c2 * x, -2 * c2 * y, 4 * c2 * z], axis=-1)
        g[:, 7] = np.stack([c3 * z, zero, c3 * x], axis=-1)
        g[:, 8] = np.stack([2 * c4 * x, -2 * c4 * y, zero], axis=-1)
    if degree >= 3:
        c0, c1, c2, c3, c4, c5, c6 = _SH_C3
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = np.stack([6 * c0 * x * y, 3 * c0 * (xx - yy), zero], axis=-1)
        g[:, 10] = np.stack([c1 * y * z, c1 * x * z, c1 * x * y], axis=-1)
        g[:, 11] = np.stack([-2 * c2 * x * y, c2 * (4 * zz - xx - 3 * yy),
                             8 * c2 * y * z], axis=-1)
        g[:, 12] = np.stack([-6 * c3 * x * z, -6 * c3 * y * z,
                             c3 * (6 * zz - 3 * xx - 3 * yy)], axis=-1)
        g[:, 13] = np.stack([c4 * (4 * zz - 3 * xx - yy), -2 * c4 * x * y,
                             8 * c4 * x * z], axis=-1)
        g[:, 14] = np.stack([2 * c5 * x * z, -2 * c5 * y * z,
                             c5 * (xx - yy)], axis=-1)
        g[:, 15] = np.stack([3 * c6 * (xx - yy), -6 * c6 * x * y, zero], axis=-1)
    return g[0] if single else g


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """View-dependent color: rgb = max(0.5 + Σ c_k·Y_k(view_dir), 0)."""
    sh_coeffs, single = _batched(sh_coeffs, 2)
    view_dir, _ = _batched(view_dir, 1)
    k = sh_coeff_count(degree)
    if sh_coeffs.shape[1] != k:
        raise ValidationError(
            f"expected {k} SH coefficients for degree {degree}, "
            f"got {sh_coeffs.shape[1]}")
    basis = sh_basis(view_dir, degree)
    rgb = 0.5 + np.einsum("nk,nkc->nc", basis, sh_coeffs)
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def eval_sh_backward(upstream: np.ndarray, sh_coeffs: np.ndarray,
                     view_dir: np.ndarray, degree: int):
    """Gradients of <upstream, eval_sh> w.r.t. the coefficients and the
    (unit) view direction.  Channels clamped at 0 in the forward pass pass
    no gradient.
    """
    upstream, single = _batched(upstream, 1)
    sh_coeffs, _ = _batched(sh_coeffs, 2)
    view_dir, _ = _batched(view_dir, 1)
    k = sh_coeff_count(degree)
    if sh_coeffs.shape[1] != k:
        raise ValidationError(
            f"expected {k} SH coefficients for degree {degree}, "
            f"got {sh_coeffs.shape[1]}")
    basis = sh_basis(view_dir, degree)
    pre = 0.5 + np.einsum("nk,nkc->nc", basis, sh_coeffs)
    up = np.where(pre > 0, upstream, 0.0)
    grad_sh = basis[:, :, None] * up[:, None, :]
    grad_dir = np.einsum("nkj,nkc,nc->nj", sh_basis_grad(view_dir, degree),
                         sh_coeffs, up)
    if single:
        return grad_sh[0], grad_dir[0]
    return grad_sh, grad_dir


def view_directions(positions: np.ndarray, camera: Camera):
    """Unit directions from the camera center to each position, plus the
    distances (needed to push direction gradients back to positions)."""
    delta = positions - camera.center.astype(positions.dtype)
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    dist = np.maximum(dist, 1e-12)
    return delta / dist, dist[:, 0]


def view_direction_backward(grad_dir: np.ndarray, dirs: np.ndarray,
                            dist: np.ndarray) -> np.ndarray:
    """Pull a gradient on the unit direction back to the world position:
    dL/dx = (I − ddᵀ)/r · dL/dd."""
    radial = np.sum(grad_dir * dirs, axis=-1, keepdims=True)
    return (grad_dir - dirs * radial) / dist[:, None]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Invert the 0.5-offset DC convention: dc = (rgb − 0.5)/Y₀₀."""
    return (np.asarray(rgb) - 0.5) / SH_DC


def sh_dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc) * SH_DC + 0.5
