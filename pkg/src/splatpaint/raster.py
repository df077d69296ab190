"""Tile-based forward and backward rasterization of a GaussianSet into color
images, 16-channel identity-feature images, and per-pixel object-ID maps.

Compositing semantics, shared by every render mode:

    alpha_i = min(alpha_max, sigmoid(opacity_logit_i) * exp(-sigma_i))
    sigma_i = 0.5 * d^T * inv(cov2d_i) * d,   d = pixel - mean2d_i
    alpha_i := 0  when sigma_i > sigma_cutoff  or  alpha_i < alpha_skip
    front-to-back: pixel += T * alpha_i * value_i;  T *= (1 - alpha_i)
    a Gaussian is blended iff the transmittance *before* it is >= t_stop

The sigma cutoff at 4.5 (the 3-sigma ellipse) makes every Gaussian outside a
tile's padded bounding box contribute an exact zero, and the per-pixel
reductions below use cumprod/cumsum, whose evaluation order is strictly
sequential.  Together these make tiled and whole-image rendering
bit-for-bit identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Camera, GaussianSet
from .errors import ValidationError

ALPHA_MAX = np.float32(0.99)
ALPHA_SKIP = np.float32(1.0 / 255.0)
SIGMA_CUTOFF = np.float32(4.5)
DEFAULT_T_STOP = 1e-4
DEFAULT_TILE_SIZE = 16

_F32_0 = np.float32(0.0)
_F32_1 = np.float32(1.0)


@dataclass
class RenderOutput:
    color: np.ndarray                       # (H,W,3)
    final_transmittance: np.ndarray         # (H,W)
    per_pixel_contributor_count: np.ndarray  # (H,W) int32
    sorted_order: np.ndarray                # visible indices, ascending depth
    skipped_singular: int                   # Gaussians dropped for det ~ 0


@dataclass
class FeatureRenderOutput:
    features: np.ndarray                    # (H,W,16)
    final_transmittance: np.ndarray         # (H,W)
    per_pixel_contributor_count: np.ndarray  # (H,W) int32
    sorted_order: np.ndarray
    skipped_singular: int


class ProjectedList:
    """Sequence view over the projected, depth-sorted visible Gaussians."""

    def __init__(self, mean2d, cov2d, depth, jacobian):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.depth = depth
        self.jacobian = jacobian

    def __len__(self):
        return self.mean2d.shape[0]

    def __getitem__(self, i):
        return core.ProjectedGaussian(mean2d=self.mean2d[i],
                                      cov2d=self.cov2d[i],
                                      depth=float(self.depth[i]),
                                      jacobian=self.jacobian[i])


@dataclass
class _Prep:
    """Projected per-Gaussian state, culled and depth-sorted."""

    order: np.ndarray    # (M,) original indices
    mean2d: np.ndarray   # (M,2)
    cov2d: np.ndarray    # (M,2,2)
    conic: np.ndarray    # (M,3) packed inverse covariance (a,b,c)
    opacity: np.ndarray  # (M,) post-sigmoid
    radius: np.ndarray   # (M,)
    depth: np.ndarray    # (M,)
    jacobian: np.ndarray  # (M,2,3)
    skipped_singular: int


def _prepare(gaussians: GaussianSet, camera: Camera, near_plane: float,
             low_pass: float) -> _Prep:
    n = len(gaussians)
    if n == 0:
        z = np.zeros
        return _Prep(z(0, np.int64), z((0, 2), np.float32),
                     z((0, 2, 2), np.float32), z((0, 3), np.float32),
                     z(0, np.float32), z(0, np.float32), z(0, np.float32),
                     z((0, 2, 3), np.float32), 0)

    cov3d = core.build_covariance(gaussians.rotations, gaussians.log_scales)
    batch = core.project_gaussians(gaussians.positions, cov3d, camera,
                                   near_plane, low_pass)
    det = (batch.cov2d[:, 0, 0] * batch.cov2d[:, 1, 1]
           - batch.cov2d[:, 0, 1] * batch.cov2d[:, 1, 0])
    singular = det < 1e-12
    skipped = int(np.count_nonzero(batch.valid & singular))
    keep = np.nonzero(batch.valid & ~singular)[0]
    # stable sort on ascending depth; ties keep original index order because
    # `keep` is already ascending
    order = keep[np.argsort(batch.depth[keep], kind="stable")]

    cov2d = batch.cov2d[order]
    d = det[order]
    conic = np.stack([cov2d[:, 1, 1] / d, -cov2d[:, 0, 1] / d,
                      cov2d[:, 0, 0] / d], axis=-1).astype(np.float32)
    return _Prep(order=order, mean2d=batch.mean2d[order], cov2d=cov2d,
                 conic=conic,
                 opacity=core.sigmoid(gaussians.opacity_logits[order]),
                 radius=batch.radius[order], depth=batch.depth[order],
                 jacobian=batch.jacobian[order], skipped_singular=skipped)


def sort_and_cull(gaussians: GaussianSet, camera: Camera,
                  near_plane: float = core.DEFAULT_NEAR_PLANE,
                  low_pass: float = core.DEFAULT_LOW_PASS):
    """Visible Gaussian indices in ascending depth order, plus their
    projections (index-aligned with the returned order)."""
    prep = _prepare(gaussians, camera, near_plane, low_pass)
    return prep.order, ProjectedList(prep.mean2d, prep.cov2d, prep.depth,
                                     prep.jacobian)


def _tile_bounds(height, width, tile_size):
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            yield y0, min(y0 + tile_size, height), x0, min(x0 + tile_size, width)


def _bin_tiles(prep: _Prep, height, width, tile_size):
    """Indices (into the sorted arrays) of Gaussians whose padded 3-sigma
    box touches each tile.  The 0.5 px pad guarantees that anything binned
    out evaluates to sigma > cutoff at every pixel of the tile."""
    x, y = prep.mean2d[:, 0], prep.mean2d[:, 1]
    r = prep.radius + np.float32(0.5)
    bins = []
    for y0, y1, x0, x1 in _tile_bounds(height, width, tile_size):
        hit = ((x + r >= x0) & (x - r <= x1 - 1)
               & (y + r >= y0) & (y - r <= y1 - 1))
        bins.append(np.nonzero(hit)[0])
    return bins


def _pixel_grid(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float32)


def _tile_alpha(prep: _Prep, sub: np.ndarray, px: np.ndarray):
    """Per (pixel, gaussian) sigma and gated alpha for one tile."""
    mean = prep.mean2d[sub]
    a = prep.conic[sub, 0]
    b = prep.conic[sub, 1]
    c = prep.conic[sub, 2]
    dx = px[:, None, 0] - mean[None, :, 0]
    dy = px[:, None, 1] - mean[None, :, 1]
    sigma = np.float32(0.5) * (a * dx * dx + c * dy * dy) + b * dx * dy
    alpha_raw = np.minimum(ALPHA_MAX, prep.opacity[sub] * np.exp(-sigma))
    alpha = np.where((sigma > SIGMA_CUTOFF) | (alpha_raw < ALPHA_SKIP),
                     _F32_0, alpha_raw)
    return dx, dy, sigma, alpha_raw, alpha


def _tile_walk(alpha: np.ndarray, t_stop: float):
    """Sequential front-to-back quantities for one tile.

    Returns (t_excl, include, alpha_eff, weights, t_final)."""
    p = alpha.shape[0]
    t_incl = np.cumprod(_F32_1 - alpha, axis=1)
    t_excl = np.concatenate([np.ones((p, 1), np.float32), t_incl[:, :-1]],
                            axis=1)
    include = t_excl >= t_stop  # prefix mask: t_excl is non-increasing
    alpha_eff = np.where(include, alpha, _F32_0)
    weights = t_excl * alpha_eff
    t_final = np.cumprod(_F32_1 - alpha_eff, axis=1)[:, -1]
    return t_excl, include, alpha_eff, weights, t_final


def _composite_forward(prep: _Prep, values: np.ndarray,
                       background: np.ndarray, height: int, width: int,
                       t_stop: float, tile_size: int, threads: int):
    channels = values.shape[1] if values.ndim == 2 else len(background)
    bins = _bin_tiles(prep, height, width, tile_size)
    bounds = list(_tile_bounds(height, width, tile_size))

    def job(k):
        y0, y1, x0, x1 = bounds[k]
        sub = bins[k]
        p = (y1 - y0) * (x1 - x0)
        if sub.size == 0:
            color = np.tile(background, (p, 1))
            return (color, np.ones(p, np.float32), np.zeros(p, np.int32))
        px = _pixel_grid(y0, y1, x0, x1)
        _, _, _, _, alpha = _tile_alpha(prep, sub, px)
        _, _, alpha_eff, weights, t_final = _tile_walk(alpha, t_stop)
        contrib = weights[:, :, None] * values[sub][None]
        accum = np.cumsum(contrib, axis=1, out=contrib)[:, -1]
        color = accum + t_final[:, None] * background
        count = np.sum(alpha_eff > 0, axis=1, dtype=np.int32)
        return color, t_final, count

    results = _run_jobs(job, len(bounds), threads)

    color = np.empty((height, width, channels), np.float32)
    trans = np.empty((height, width), np.float32)
    count = np.empty((height, width), np.int32)
    for k, (y0, y1, x0, x1) in enumerate(bounds):
        c, t, n = results[k]
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = c.reshape(shape + (channels,))
        trans[y0:y1, x0:x1] = t.reshape(shape)
        count[y0:y1, x0:x1] = n.reshape(shape)
    return color, trans, count


def _run_jobs(job, n, threads):
    if threads <= 1 or n <= 1:
        return [job(k) for k in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(job, k) for k in range(n)]
        return [f.result() for f in futures]  # fixed order, deterministic


def _check_render_args(camera: Camera, background, channels):
    camera.validate()
    background = np.ascontiguousarray(background, dtype=np.float32)
    if background.shape != (channels,):
        raise ValidationError(
            f"background must have {channels} channels, got {background.shape}")
    return background


def _color_values(gaussians: GaussianSet, camera: Camera, prep: _Prep):
    """Per-visible-Gaussian RGB from SH, viewed from the camera center."""
    if prep.order.size == 0:
        return (np.zeros((0, 3), np.float32),) * 2 + (np.zeros(0, np.float32),)
    dirs, dist = core.view_directions(gaussians.positions[prep.order], camera)
    rgb = core.eval_sh(gaussians.sh_coeffs[prep.order], dirs,
                       gaussians.sh_degree)
    return rgb, dirs, dist


def render_color(gaussians: GaussianSet, camera: Camera, background,
                 t_stop: float = DEFAULT_T_STOP,
                 tile_size: int = DEFAULT_TILE_SIZE, threads: int = 1,
                 near_plane: float = core.DEFAULT_NEAR_PLANE,
                 low_pass: float = core.DEFAULT_LOW_PASS) -> RenderOutput:
    background = _check_render_args(camera, background, 3)
    prep = _prepare(gaussians, camera, near_plane, low_pass)
    values, _, _ = _color_values(gaussians, camera, prep)
    color, trans, count = _composite_forward(
        prep, values, background, camera.height, camera.width, t_stop,
        tile_size, threads)
    return RenderOutput(color=color, final_transmittance=trans,
                        per_pixel_contributor_count=count,
                        sorted_order=prep.order,
                        skipped_singular=prep.skipped_singular)


def render_features(gaussians: GaussianSet, camera: Camera,
                    t_stop: float = DEFAULT_T_STOP,
                    tile_size: int = DEFAULT_TILE_SIZE, threads: int = 1,
                    near_plane: float = core.DEFAULT_NEAR_PLANE,
                    low_pass: float = core.DEFAULT_LOW_PASS
                    ) -> FeatureRenderOutput:
    """Identical compositing weights as render_color, blending the 16-d
    identity features over a zero background."""
    camera.validate()
    prep = _prepare(gaussians, camera, near_plane, low_pass)
    values = gaussians.id_features[prep.order]
    background = np.zeros(core.ID_FEATURE_DIM, np.float32)
    feats, trans, count = _composite_forward(
        prep, values, background, camera.height, camera.width, t_stop,
        tile_size, threads)
    return FeatureRenderOutput(features=feats, final_transmittance=trans,
                               per_pixel_contributor_count=count,
                               sorted_order=prep.order,
                               skipped_singular=prep.skipped_singular)


def render_id_map(gaussians: GaussianSet, camera: Camera, classifier,
                  t_stop: float = DEFAULT_T_STOP,
                  tile_size: int = DEFAULT_TILE_SIZE, threads: int = 1
                  ) -> np.ndarray:
    """Per-pixel argmax class of the rendered feature image.  Pixels where
    more than half the light passes through are labeled background (0).

    `classifier` is either an object with weight (num_classes,16) and bias
    (num_classes,) attributes, or a (weight, bias) tuple."""
    if isinstance(classifier, tuple):
        weight, bias = classifier
    else:
        weight, bias = classifier.weight, classifier.bias
    out = render_features(gaussians, camera, t_stop, tile_size, threads)
    logits = out.features @ np.asarray(weight).T + np.asarray(bias)
    ids = np.argmax(logits, axis=-1).astype(np.int32)
    ids[out.final_transmittance > 0.5] = 0
    return ids


def _composite_backward(prep: _Prep, values: np.ndarray,
                        background: np.ndarray, upstream: np.ndarray,
                        t_stop: float, tile_size: int, threads: int):
    """Re-walk every tile and accumulate gradients w.r.t. the compositor
    inputs: per-Gaussian values, 2D means, conics, and post-sigmoid opacity
    (the sigmoid factor is chained by the callers).

    Accumulation happens in fixed tile order so results are independent of
    the thread count.
    """
    height, width = upstream.shape[:2]
    m = prep.order.size
    channels = values.shape[1] if m else background.shape[0]
    grad_values = np.zeros((m, channels), np.float32)
    grad_mean = np.zeros((m, 2), np.float32)
    grad_conic = np.zeros((m, 3), np.float32)
    grad_opac = np.zeros(m, np.float32)
    if m == 0:
        return grad_values, grad_mean, grad_conic, grad_opac

    bins = _bin_tiles(prep, height, width, tile_size)
    bounds = list(_tile_bounds(height, width, tile_size))
    up_flat = upstream.astype(np.float32, copy=False)

    def job(k):
        y0, y1, x0, x1 = bounds[k]
        sub = bins[k]
        if sub.size == 0:
            return None
        px = _pixel_grid(y0, y1, x0, x1)
        dx, dy, sigma, alpha_raw, alpha = _tile_alpha(prep, sub, px)
        t_excl, include, alpha_eff, weights, t_final = _tile_walk(alpha, t_stop)
        up = up_flat[y0:y1, x0:x1].reshape(-1, channels)
        v = values[sub]

        g_values = np.einsum("pc,pm->mc", up, weights)

        # suffix sums: everything blended after each Gaussian, plus the
        # background term (all of it is attenuated by later 1-alpha factors)
        contrib = weights[:, :, None] * v[None]
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        suffix += (t_final[:, None] * background)[:, None, :]

        up_dot_v = np.einsum("pc,mc->pm", up, v)
        up_dot_s = np.einsum("pmc,pc->pm", suffix, up)
        d_alpha = t_excl * up_dot_v - up_dot_s / (_F32_1 - alpha_eff)

        # gate: no gradient through zeroed, excluded, or max-clamped alphas
        gate = include & (alpha > 0) & (alpha_raw < ALPHA_MAX)
        d_alpha = np.where(gate, d_alpha, _F32_0)

        d_sigma = d_alpha * (-alpha)
        g_opac = np.einsum("pm->m", d_alpha * np.exp(-sigma) * gate)

        a = prep.conic[sub, 0]
        b = prep.conic[sub, 1]
        c = prep.conic[sub, 2]
        mdx = a * dx + b * dy  # d sigma/d mean2d = -(M d)
        mdy = b * dx + c * dy
        g_mean = np.stack([-np.einsum("pm,pm->m", d_sigma, mdx),
                           -np.einsum("pm,pm->m", d_sigma, mdy)], axis=-1)
        g_conic = np.stack([np.einsum("pm,pm->m", d_sigma, 0.5 * dx * dx),
                            np.einsum("pm,pm->m", d_sigma, dx * dy),
                            np.einsum("pm,pm->m", d_sigma, 0.5 * dy * dy)],
                           axis=-1)
        return sub, g_values, g_mean, g_conic, g_opac

    for result in _run_jobs(job, len(bounds), threads):
        if result is None:
            continue
        sub, g_values, g_mean, g_conic, g_opac = result
        grad_values[sub] += g_values
        grad_mean[sub] += g_mean
        grad_conic[sub] += g_conic
        grad_opac[sub] += g_opac
    return grad_values, grad_mean, grad_conic, grad_opac


def _geometry_backward(gaussians: GaussianSet, camera: Camera, prep: _Prep,
                       grad_mean: np.ndarray, grad_conic: np.ndarray):
    """Chain compositor gradients on (mean2d, conic) back to positions,
    rotations, and log_scales of the visible Gaussians."""
    order = prep.order
    rot3 = camera.rotation.astype(np.float32)
    fx, fy = np.float32(camera.fx), np.float32(camera.fy)

    # conic -> cov2d:  M = inv(cov2d), dL/dcov2d = -M G M
    g_m = np.empty((order.size, 2, 2), np.float32)
    g_m[:, 0, 0] = grad_conic[:, 0]
    g_m[:, 0, 1] = g_m[:, 1, 0] = 0.5 * grad_conic[:, 1]
    g_m[:, 1, 1] = grad_conic[:, 2]
    conic_mat = np.empty_like(g_m)
    conic_mat[:, 0, 0] = prep.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = prep.conic[:, 1]
    conic_mat[:, 1, 1] = prep.conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", conic_mat, g_m, conic_mat)

    # cov2d = J (R cov3d R^T) J^T + low_pass I
    cov3d = core.build_covariance(gaussians.rotations[order],
                                  gaussians.log_scales[order])
    vcam = np.einsum("ij,njk,lk->nil", rot3, cov3d, rot3)
    jac = prep.jacobian
    g_vcam = np.einsum("nji,njk,nkl->nil", jac, g_cov2d, jac)
    g_jac = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, jac, vcam)
    g_cov3d = np.einsum("ji,njk,kl->nil", rot3, g_vcam, rot3)
    grad_rot, grad_ls = core.build_covariance_backward(
        g_cov3d, gaussians.rotations[order], gaussians.log_scales[order])

    # camera-space mean t: from mean2d (d mean2d/dt = J exactly) and from
    # the t-dependence of J itself
    t = (gaussians.positions[order] @ rot3.T
         + camera.translation.astype(np.float32))
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    inv_z2 = 1.0 / (tz * tz)
    g_t = np.einsum("nij,ni->nj", jac, grad_mean)
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] += (g_jac[:, 0, 0] * (-fx * inv_z2)
                  + g_jac[:, 0, 2] * (2.0 * fx * tx * inv_z2 / tz)
                  + g_jac[:, 1, 1] * (-fy * inv_z2)
                  + g_jac[:, 1, 2] * (2.0 * fy * ty * inv_z2 / tz))
    grad_pos = g_t @ rot3
    return grad_pos, grad_rot, grad_ls


def render_color_backward(upstream: np.ndarray, gaussians: GaussianSet,
                          camera: Camera, background,
                          t_stop: float = DEFAULT_T_STOP,
                          tile_size: int = DEFAULT_TILE_SIZE,
                          threads: int = 1,
                          near_plane: float = core.DEFAULT_NEAR_PLANE,
                          low_pass: float = core.DEFAULT_LOW_PASS) -> dict:
    """Analytic gradients of <upstream, rendered color> w.r.t. every
    GaussianSet parameter, as a dict of full-size arrays (zeros for culled
    Gaussians)."""
    background = _check_render_args(camera, background, 3)
    n = len(gaussians)
    grads = {
        "positions": np.zeros((n, 3), np.float32),
        "rotations": np.zeros((n, 4), np.float32),
        "log_scales": np.zeros((n, 3), np.float32),
        "opacity_logits": np.zeros(n, np.float32),
        "sh_coeffs": np.zeros_like(gaussians.sh_coeffs),
    }
    prep = _prepare(gaussians, camera, near_plane, low_pass)
    if prep.order.size == 0:
        return grads
    values, dirs, dist = _color_values(gaussians, camera, prep)

    g_values, g_mean, g_conic, g_opac = _composite_backward(
        prep, values, background, upstream, t_stop, tile_size, threads)

    order = prep.order
    grads["opacity_logits"][order] = (g_opac * prep.opacity
                                      * (_F32_1 - prep.opacity))
    g_sh, g_dir = core.eval_sh_backward(g_values, gaussians.sh_coeffs[order],
                                        dirs, gaussians.sh_degree)
    grads["sh_coeffs"][order] = g_sh
    g_pos, g_rot, g_ls = _geometry_backward(gaussians, camera, prep,
                                            g_mean, g_conic)
    g_pos = g_pos + core.view_direction_backward(g_dir, dirs, dist)
    grads["positions"][order] = g_pos
    grads["rotations"][order] = g_rot
    grads["log_scales"][order] = g_ls
    return grads


def render_features_backward(upstream: np.ndarray, gaussians: GaussianSet,
                             camera: Camera,
                             t_stop: float = DEFAULT_T_STOP,
                             tile_size: int = DEFAULT_TILE_SIZE,
                             threads: int = 1,
                             near_plane: float = core.DEFAULT_NEAR_PLANE,
                             low_pass: float = core.DEFAULT_LOW_PASS,
                             geometry_grads: bool = False) -> dict:
    """Gradients of <upstream, rendered features>.  By default only the
    identity features learn; geometry gradients can be switched on."""
    camera.validate()
    n = len(gaussians)
    grads = {"id_features": np.zeros((n, core.ID_FEATURE_DIM), np.float32)}
    if geometry_grads:
        grads.update({
            "positions": np.zeros((n, 3), np.float32),
            "rotations": np.zeros((n, 4), np.float32),
            "log_scales": np.zeros((n, 3), np.float32),
            "opacity_logits": np.zeros(n, np.float32),
        })
    prep = _prepare(gaussians, camera, near_plane, low_pass)
    if prep.order.size == 0:
        return grads
    values = gaussians.id_features[prep.order]
    background = np.zeros(core.ID_FEATURE_DIM, np.float32)

    g_values, g_mean, g_conic, g_opac = _composite_backward(
        prep, values, background, upstream, t_stop, tile_size, threads)

    order = prep.order
    grads["id_features"][order] = g_values
    if geometry_grads:
        grads["opacity_logits"][order] = (g_opac * prep.opacity
                                          * (_F32_1 - prep.opacity))
        g_pos, g_rot, g_ls = _geometry_backward(gaussians, camera, prep,
                                                g_mean, g_conic)
        grads["positions"][order] = g_pos
        grads["rotations"][order] = g_rot
        grads["log_scales"][order] = g_ls
    return grads
