"""Localized style transfer: nearest-neighbor feature matching against a
style image's activations, optimized into the SH coefficients of a selected
subset of Gaussians while every other parameter stays frozen."""

from dataclasses import dataclass, field

import numpy as np

from . import featnet, raster, trainer
from .core import GaussianSet
from .errors import DivergenceError, ValidationError

DEFAULT_LAYERS = (11, 13, 15)
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_ITERATIONS = 800
DEFAULT_VIEW_FRACTION = 0.25
MAX_ITERATIONS = 10000


@dataclass
class StyleJob:
    """Everything one stylization pass needs besides the scene itself."""

    selection: object                  # ObjectSelection
    style_image: np.ndarray            # HxWx3 in [0,1]
    style_scale: float = 1.0
    layer_indices: tuple = DEFAULT_LAYERS
    learning_rate: float = DEFAULT_LEARNING_RATE
    iterations: int = DEFAULT_ITERATIONS
    view_fraction: float = DEFAULT_VIEW_FRACTION
    seed: int = 0
    raw_dot: bool = False              # match by raw dot product, not cosine
    content_weight: float = 0.0        # optional L1 pull toward the original

    def validate(self) -> None:
        if not 1 <= self.iterations <= MAX_ITERATIONS:
            raise ValidationError(
                f"iterations must be in [1, {MAX_ITERATIONS}], "
                f"got {self.iterations}")
        if not 0.0 < self.style_scale <= 1.0:
            raise ValidationError(
                f"style_scale must be in (0, 1], got {self.style_scale}")
        if not 0.0 < self.view_fraction <= 1.0:
            raise ValidationError(
                f"view_fraction must be in (0, 1], got {self.view_fraction}")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.content_weight < 0:
            raise ValidationError("content weight must be >= 0")


def _normalize_rows(v: np.ndarray):
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return v / safe[:, None], norms


def nnfm_loss(render_features, style_features, raw_dot: bool = False):
    """Per layer: each rendered feature location is charged the cosine
    distance to its best style match (raw negated dot when raw_dot); layer
    losses are means over locations and the total is their sum.  Returns
    (total, per-layer upstream gradients w.r.t. the rendered activations);
    style features act as constants."""
    r_layers = {i: a for i, a in render_features.layers}
    s_layers = {i: a for i, a in style_features.layers}
    if sorted(r_layers) != sorted(s_layers):
        raise ValidationError(
            f"layer sets differ: render {sorted(r_layers)} vs "
            f"style {sorted(s_layers)}")
    total = 0.0
    upstreams = []
    per_layer = []
    for idx, act in render_features.layers:
        sact = s_layers[idx]
        if sact.size == 0:
            raise ValidationError(f"layer {idx}: empty style features")
        n_loc = act.shape[0] * act.shape[1]
        r = act.reshape(n_loc, act.shape[2]).astype(np.float64)
        s = sact.reshape(-1, sact.shape[2]).astype(np.float64)
        if r.shape[1] != s.shape[1]:
            raise ValidationError(f"layer {idx}: channel count mismatch")
        grad = np.zeros_like(r)
        if raw_dot:
            sim = r @ s.T
            best = sim.argmax(axis=1)
            loss_l = float(np.mean(-sim[np.arange(n_loc), best]))
            grad = -s[best] / n_loc
        else:
            rn, r_norm = _normalize_rows(r)
            sn, _ = _normalize_rows(s)
            sim = rn @ sn.T
            best = sim.argmax(axis=1)
            cos = sim[np.arange(n_loc), best]
            live = r_norm > 0.0  # zero-norm locations: distance 1, no grad
            loss_l = float(np.mean(np.where(live, 1.0 - cos, 1.0)))
            denom = np.where(live, r_norm, 1.0)
            g = np.where(live[:, None],
                         (sn[best] - cos[:, None] * rn) / denom[:, None],
                         0.0)
            grad = -g / n_loc
        total += loss_l
        per_layer.append(loss_l)
        upstreams.append(grad.reshape(act.shape))
    return total, upstreams, per_layer


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample with edge clamping."""
    img = np.asarray(image, np.float64)
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def prepare_style_features(extractor, style_image: np.ndarray,
                           style_scale: float, layer_indices):
    """Resize the style image by style_scale and extract once; the result
    is reused for every optimization step."""
    if not 0.0 < style_scale <= 1.0:
        raise ValidationError(
            f"style_scale must be in (0, 1], got {style_scale}")
    img = np.asarray(style_image, np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"style image must be HxWx3, got {img.shape}")
    if style_scale < 1.0:
        out_h = max(1, int(round(img.shape[0] * style_scale)))
        out_w = max(1, int(round(img.shape[1] * style_scale)))
        img = bilinear_resize(img, out_h, out_w)
    return featnet.extract(extractor, img, layer_indices)


def select_views(num_views: int, fraction: float, seed: int = 0) -> list:
    """Evenly spaced view subset: floor(i * V / K) for K = ceil(f * V).
    The spread is deterministic; seed is accepted for interface stability
    but unused."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    if num_views < 1:
        raise ValidationError("need at least one view")
    k = int(np.ceil(fraction * num_views))
    return sorted({i * num_views // k for i in range(k)})


def stylize(gaussians: GaussianSet, views, job: StyleJob, extractor,
            background=(0.0, 0.0, 0.0), threads: int = 1):
    """Optimize the selected Gaussians' SH coefficients so renders of the
    chosen views match the style image's feature statistics.  Returns the
    updated set and a per-iteration loss log; every non-SH parameter and
    every unselected Gaussian is bitwise untouched."""
    job.validate()
    sel = np.asarray(job.selection.indices, dtype=np.int64)
    if sel.size == 0:
        raise ValidationError("selection is empty; nothing to stylize")
    if sel.min() < 0 or sel.max() >= len(gaussians):
        raise ValidationError("selection indices out of range")
    if not views:
        raise ValidationError("no views supplied")

    style_stack = prepare_style_features(extractor, job.style_image,
                                         job.style_scale, job.layer_indices)
    subset = select_views(len(views), job.view_fraction)
    bg = np.asarray(background, np.float32)

    out = gaussians.copy()
    params = {"sh": out.sh_coeffs[sel].astype(np.float64)}
    state = trainer.init_adam(params, {"sh": job.learning_rate})

    log = []
    for it in range(job.iterations):
        view = subset[it % len(subset)]
        camera, _ = views[view]
        render = raster.render_color(out, camera, bg, threads=threads)
        stack = featnet.extract(extractor, render.color, job.layer_indices)
        loss, ups, per_layer = nnfm_loss(stack, style_stack,
                                         raw_dot=job.raw_dot)
        pixel_grad = featnet.extract_backward(extractor, render.color,
                                              job.layer_indices, ups)
        if job.content_weight > 0.0:
            target = views[view][1]
            diff = render.color - target
            loss += job.content_weight * float(np.abs(diff).mean())
            pixel_grad = pixel_grad + (job.content_weight
                                       * np.sign(diff) / diff.size)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite style loss at iteration {it}, view {view}")
        grads = raster.render_color_backward(
            pixel_grad.astype(np.float32), out, camera, bg, threads=threads)
        trainer.adam_step(state, params, {"sh": grads["sh_coeffs"][sel]})
        out.sh_coeffs[sel] = params["sh"]
        log.append({"iteration": it, "view": int(view),
                    "per_layer": [round(v, 8) for v in per_layer],
                    "total": round(float(loss), 8)})
    return out, log
