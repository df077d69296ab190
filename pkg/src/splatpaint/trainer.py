"""Optimization loops: a self-contained Adam with per-group learning rates,
the three training losses (L1 photometric, masked cross-entropy on rendered
identity features, k-NN spatial consistency on the feature field), and the
joint reconstruction/segmentation driver."""

import json
import math
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import core, raster, scene_io
from .core import GaussianSet
from .errors import DivergenceError, ValidationError

# positions deliberately crawl; opacity reacts fast; higher SH bands move
# at 1/20th of the DC rate
DEFAULT_LEARNING_RATES = {
    "positions": 1.6e-4,
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "sh_dc": 2.5e-3,
    "sh_rest": 2.5e-3 / 20.0,
    "id_features": 2.5e-3,
    "classifier_weight": 5e-3,
    "classifier_bias": 5e-3,
}

GAUSSIAN_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits",
                   "sh_dc", "sh_rest", "id_features")

INIT_OPACITY = 0.1
FEATURE_INIT_STD = 0.1


@dataclass
class LinearClassifier:
    """Single linear map from 16-d identity features to class logits."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "LinearClassifier":
        return cls(weight=np.zeros((num_classes, core.ID_FEATURE_DIM),
                                   np.float32),
                   bias=np.zeros(num_classes, np.float32))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias


@dataclass
class AdamState:
    """Moment buffers and hyperparameters; one entry per parameter group."""

    learning_rates: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, learning_rates: Optional[dict] = None,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    lrs = dict(DEFAULT_LEARNING_RATES if learning_rates is None
               else learning_rates)
    missing = set(params) - set(lrs)
    if missing:
        raise ValidationError(f"no learning rate for groups {sorted(missing)}")
    state = AdamState(learning_rates=lrs, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, in place.  Groups absent from grads
    keep both their parameters and their moments.  Quaternions are
    renormalized after an update that touched them."""
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"unknown parameter group '{name}'")
        p = params[name]
        if g.shape != p.shape:
            raise ValidationError(
                f"gradient shape {g.shape} != parameter shape {p.shape} "
                f"in group '{name}'")
        if not np.isfinite(g).all():
            raise DivergenceError(
                f"non-finite gradient in parameter group '{name}'")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rates[name] * (m / b1c) \
            / (np.sqrt(v / b2c) + state.eps)
    if "rotations" in grads:
        q = params["rotations"]
        q /= np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    return params


def photometric_loss(render, target: np.ndarray):
    """Mean absolute error and its gradient image.  Accepts a RenderOutput
    or a raw H×W×3 array."""
    image = render.color if hasattr(render, "color") else np.asarray(render)
    target = np.asarray(target)
    if image.shape != target.shape:
        raise ValidationError(
            f"render shape {image.shape} != target shape {target.shape}")
    diff = image - target
    loss = float(np.abs(diff).mean())
    return loss, np.sign(diff) / diff.size


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def id_cross_entropy(feature_render, classifier: LinearClassifier,
                     mask: np.ndarray):
    """Per-pixel softmax cross-entropy between classified rendered features
    and the ID mask, averaged over counted pixels; 65535 pixels are ignored.

    Returns (loss, grad wrt the feature image, grad wrt classifier weight,
    grad wrt classifier bias)."""
    feats = feature_render.features if hasattr(feature_render, "features") \
        else np.asarray(feature_render)
    mask = np.asarray(mask)
    if mask.shape != feats.shape[:2]:
        raise ValidationError(
            f"mask shape {mask.shape} != feature image {feats.shape[:2]}")
    weight, bias = classifier.weight, classifier.bias
    num_classes = weight.shape[0]

    valid = mask != scene_io.IGNORE_ID
    ids = mask[valid].astype(np.int64)
    if ids.size == 0:
        return 0.0, np.zeros_like(feats), np.zeros_like(weight), \
            np.zeros_like(bias)
    if ids.min() < 0 or ids.max() >= num_classes:
        raise ValidationError(
            f"mask IDs must lie in [0, {num_classes}); found {ids.max()}")

    f = feats[valid]
    lp = _log_softmax(f @ weight.T + bias)
    loss = float(-lp[np.arange(ids.size), ids].mean())

    g_logits = np.exp(lp)
    g_logits[np.arange(ids.size), ids] -= 1.0
    g_logits /= ids.size
    grad_feats = np.zeros_like(feats)
    grad_feats[valid] = g_logits @ weight
    return loss, grad_feats, g_logits.T @ f, g_logits.sum(axis=0)


def spatial_consistency_loss(gaussians: GaussianSet,
                             classifier: LinearClassifier,
                             sample_size: int = 1000, k: int = 16,
                             seed=0):
    """Mean KL divergence between each sampled Gaussian's class distribution
    and those of its k nearest neighbors (exact search, positions assumed
    distinct).  The classifier is held constant; the gradient flows into
    id_features only."""
    n = len(gaussians)
    if k < 1:
        raise ValidationError("k must be at least 1")
    if n <= k:
        raise ValidationError(f"need more than k={k} Gaussians, have {n}")
    rng = np.random.default_rng(seed)
    sample = rng.choice(n, size=min(sample_size, n), replace=False)

    _, nbr = cKDTree(gaussians.positions).query(
        gaussians.positions[sample], k=k + 1)
    nbr = nbr[:, 1:]  # drop self

    feats = gaussians.id_features
    lp_all = _log_softmax(feats @ classifier.weight.T + classifier.bias)
    p = np.exp(lp_all[sample])[:, None, :]
    lp = lp_all[sample][:, None, :]
    lq = lp_all[nbr]
    kl = (p * (lp - lq)).sum(axis=-1)
    loss = float(kl.mean())

    scale = 1.0 / kl.size
    g_logits = np.zeros_like(lp_all)
    g_sample = (p * ((lp - lq) - kl[:, :, None])).sum(axis=1) * scale
    np.add.at(g_logits, sample, g_sample)
    g_nbr = (np.exp(lq) - p) * scale
    np.add.at(g_logits, nbr.ravel(),
              g_nbr.reshape(-1, classifier.num_classes))
    return loss, g_logits @ classifier.weight


def init_from_points(points: np.ndarray, colors: Optional[np.ndarray] = None,
                     sh_degree: int = 1, seed: int = 0) -> GaussianSet:
    """3DGS-style initialization: isotropic scales from the mean distance
    to the 3 nearest points, opacity 0.1, SH DC from the point colors,
    seeded small-random identity features."""
    # copy: the optimizer mutates positions in place and must never write
    # back into the caller's point cloud
    pts = np.array(points, np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValidationError("points must be a non-empty (N, 3) array")
    n = len(pts)
    if colors is None:
        colors = np.full((n, 3), 0.5, np.float32)

    if n >= 4:
        d, _ = cKDTree(pts).query(pts, k=4)
        scale = np.maximum(d[:, 1:].mean(axis=1), 1e-4)
    else:
        scale = np.full(n, 0.1)
    rotations = np.zeros((n, 4), np.float32)
    rotations[:, 0] = 1.0

    k = core.sh_coeff_count(sh_degree)
    sh = np.zeros((n, k, 3), np.float32)
    sh[:, 0] = core.rgb_to_sh_dc(np.asarray(colors))

    rng = np.random.default_rng(seed)
    return GaussianSet(
        positions=pts,
        rotations=rotations,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, math.log(INIT_OPACITY
                                           / (1.0 - INIT_OPACITY))),
        sh_coeffs=sh,
        id_features=rng.normal(scale=FEATURE_INIT_STD,
                               size=(n, core.ID_FEATURE_DIM)),
    )


@dataclass
class TrainConfig:
    iterations: int = 30000
    learning_rates: Optional[dict] = None
    lambda_ce: float = 1.0
    lambda_3d: float = 1.0
    spatial_k: int = 16
    spatial_samples: int = 1000
    seed: int = 0
    snapshot_every: int = 0
    out_dir: Optional[Path] = None
    log_path: Optional[Path] = None
    sh_degree: int = 1
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    prune_opacity: bool = False
    prune_every: int = 1000
    prune_threshold: float = 0.005

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValidationError("iterations must be positive")
        if self.lambda_ce < 0 or self.lambda_3d < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.spatial_k < 1 or self.spatial_samples < 1:
            raise ValidationError("spatial_k and spatial_samples must be >= 1")
        if self.snapshot_every < 0:
            raise ValidationError("snapshot_every must be >= 0")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        self.resolved_learning_rates()

    def resolved_learning_rates(self) -> dict:
        lrs = dict(DEFAULT_LEARNING_RATES)
        if self.learning_rates:
            unknown = set(self.learning_rates) - set(lrs)
            if unknown:
                raise ValidationError(
                    f"unknown learning-rate groups {sorted(unknown)}")
            lrs.update(self.learning_rates)
        return lrs

    def stable_hash(self) -> int:
        skip = {"out_dir", "log_path"}
        parts = [f"{f.name}={getattr(self, f.name)!r}"
                 for f in fields(self) if f.name not in skip]
        return zlib.crc32(";".join(parts).encode())


@dataclass
class TrainResult:
    gaussians: GaussianSet
    classifier: LinearClassifier
    log: list
    iterations: int
    seed: int
    config_hash: int

    def to_checkpoint(self) -> scene_io.Checkpoint:
        return scene_io.Checkpoint(
            gaussians=self.gaussians, classifier_weight=self.classifier.weight,
            classifier_bias=self.classifier.bias, iterations=self.iterations,
            seed=self.seed, config_hash=self.config_hash)


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, both inputs clipped to [0, 1]."""
    a = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(reference, np.float64), 0.0, 1.0)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


def _param_views(gaussians: GaussianSet, classifier: LinearClassifier) -> dict:
    # sh_dc/sh_rest are views into sh_coeffs, so in-place Adam updates land
    # in the GaussianSet directly
    return {
        "positions": gaussians.positions,
        "rotations": gaussians.rotations,
        "log_scales": gaussians.log_scales,
        "opacity_logits": gaussians.opacity_logits,
        "sh_dc": gaussians.sh_coeffs[:, 0, :],
        "sh_rest": gaussians.sh_coeffs[:, 1:, :],
        "id_features": gaussians.id_features,
        "classifier_weight": classifier.weight,
        "classifier_bias": classifier.bias,
    }


def _num_classes_from_masks(masks) -> int:
    top = 0
    for m in masks:
        if m is None:
            continue
        ids = m[m != scene_io.IGNORE_ID]
        if ids.size:
            top = max(top, int(ids.max()))
    if top + 1 > 256:
        raise ValidationError(f"num_classes {top + 1} exceeds 256")
    return top + 1


def _prune(gaussians, state, threshold):
    alpha = core.sigmoid(gaussians.opacity_logits)
    keep = alpha >= threshold
    if keep.all():
        return gaussians, 0
    if not keep.any():
        keep[int(np.argmax(alpha))] = True  # never drop the whole scene
    removed = int((~keep).sum())
    gaussians = gaussians.select(keep)
    for name in GAUSSIAN_GROUPS:
        state.m[name] = state.m[name][keep]
        state.v[name] = state.v[name][keep]
    return gaussians, removed


def train(scene: scene_io.SceneData, config: TrainConfig,
          init: Optional[GaussianSet] = None) -> TrainResult:
    """Joint photometric + segmentation training.

    Cameras are visited round-robin with a seeded per-epoch shuffle.  The
    total loss is L1 + lambda_ce * cross-entropy + lambda_3d * spatial
    consistency; the feature losses are skipped entirely when the scene has
    no masks or their weight is zero, which reproduces pure photometric
    training bit for bit."""
    config.validate()
    num_views = len(scene.frames)
    if num_views == 0:
        raise ValidationError("scene has no frames")

    images = [scene.image(i) for i in range(num_views)]
    masks = [scene.mask(i) for i in range(num_views)]
    num_classes = _num_classes_from_masks(masks)

    if init is not None:
        gaussians = init.copy()
    else:
        if scene.points is None:
            raise ValidationError(
                "scene has no points.ply; pass an explicit init")
        gaussians = init_from_points(scene.points, scene.point_colors,
                                     config.sh_degree, config.seed)
    gaussians.validate()
    classifier = LinearClassifier.zeros(num_classes)

    params = _param_views(gaussians, classifier)
    state = init_adam(params, config.resolved_learning_rates())
    background = np.asarray(config.background, np.float32)
    lam_ce, lam_3d = config.lambda_ce, config.lambda_3d
    rng = np.random.default_rng(config.seed)

    log = []
    log_file = open(config.log_path, "w") if config.log_path else None
    start = time.perf_counter()
    try:
        perm = None
        for it in range(config.iterations):
            if it % num_views == 0:
                perm = rng.permutation(num_views)
            vi = int(perm[it % num_views])
            cam = scene.frames[vi].camera

            out = raster.render_color(gaussians, cam, background,
                                      threads=config.threads)
            l_photo, up = photometric_loss(out, images[vi])
            grads = raster.render_color_backward(
                up.astype(np.float32), gaussians, cam, background,
                threads=config.threads)
            gdict = {
                "positions": grads["positions"],
                "rotations": grads["rotations"],
                "log_scales": grads["log_scales"],
                "opacity_logits": grads["opacity_logits"],
                "sh_dc": grads["sh_coeffs"][:, 0, :],
                "sh_rest": grads["sh_coeffs"][:, 1:, :],
            }

            l_ce = l_sp = 0.0
            if lam_ce > 0.0 and masks[vi] is not None:
                fout = raster.render_features(gaussians, cam,
                                              threads=config.threads)
                l_ce, g_img, g_w, g_b = id_cross_entropy(fout, classifier,
                                                         masks[vi])
                fgrads = raster.render_features_backward(
                    (lam_ce * g_img).astype(np.float32), gaussians, cam,
                    threads=config.threads)
                gdict["id_features"] = fgrads["id_features"]
                gdict["classifier_weight"] = (lam_ce * g_w).astype(np.float32)
                gdict["classifier_bias"] = (lam_ce * g_b).astype(np.float32)
            if lam_3d > 0.0 and scene.has_masks \
                    and len(gaussians) > config.spatial_k:
                l_sp, g_sp = spatial_consistency_loss(
                    gaussians, classifier, config.spatial_samples,
                    config.spatial_k, seed=[config.seed, it])
                g_sp = (lam_3d * g_sp).astype(np.float32)
                if "id_features" in gdict:
                    gdict["id_features"] = gdict["id_features"] + g_sp
                else:
                    gdict["id_features"] = g_sp

            total = l_photo + lam_ce * l_ce + lam_3d * l_sp
            if not math.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at iteration {it}: photometric="
                    f"{l_photo}, cross_entropy={l_ce}, spatial={l_sp}")

            adam_step(state, params, gdict)
            for name in GAUSSIAN_GROUPS:
                if not np.isfinite(params[name]).all():
                    raise DivergenceError(
                        f"parameter group '{name}' became non-finite at "
                        f"iteration {it}")

            record = {"iteration": it, "view": vi, "photometric": l_photo,
                      "cross_entropy": l_ce, "spatial": l_sp, "total": total,
                      "seconds": round(time.perf_counter() - start, 4)}
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")

            done = it + 1
            if config.prune_opacity and done % config.prune_every == 0:
                gaussians, removed = _prune(gaussians, state,
                                            config.prune_threshold)
                if removed:
                    params = _param_views(gaussians, classifier)
            if config.snapshot_every and config.out_dir \
                    and done % config.snapshot_every == 0:
                ckpt = scene_io.Checkpoint(
                    gaussians=gaussians, classifier_weight=classifier.weight,
                    classifier_bias=classifier.bias, iterations=done,
                    seed=config.seed, config_hash=config.stable_hash())
                path = Path(config.out_dir) / f"ckpt_{done:06d}.bin"
                path.parent.mkdir(parents=True, exist_ok=True)
                scene_io.save_checkpoint(path, ckpt)
    finally:
        if log_file:
            log_file.close()

    return TrainResult(gaussians=gaussians, classifier=classifier, log=log,
                       iterations=config.iterations, seed=config.seed,
                       config_hash=config.stable_hash())
