"""Synthetic scene generator.

Builds a known GaussianSet partitioned into labeled object clusters plus an
unlabeled background shell, renders posed views with the engine's own
forward pass, and derives exact per-pixel ID masks from the compositing
weights.  Everything downstream (training, segmentation, stylization) can
therefore be checked against ground truth.
"""

import colorsys
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import core, raster, scene_io
from .core import Camera, GaussianSet
from .errors import ValidationError


@dataclass
class SynthSpec:
    """Parameters of a generated scene.

    Object clusters sit on a circle in the y=0 plane over a backdrop bowl
    of background Gaussians (bottom hemisphere of the background_shell
    radii); cameras ride a ring of radius camera_radius at height
    camera_elevation, all aimed at the Gaussian centroid.  The default
    ring is narrow and high so every view looks down into the bowl: all
    pixels are covered by content, which keeps the mask labels balanced.
    focal defaults to 1.15 * image_size so the scene fills a consistent
    fraction of the frame at any resolution.
    """

    num_objects: int = 3
    gaussians_per_object: int = 40
    background_gaussians: int = 60
    num_cameras: int = 20
    image_size: int = 64
    sh_degree: int = 1
    seed: int = 0
    cluster_radius: float = 0.45
    cluster_centers: Optional[Sequence[Sequence[float]]] = None
    background_shell: tuple = (2.45, 2.75)
    camera_radius: float = 1.6
    camera_elevation: float = 3.0
    focal: Optional[float] = None
    background_color: tuple = (0.0, 0.0, 0.0)
    perturbation: float = 0.05
    mask_noise: float = 0.0

    def resolved_focal(self) -> float:
        return self.focal if self.focal is not None else 1.15 * self.image_size

    def resolved_centers(self) -> np.ndarray:
        if self.cluster_centers is not None:
            c = np.asarray(self.cluster_centers, np.float64)
            if c.shape != (self.num_objects, 3):
                raise ValidationError(
                    f"cluster_centers has shape {c.shape}, expected "
                    f"({self.num_objects}, 3)")
            return c
        n = self.num_objects
        if n == 1:
            return np.zeros((1, 3))
        # smallest circle whose chord spacing satisfies the separation
        # invariant, with 5% slack, but never tighter than radius 1
        r = max(1.0, 1.05 * 3.0 * self.cluster_radius
                / (2.0 * math.sin(math.pi / n)))
        phi = 2.0 * math.pi * np.arange(n) / n
        return np.stack([r * np.cos(phi), np.zeros(n), r * np.sin(phi)],
                        axis=1)

    def validate(self) -> None:
        if self.num_objects < 1:
            raise ValidationError("need at least one object")
        if self.num_objects + 1 > core.ID_FEATURE_DIM:
            raise ValidationError(
                f"at most {core.ID_FEATURE_DIM - 1} objects (labels are "
                "one-hot in the identity feature space)")
        if self.gaussians_per_object < 1:
            raise ValidationError("gaussians_per_object must be positive")
        if self.background_gaussians < 0:
            raise ValidationError("background_gaussians must be >= 0")
        if self.num_cameras < 1:
            raise ValidationError("need at least one camera")
        if self.image_size < 8:
            raise ValidationError("image_size must be at least 8")
        if not 0 <= self.sh_degree <= 3:
            raise ValidationError("sh_degree must be in [0, 3]")
        if not 0.0 <= self.mask_noise < 1.0:
            raise ValidationError("mask_noise must be in [0, 1)")
        if self.cluster_radius <= 0:
            raise ValidationError("cluster_radius must be positive")
        centers = self.resolved_centers()
        if self.num_objects > 1:
            diff = centers[:, None] - centers[None, :]
            dist = np.linalg.norm(diff, axis=-1)
            dist[np.diag_indices(len(centers))] = np.inf
            if dist.min() < 3.0 * self.cluster_radius:
                raise ValidationError(
                    f"cluster centers only {dist.min():.3f} apart; need "
                    f">= {3.0 * self.cluster_radius:.3f} (3x cluster radius)")


@dataclass
class SynthResult:
    """Ground truth returned by generate: the exact GaussianSet that was
    rendered, the per-Gaussian object label (0 = background, 1..num_objects
    = clusters), and the cameras in frame order."""

    gaussians: GaussianSet
    labels: np.ndarray
    cameras: list
    out_dir: Path


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at eye aimed at target.

    Rows of the rotation block are the camera axes (x, y, z-forward) in
    world coordinates; right-handed by construction."""
    eye = np.asarray(eye, np.float64)
    forward = np.asarray(target, np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("camera eye coincides with its target")
    z = forward / norm
    x = np.cross(np.asarray(up, np.float64), z)
    xnorm = np.linalg.norm(x)
    if xnorm < 1e-8:
        raise ValidationError("view direction is parallel to the up vector")
    x = x / xnorm
    y = np.cross(z, x)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([x, y, z])
    w2c[:3, 3] = -(w2c[:3, :3] @ eye)
    return w2c.astype(np.float32)


# object clusters are a soft core (wide photometric basins, so training
# recovers perturbed scenes quickly) under a thin crust of small opaque
# splats whose short tails keep the silhouette transition band narrow
_OBJECT_CORE_SCALES = (0.22, 0.33)     # fraction of cluster_radius
_OBJECT_CORE_OPACITY_LOGITS = (1.8, 3.2)
_OBJECT_CRUST_FRACTION = 0.3
_OBJECT_CRUST_SCALES = (0.12, 0.18)    # fraction of cluster_radius
_OBJECT_CRUST_OPACITY_LOGITS = (3.0, 4.2)

# backdrop bowl splat statistics: sized so 60 blobs tile the bowl without
# holes, mottled so backdrop position noise shows in the image
_BOWL_SCALES = (0.28, 0.42)
_BOWL_RGB = (0.05, 0.95)
_BOWL_OPACITY_LOGITS = (1.8, 3.2)
_BOWL_DENSITY_EXP = 0.7


def _sample_in_ball(rng, count, radius):
    # cube-root radius law gives uniform density inside the ball
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    return d * r[:, None]


def _sample_on_shell(rng, count, r_inner, r_outer):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(r_inner, r_outer, count)[:, None]


def _object_palette(num_objects: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(j / num_objects, 0.9, 0.95)
            for j in range(num_objects)]
    return np.asarray(cols)


def _build_gaussians(spec: SynthSpec, rng) -> tuple:
    centers = spec.resolved_centers()
    palette = _object_palette(spec.num_objects)
    k = core.sh_coeff_count(spec.sh_degree)

    chunks = []
    labels = []
    for j in range(spec.num_objects):
        m = spec.gaussians_per_object
        n_crust = round(m * _OBJECT_CRUST_FRACTION) if m >= 4 else 0
        n_core = m - n_crust
        r = spec.cluster_radius
        pos = centers[j] + np.concatenate([
            _sample_in_ball(rng, n_core, 0.88 * r),
            _sample_on_shell(rng, n_crust, 0.85 * r, r)])
        rgb = np.clip(palette[j] + rng.uniform(-0.06, 0.06, (m, 3)),
                      0.05, 0.98)
        log_scales = np.concatenate([
            rng.uniform(math.log(_OBJECT_CORE_SCALES[0] * r),
                        math.log(_OBJECT_CORE_SCALES[1] * r), (n_core, 3)),
            rng.uniform(math.log(_OBJECT_CRUST_SCALES[0] * r),
                        math.log(_OBJECT_CRUST_SCALES[1] * r), (n_crust, 3))])
        logits = np.concatenate([
            rng.uniform(*_OBJECT_CORE_OPACITY_LOGITS, n_core),
            rng.uniform(*_OBJECT_CRUST_OPACITY_LOGITS, n_crust)])
        chunks.append((pos, rgb, log_scales, logits))
        labels.append(np.full(m, j + 1, np.int32))

    if spec.background_gaussians:
        m = spec.background_gaussians
        # backdrop bowl: golden-spiral points (plus jitter) tile the cap
        # y <= 0.3 without holes; the lip rises just far enough that the
        # downward cameras see backdrop in every frame corner, yet never
        # between a camera and an object.  The 0.7 exponent packs extra
        # points near the bowl bottom, which rays hit face-on (one shell
        # crossing, so holes would show) while the grazing sides stack
        # several blobs per ray anyway.
        i = np.arange(m)
        y = 0.3 - 1.3 * ((i + 0.5) / m) ** _BOWL_DENSITY_EXP
        ring = np.sqrt(1.0 - y * y)
        theta = i * (math.pi * (3.0 - math.sqrt(5.0)))
        d = np.stack([ring * np.cos(theta), y, ring * np.sin(theta)], axis=1)
        d += rng.normal(scale=0.04, size=(m, 3))
        d[:, 1] = np.minimum(d[:, 1], 0.35)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r0, r1 = spec.background_shell
        pos = d * rng.uniform(r0, r1, m)[:, None]
        rgb = rng.uniform(*_BOWL_RGB, (m, 3))
        log_scales = rng.uniform(math.log(_BOWL_SCALES[0]),
                                 math.log(_BOWL_SCALES[1]), (m, 3))
        logits = rng.uniform(*_BOWL_OPACITY_LOGITS, m)
        chunks.append((pos, rgb, log_scales, logits))
        labels.append(np.zeros(m, np.int32))

    positions = np.concatenate([c[0] for c in chunks])
    rgb = np.concatenate([c[1] for c in chunks])
    log_scales = np.concatenate([c[2] for c in chunks])
    logits = np.concatenate([c[3] for c in chunks])
    labels = np.concatenate(labels)
    n = len(positions)

    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = core.rgb_to_sh_dc(rgb)
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-0.04, 0.04, (n, k - 1, 3))

    features = np.zeros((n, core.ID_FEATURE_DIM))
    features[np.arange(n), labels] = 1.0

    gaussians = GaussianSet(positions=positions, rotations=quats,
                            log_scales=log_scales, opacity_logits=logits,
                            sh_coeffs=sh, id_features=features)
    return gaussians, labels


def _ring_cameras(spec: SynthSpec, target) -> list:
    size = spec.image_size
    f = spec.resolved_focal()
    cxy = (size - 1) / 2.0
    cams = []
    for i in range(spec.num_cameras):
        phi = 2.0 * math.pi * i / spec.num_cameras
        eye = (spec.camera_radius * math.cos(phi), spec.camera_elevation,
               spec.camera_radius * math.sin(phi))
        cams.append(Camera(width=size, height=size, fx=f, fy=f,
                           cx=cxy, cy=cxy, world_to_camera=look_at(eye,
                                                                   target)))
    return cams


def render_mask(gaussians: GaussianSet, camera: Camera,
                num_labels: int) -> np.ndarray:
    """Ground-truth ID mask: per pixel, the label whose Gaussians received
    the largest summed blend weight; 0 wherever more than half the light
    passes through.  Relies on id_features being one-hot label encodings,
    so rendered feature channel l is exactly label l's weight sum."""
    out = raster.render_features(gaussians, camera)
    ids = np.argmax(out.features[:, :, :num_labels], axis=-1).astype(np.int32)
    ids[out.final_transmittance > 0.5] = 0
    return ids


def perturb(gaussians: GaussianSet, magnitude: float,
            seed: int) -> GaussianSet:
    """Seeded Gaussian noise on positions (scaled by the scene extent, the
    largest distance from the position centroid), SH DC, and log scales.
    Everything else is untouched; magnitude 0 is the identity."""
    out = gaussians.copy()
    if magnitude == 0:
        return out
    rng = np.random.default_rng(seed)
    centroid = out.positions.mean(axis=0)
    extent = float(np.linalg.norm(out.positions - centroid, axis=1).max())
    n = len(out)
    out.positions = (out.positions
                     + rng.normal(scale=magnitude * extent,
                                  size=(n, 3))).astype(np.float32)
    dc = out.sh_coeffs[:, 0, :] + rng.normal(scale=magnitude, size=(n, 3))
    out.sh_coeffs[:, 0, :] = dc.astype(np.float32)
    out.log_scales = (out.log_scales
                      + rng.normal(scale=magnitude,
                                   size=(n, 3))).astype(np.float32)
    return out


def generate(spec: SynthSpec, out_dir) -> SynthResult:
    """Build the scene, render every view, write a complete scene directory
    (cameras.json, images/, masks/, points.ply), and return ground truth.

    points.ply holds positions perturbed by spec.perturbation so training
    from the directory alone is a genuine recovery problem."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    gaussians, labels = _build_gaussians(spec, rng)
    target = gaussians.positions.mean(axis=0).astype(np.float64)
    cameras = _ring_cameras(spec, target)
    num_labels = spec.num_objects + 1
    background = np.asarray(spec.background_color, np.float32)

    frames = []
    for i, cam in enumerate(cameras):
        name = f"frame_{i:04d}"
        frames.append({
            "name": name,
            "fx": float(cam.fx), "fy": float(cam.fy),
            "cx": float(cam.cx), "cy": float(cam.cy),
            "world_to_camera": [float(v) for v in
                                cam.world_to_camera.ravel()],
        })
        out = raster.render_color(gaussians, cam, background)
        scene_io.save_image(out_dir / "images" / f"{name}.png",
                            np.clip(out.color, 0.0, 1.0))
        ids = render_mask(gaussians, cam, num_labels)
        if spec.mask_noise > 0.0:
            flip = rng.random(ids.shape) < spec.mask_noise
            shift = rng.integers(1, num_labels, size=ids.shape)
            ids = np.where(flip, (ids + shift) % num_labels,
                           ids).astype(np.int32)
        scene_io.save_mask(out_dir / "masks" / f"{name}.png", ids)

    meta = {"width": spec.image_size, "height": spec.image_size,
            "frames": frames}
    (out_dir / "cameras.json").write_text(json.dumps(meta, indent=1))

    shaken = perturb(gaussians, spec.perturbation, spec.seed + 1)
    colors = np.clip(core.sh_dc_to_rgb(gaussians.sh_coeffs[:, 0, :]), 0, 1)
    scene_io.save_ply(out_dir / "points.ply", shaken.positions, colors,
                      binary=True)

    return SynthResult(gaussians=gaussians, labels=labels, cameras=cameras,
                       out_dir=out_dir)


def default_spec(**overrides) -> SynthSpec:
    """The stock evaluation scene; keyword overrides replace fields."""
    return dataclasses.replace(SynthSpec(), **overrides)
