"""Object selection on a trained scene: score every Gaussian with the
linear classifier, keep the ones that answer confidently for the requested
object IDs, and drop spatial stragglers with statistical outlier removal."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianSet
from .errors import ValidationError

DEFAULT_THRESHOLD = 0.6
DEFAULT_KNN = 20
DEFAULT_STD_FACTOR = 2.0


@dataclass
class OutlierReport:
    """What statistical outlier removal did: how many points it dropped,
    or whether it was skipped because the selection was too small."""

    removed: int = 0
    skipped: bool = False


@dataclass
class ObjectSelection:
    object_ids: tuple
    indices: np.ndarray          # sorted unique positions into the set
    probabilities: np.ndarray    # per kept Gaussian, max over requested IDs
    filtered_by_threshold: int
    removed_as_outliers: int
    empty: bool = False
    outlier_check_skipped: bool = False


def classify_gaussians(gaussians: GaussianSet, classifier) -> np.ndarray:
    """Per-Gaussian class probabilities: softmax over the classifier logits
    of each raw id_feature.  No rendering is involved, so the result is
    view-independent."""
    logits = classifier.logits(gaussians.id_features)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def remove_outliers(positions: np.ndarray, k: int = DEFAULT_KNN,
                    std_factor: float = DEFAULT_STD_FACTOR):
    """Keep points whose mean distance to their k nearest neighbours is at
    most mu + std_factor * sigma of those means.  Returns (kept indices,
    report); with k or fewer points the check is skipped outright rather
    than run against a denominator too small to mean anything."""
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if n <= k:
        return np.arange(n), OutlierReport(skipped=True)
    tree = cKDTree(pts)
    # first column of the query is the point itself at distance zero
    dists, _ = tree.query(pts, k=k + 1)
    mean_knn = dists[:, 1:].mean(axis=1)
    cut = mean_knn.mean() + std_factor * mean_knn.std()
    kept = np.flatnonzero(mean_knn <= cut)
    return kept, OutlierReport(removed=int(n - len(kept)))


def select_object(gaussians: GaussianSet, classifier, object_ids,
                  threshold: float = DEFAULT_THRESHOLD,
                  k: int = DEFAULT_KNN,
                  std_factor: float = DEFAULT_STD_FACTOR) -> ObjectSelection:
    """Gaussians whose best probability over the requested IDs clears the
    threshold, minus spatial outliers.  An empty result is not an error;
    it comes back flagged so callers can warn instead of crash."""
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    ids = tuple(int(i) for i in object_ids)
    if not ids:
        raise ValidationError("no object IDs requested")
    num_classes = classifier.num_classes
    for i in ids:
        if not 0 <= i < num_classes:
            raise ValidationError(
                f"unknown object ID {i}; classifier has {num_classes} classes")

    probs = classify_gaussians(gaussians, classifier)
    best = probs[:, ids].max(axis=1)
    candidates = np.flatnonzero(best >= threshold)
    filtered = int(len(gaussians) - len(candidates))

    if len(candidates) == 0:
        return ObjectSelection(object_ids=ids,
                               indices=candidates,
                               probabilities=best[candidates],
                               filtered_by_threshold=filtered,
                               removed_as_outliers=0,
                               empty=True)

    kept_local, report = remove_outliers(gaussians.positions[candidates],
                                         k=k, std_factor=std_factor)
    kept = candidates[kept_local]
    return ObjectSelection(object_ids=ids,
                           indices=kept,
                           probabilities=best[kept],
                           filtered_by_threshold=filtered,
                           removed_as_outliers=report.removed,
                           empty=len(kept) == 0,
                           outlier_check_skipped=report.skipped)
