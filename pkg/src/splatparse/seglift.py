"""Lift 2D instance masks to per-gaussian features and cluster them into 3D instances.

Each training step picks a view, samples labeled pixels, renders their
features (a sparse linear map of the per-gaussian features), and descends
the contrastive clustering loss

    loss = -mean over patches of sum over pixels in the patch of
           log softmax_k( f . mean_k / temperature_k )[own patch]

with one temperature per patch,

    temperature = sum of |f - patch mean| / (size * log(size + 10)),

floored at MIN_TEMPERATURE.

Patch means and temperatures are held constant inside a step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .camera import CameraPose
from .gaussians import FEATURE_DIM, GaussianScene
from .raster import feature_weights, render

log = logging.getLogger(__name__)

SMOOTHING_ALPHA = 10.0
MIN_TEMPERATURE = 1e-2
UNLABELED = -1
_NORM_EPS = 1e-12


class LiftDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"contrastive loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class MaskSet:
    """Per-view patch-id maps (``-1`` = unlabeled) bound to camera poses."""

    label_maps: tuple[np.ndarray, ...]
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        if len(self.label_maps) != len(self.poses):
            raise ValueError("one label map per pose is required")
        for j, (lab, pose) in enumerate(zip(self.label_maps, self.poses)):
            if lab.shape != (pose.height, pose.width):
                raise ValueError(f"view {j}: label map {lab.shape} does not match image size {pose.image_size}")
            ids = np.unique(lab[lab >= 0])
            if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
                raise ValueError(f"view {j}: patch ids must be contiguous from 0")

    @classmethod
    def from_label_maps(cls, label_maps: Sequence[np.ndarray], poses: Sequence[CameraPose]) -> MaskSet:
        """Relabel arbitrary per-view ids (negative = unlabeled) to contiguous ones."""
        maps = []
        for lab in label_maps:
            lab = np.asarray(lab, dtype=np.int64)
            out = np.full(lab.shape, UNLABELED, dtype=np.int64)
            good = lab >= 0
            _, inv = np.unique(lab[good], return_inverse=True)
            out[good] = inv
            maps.append(out)
        return cls(tuple(maps), tuple(poses))

    def __len__(self) -> int:
        return len(self.poses)


def masks_from_instance_renders(scene: GaussianScene, poses: Sequence[CameraPose]) -> MaskSet:
    """Ground-truth masks: the scene's own instance-ID render per view."""
    maps = [render(scene, cam, "instance").instance_map for cam in poses]
    return MaskSet.from_label_maps(maps, poses)


@dataclass(frozen=True)
class SampleBatch:
    view: int
    pixels: np.ndarray  # flat pixel indices (row * width + col)
    coords: np.ndarray  # (N, 2) row, col
    patch_ids: np.ndarray
    features: np.ndarray | None = None


def sample_batch(masks: MaskSet, rng: np.random.Generator, n: int, view: int | None = None) -> SampleBatch:
    """Uniformly sample ``n`` labeled pixels (with replacement) from one view."""
    if view is None:
        view = int(rng.integers(len(masks)))
    lab = masks.label_maps[view]
    flat = lab.ravel()
    labeled = np.flatnonzero(flat >= 0)
    if len(labeled) == 0:
        raise ValueError(f"view {view} has no labeled pixels")
    pix = labeled[rng.integers(len(labeled), size=n)]
    rows, cols = np.divmod(pix, lab.shape[1])
    return SampleBatch(view, pix, np.stack([rows, cols], axis=1), flat[pix])


@dataclass(frozen=True)
class ContrastiveLossState:
    means: np.ndarray
    temperature: np.ndarray
    sizes: np.ndarray
    alpha: float = SMOOTHING_ALPHA

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)


def cluster_stats(features: np.ndarray, cluster: np.ndarray, *, alpha: float = SMOOTHING_ALPHA,
                  min_temperature: float = MIN_TEMPERATURE) -> ContrastiveLossState:
    """Means and temperatures for contiguous cluster ids ``0..K-1``."""
    k = int(cluster.max()) + 1
    sizes = np.bincount(cluster, minlength=k)
    means = np.zeros((k, features.shape[1]))
    np.add.at(means, cluster, features)
    means /= sizes[:, None]
    spread = np.bincount(cluster, weights=np.linalg.norm(features - means[cluster], axis=1), minlength=k)
    temp = spread / (sizes * np.log(sizes + alpha))
    return ContrastiveLossState(means, np.maximum(temp, min_temperature), sizes, alpha)


def contrastive_loss(features: np.ndarray, patch_ids: np.ndarray, *,
                     state: ContrastiveLossState | None = None, alpha: float = SMOOTHING_ALPHA,
                     min_temperature: float = MIN_TEMPERATURE) -> tuple[float, np.ndarray, ContrastiveLossState]:
    """Contrastive clustering loss and its gradient w.r.t. each sample feature.

    ``features`` should be L2-normalised. Patch ids may be any integers; they
    are compacted internally. Passing ``state`` freezes the cluster means and
    temperatures (otherwise they are computed from ``features``).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("need a non-empty (N, D) feature batch")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite features")
    _, cluster = np.unique(np.asarray(patch_ids), return_inverse=True)
    cluster = cluster.ravel()
    if state is None:
        state = cluster_stats(f, cluster, alpha=alpha, min_temperature=min_temperature)
    scaled = state.means / state.temperature[:, None]  # (K, D)
    logits = f @ scaled.T
    lse = logsumexp(logits, axis=1)
    rows = np.arange(len(f))
    n_p = state.n_clusters
    loss = -float(np.sum(logits[rows, cluster] - lse)) / n_p
    soft = np.exp(logits - lse[:, None])
    grad = -(scaled[cluster] - soft @ scaled) / n_p
    return loss, grad, state


@dataclass
class LiftConfig:
    steps: int = 5000
    lr: float = 1.0
    momentum: float = 0.9
    n_samples: int = 1024
    seed: int = 0
    probe_views: int = 4
    log_every: int = 500
    # per-gaussian cap on one update; unit vectors otherwise flip back and forth
    max_step: float | None = 0.1


@dataclass
class LiftResult:
    features: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    probe_loss_initial: float = float("nan")
    probe_loss_final: float = float("nan")


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1)
    return x / np.maximum(norm, _NORM_EPS)[:, None], norm


def _batch_loss_and_grad(rows: sp.csr_matrix, feats: np.ndarray, patch_ids: np.ndarray):
    rendered = rows @ feats
    f, norm = _normalize_rows(rendered)
    loss, g_f, _ = contrastive_loss(f, patch_ids)
    # back through the row normalisation, then through the linear render
    g_rendered = (g_f - f * np.sum(f * g_f, axis=1, keepdims=True)) / np.maximum(norm, _NORM_EPS)[:, None]
    return loss, rows.T @ g_rendered


def lift_features(scene: GaussianScene, masks: MaskSet, config: LiftConfig | None = None, *,
                  weights: Sequence[sp.csr_matrix] | None = None) -> LiftResult:
    """Optimise per-gaussian features so rendered features separate the 2D patches.

    Gaussians whose stored feature is zero start from a random unit vector.
    With ``steps == 0`` the stored features are returned unchanged.
    """
    cfg = config or LiftConfig()
    if cfg.steps <= 0:
        return LiftResult(scene.features.copy())
    init_rng, probe_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    if weights is None:
        weights = [feature_weights(scene, cam) for cam in masks.poses]
    weights = [w.tocsr() for w in weights]

    feats = scene.features.copy()
    blank = np.linalg.norm(feats, axis=1) == 0
    feats[blank] = init_rng.normal(size=(int(blank.sum()), FEATURE_DIM))
    feats, _ = _normalize_rows(feats)

    views = probe_rng.choice(len(masks), size=min(cfg.probe_views, len(masks)), replace=False)
    probe = [sample_batch(masks, probe_rng, cfg.n_samples, int(v)) for v in views]

    def probe_loss(h):
        return float(np.mean([_batch_loss_and_grad(weights[b.view][b.pixels], h, b.patch_ids)[0] for b in probe]))

    result = LiftResult(feats, probe_loss_initial=probe_loss(feats))
    velocity = np.zeros_like(feats)
    for step in range(cfg.steps):
        batch = sample_batch(masks, rng, cfg.n_samples)
        loss, grad = _batch_loss_and_grad(weights[batch.view][batch.pixels], feats, batch.patch_ids)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise LiftDivergence(step)
        result.loss_history.append(loss)
        velocity = cfg.momentum * velocity + grad
        step_vec = cfg.lr * velocity
        if cfg.max_step is not None:
            size = np.linalg.norm(step_vec, axis=1, keepdims=True)
            step_vec *= np.minimum(1.0, cfg.max_step / np.maximum(size, 1e-300))
        feats, _ = _normalize_rows(feats - step_vec)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("lift step %d/%d loss %.4f", step + 1, cfg.steps, loss)
    result.features = feats
    result.probe_loss_final = probe_loss(feats)
    return result


def consolidate_features(features: np.ndarray, weights: Sequence[sp.spmatrix]) -> np.ndarray:
    """Back-project normalised rendered features onto the gaussians.

    The loss only constrains each pixel's normalised weighted sum, so a
    gaussian's own vector can stay far from its object's direction while the
    sums are correct. Averaging the rendered (unit) features over every pixel
    a gaussian touches, weighted by its compositing weight, gives one
    vector per gaussian that tracks its object across views.
    """
    acc = np.zeros_like(features, dtype=np.float64)
    for w in weights:
        rendered, _ = _normalize_rows(w @ features)
        acc += w.T @ rendered
    out, norm = _normalize_rows(acc)
    # gaussians never drawn keep their own direction
    unseen = norm <= _NORM_EPS
    out[unseen] = _normalize_rows(features[unseen])[0]
    return out


def cluster_instances(features: np.ndarray, similarity_threshold: float = 0.9, k: int = 16,
                      min_shared: int = 6) -> tuple[np.ndarray, int]:
    """Shared-nearest-neighbour clusters on a k-NN cosine-similarity graph.

    Each gaussian keeps the neighbours among its ``k`` nearest whose cosine
    similarity is at least ``similarity_threshold`` (itself included). Two
    neighbours are linked when their lists share at least ``min_shared``
    entries, and clusters are the connected components of those links. A lone
    pair of stray features from different objects shares few neighbours, so it
    does not merge them. ``min_shared=0`` gives plain single linkage. Labels are
    numbered by the smallest gaussian index in each cluster.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("features missing")
    norm = np.linalg.norm(x, axis=1)
    if np.any(norm == 0):
        raise ValueError("zero feature vectors cannot be clustered")
    x = x / norm[:, None]
    # exact duplicates are trivially linked; collapsing them keeps the k-NN graph connected
    uniq, inverse = np.unique(np.round(x, 12), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n = len(uniq)
    if n == 1:
        return np.zeros(len(x), dtype=np.int64), 1
    kk = min(k + 1, n)
    dist, nbr = cKDTree(uniq).query(uniq, k=kk)
    # |a - b|^2 = 2 - 2 cos on the unit sphere
    keep = dist <= np.sqrt(max(0.0, 2.0 - 2.0 * similarity_threshold)) + 1e-12
    src = np.repeat(np.arange(n), kk)[keep.ravel()]
    dst = nbr.ravel()[keep.ravel()]
    adj = sp.csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    # a group of duplicates shares at least its own multiplicity
    mult = np.bincount(inverse, minlength=n).astype(np.float64)
    shared = (adj @ sp.diags(mult) @ adj.T).tocsr()
    links = adj.multiply(shared >= min_shared)
    _, comp = connected_components(links, directed=False)
    labels = comp[inverse]
    # renumber by first appearance in gaussian order
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(np.argsort(first))] = np.arange(len(first))
    labels = rank[labels]
    return labels.astype(np.int64), int(labels.max()) + 1


def merge_small_clusters(positions: np.ndarray, labels: np.ndarray, min_size: int) -> tuple[np.ndarray, int]:
    """Fold clusters smaller than ``min_size`` into their spatial neighbours.

    Small fragments are usually hidden faces whose rendered features borrow
    from whatever covers them, so each member takes the label of the nearest
    gaussian (by centre) in a large cluster. Labels are renumbered as in
    :func:`cluster_instances`. If no cluster reaches ``min_size`` nothing changes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    big = np.flatnonzero(counts >= min_size)
    if min_size <= 1 or len(big) == 0 or len(big) == len(counts):
        return labels.copy(), len(counts)
    pos = np.asarray(positions, dtype=np.float64)
    keep = np.isin(labels, big)
    _, nearest = cKDTree(pos[keep]).query(pos[~keep])
    out = labels.copy()
    out[~keep] = labels[keep][nearest]
    _, first, inverse = np.unique(out, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse.ravel()], len(first)


@dataclass
class Segmentation:
    scene: GaussianScene
    n_instances: int
    lift: LiftResult


def segment_scene(scene: GaussianScene, masks: MaskSet, config: LiftConfig | None = None, *,
                  similarity_threshold: float = 0.9, k: int = 16, min_shared: int = 6,
                  min_cluster_size: int = 20) -> Segmentation:
    """Lift, consolidate and cluster; returns the scene with features and labels set.

    Clusters with fewer than ``min_cluster_size`` gaussians are merged into
    the spatially nearest large cluster.
    """
    weights = [feature_weights(scene, cam) for cam in masks.poses]
    lift = lift_features(scene, masks, config, weights=weights)
    feats = consolidate_features(lift.features, weights)
    labels, n = cluster_instances(feats, similarity_threshold, k, min_shared)
    labels, n = merge_small_clusters(scene.positions, labels, min_cluster_size)
    return Segmentation(scene.replace(features=feats, instance_ids=labels), n, lift)


def label_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of matching labels under the best one-to-one label assignment."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    pu, pi = np.unique(pred, return_inverse=True)
    tu, ti = np.unique(truth, return_inverse=True)
    conf = np.zeros((len(pu), len(tu)), dtype=np.int64)
    np.add.at(conf, (pi.ravel(), ti.ravel()), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum()) / len(pred)
