"""Baseline unit discovery: minibatch K-Means and diagonal-covariance GMM.

Both models work on standardized features (per-dimension zero mean, unit
variance over the training frames); the standardizer travels with the
model so encoding applies the same transform.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .corpus import ModelBundle
from .dsp import FeatureSequence

log = logging.getLogger(__name__)


class ClusterInputError(ValueError):
    pass


def time_reduce(features, factor):
    """Average consecutive non-overlapping groups of ``factor`` frames.

    The trailing partial group is averaged over the frames it actually has.
    Accepts a ``FeatureSequence`` (frame rate divided by ``factor``) or a
    plain (T, D) array.
    """
    if factor < 1 or int(factor) != factor:
        raise ClusterInputError(f"time reduction factor must be a positive integer, got {factor}")
    factor = int(factor)
    seq = features if isinstance(features, FeatureSequence) else None
    x = np.asarray(seq.frames if seq is not None else features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if factor == 1:
        out = x.copy()
    else:
        starts = np.arange(0, x.shape[0], factor)
        sums = np.add.reduceat(x, starts, axis=0)
        counts = np.minimum(factor, x.shape[0] - starts)
        out = sums / counts[:, None]
    if seq is None:
        return out
    return FeatureSequence(out, seq.feature_kind, seq.frame_rate / factor, dict(seq.meta))


def reduced_length(n_frames, factor):
    return -(-n_frames // factor)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean


def nearest(x, centers, block=1 << 22):
    """Index of the closest center (squared L2) per row; ties go to the lowest index.

    Differences are formed explicitly (no ``|x|^2 - 2x.c + |c|^2`` expansion)
    so exactly equidistant centers compare equal.
    """
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] == 0:
        raise ClusterInputError("no centers to compare against")
    if x.shape[1] != centers.shape[1]:
        raise ClusterInputError(f"dimension mismatch: frames {x.shape[1]}, centers {centers.shape[1]}")
    step = max(1, block // max(1, centers.size))
    idx = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], step):
        d = ((x[lo : lo + step, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        idx[lo : lo + step] = np.argmin(d, axis=1)
        dist[lo : lo + step] = d[np.arange(d.shape[0]), idx[lo : lo + step]]
    return idx, dist


def kmeans_plus_plus(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ClusterInputError(f"data has fewer than k={k} distinct frames")
        i = rng.choice(n, p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _reseed_empty(x, centers, idx, dist):
    counts = np.bincount(idx, minlength=centers.shape[0])
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        far = np.argsort(-dist, kind="stable")[: empty.size]
        centers[empty] = x[far]
        log.info("kmeans: reseeded %d empty cluster(s) from farthest frames", empty.size)
    return empty.size


@dataclass
class KMeansModel:
    centroids: np.ndarray
    counts: np.ndarray
    standardizer: Standardizer
    inertia_history: list = field(default_factory=list)

    @property
    def k(self):
        return self.centroids.shape[0]

    def to_bundle(self, hparams=None):
        return ModelBundle(
            "kmeans",
            dict(hparams or {}),
            {
                "centroids": self.centroids,
                "counts": self.counts,
                "std.mean": self.standardizer.mean,
                "std.scale": self.standardizer.std,
            },
        )

    @classmethod
    def from_bundle(cls, bundle):
        return cls(
            bundle["centroids"].astype(np.float64),
            bundle["counts"],
            Standardizer(bundle["std.mean"], bundle["std.scale"]),
        )


def kmeans_fit(features, k, batch_size=1024, iters=10, seed=0, lloyd_iters=2, standardize=True):
    """Minibatch K-Means (k-means++ seeding) followed by full-batch Lloyd refinement.

    ``iters`` full minibatch passes use per-center learning rates 1/count;
    then ``lloyd_iters`` full-batch iterations run, recording the inertia
    before each of them and after the last in ``inertia_history``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ClusterInputError("kmeans_fit needs a (frames, dims) matrix")
    if x.shape[0] < k:
        raise ClusterInputError(f"{x.shape[0]} frames cannot support k={k} clusters")
    scaler = Standardizer.fit(x) if standardize else Standardizer.identity(x.shape[1])
    z = scaler.transform(x)
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(z, k, rng)
    seen = np.zeros(k)
    n = z.shape[0]
    for _ in range(iters):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = z[order[lo : lo + batch_size]]
            idx, _ = nearest(batch, centers)
            for c in np.unique(idx):
                members = batch[idx == c]
                seen[c] += members.shape[0]
                rate = members.shape[0] / seen[c]
                centers[c] += rate * (members.mean(axis=0) - centers[c])
        idx, dist = nearest(z, centers)
        _reseed_empty(z, centers, idx, dist)
    history = []
    for _ in range(lloyd_iters):
        centers, idx, inertia = lloyd_step(z, centers)
        history.append(inertia)
    idx, dist = nearest(z, centers)
    history.append(float(dist.sum()))
    counts = np.bincount(idx, minlength=k)
    return KMeansModel(centers, counts, scaler, history)


def lloyd_step(z, centers):
    """One full-batch assignment + mean update. Returns inertia before the update."""
    idx, dist = nearest(z, centers)
    inertia = float(dist.sum())
    centers = centers.copy()
    if _reseed_empty(z, centers, idx, dist):
        idx, dist = nearest(z, centers)
    k = centers.shape[0]
    sums = np.zeros_like(centers)
    np.add.at(sums, idx, z)
    counts = np.bincount(idx, minlength=k)
    nonzero = counts > 0
    centers[nonzero] = sums[nonzero] / counts[nonzero, None]
    return centers, idx, inertia


def kmeans_inertia(model, features):
    _, dist = nearest(model.standardizer.transform(features), model.centroids)
    return float(dist.sum())


def kmeans_encode(model, features):
    """Nearest-centroid indices and the matching centroid vectors in feature space."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.centroids.shape[1]:
        raise ClusterInputError(
            f"frames have dim {x.shape[-1]}, model expects {model.centroids.shape[1]}"
        )
    idx, _ = nearest(model.standardizer.transform(x), model.centroids)
    return idx, model.standardizer.inverse(model.centroids[idx])


# -- GMM ----------------------------------------------------------------------

@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    standardizer: Standardizer
    loglik_history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def k(self):
        return self.weights.shape[0]

    def to_bundle(self, hparams=None):
        return ModelBundle(
            "gmm",
            dict(hparams or {}),
            {
                "weights": self.weights,
                "means": self.means,
                "variances": self.variances,
                "std.mean": self.standardizer.mean,
                "std.scale": self.standardizer.std,
            },
        )

    @classmethod
    def from_bundle(cls, bundle):
        return cls(
            bundle["weights"].astype(np.float64),
            bundle["means"].astype(np.float64),
            bundle["variances"].astype(np.float64),
            Standardizer(bundle["std.mean"], bundle["std.scale"]),
        )


def _log_joint(z, weights, means, variances):
    """log p(x, component) for every frame/component pair, shape (T, K)."""
    inv = 1.0 / variances
    quad = (z**2) @ inv.T - 2.0 * z @ (means * inv).T + (means**2 * inv).sum(axis=1)[None, :]
    log_det = np.log(variances).sum(axis=1)
    d = z.shape[1]
    return np.log(weights)[None, :] - 0.5 * (d * np.log(2 * np.pi) + log_det[None, :] + quad)


def gmm_fit(features, k, iters=25, seed=0, variance_floor_ratio=1e-6, standardize=True, init_iters=10):
    """EM for a diagonal GMM initialized from K-Means.

    ``loglik_history`` holds the mean per-frame log-likelihood before every
    M-step and once after the last one (``iters + 1`` values).
    """
    x = np.asarray(features, dtype=np.float64)
    if iters < 1:
        raise ClusterInputError("gmm_fit needs iters >= 1")
    if x.shape[0] < k:
        raise ClusterInputError(f"{x.shape[0]} frames cannot support k={k} components")
    km = kmeans_fit(x, k, iters=init_iters, seed=seed, standardize=standardize, lloyd_iters=1)
    scaler = km.standardizer
    z = scaler.transform(x)
    floor = variance_floor_ratio * z.var(axis=0)
    floor = np.where(floor > 0, floor, variance_floor_ratio)
    idx, _ = nearest(z, km.centroids)
    resp = np.zeros((z.shape[0], k))
    resp[np.arange(z.shape[0]), idx] = 1.0
    weights, means, variances = _m_step(z, resp, floor)
    model = GmmModel(weights, means, variances, scaler)
    for _ in range(iters):
        lj = _log_joint(z, model.weights, model.means, model.variances)
        norm = logsumexp(lj, axis=1)
        model.loglik_history.append(float(norm.mean()))
        resp = np.exp(lj - norm[:, None])
        model.weights, model.means, model.variances = _m_step(z, resp, floor)
        _reseed_degenerate(model, z, norm, floor)
    lj = _log_joint(z, model.weights, model.means, model.variances)
    model.loglik_history.append(float(logsumexp(lj, axis=1).mean()))
    return model


def _m_step(z, resp, floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.maximum(nk, 1e-300)[:, None]
    means = resp.T @ z / safe
    variances = resp.T @ (z**2) / safe - means**2
    variances = np.maximum(variances, floor[None, :])
    return weights, means, variances


def _reseed_degenerate(model, z, frame_loglik, floor):
    bad = np.flatnonzero(model.weights < 1e-8)
    if not bad.size:
        return
    worst = np.argsort(frame_loglik, kind="stable")[: bad.size]
    for comp, frame in zip(bad, worst):
        model.means[comp] = z[frame]
        model.variances[comp] = np.maximum(z.var(axis=0), floor)
        model.weights[comp] = 1.0 / z.shape[0]
        model.events.append(f"reseeded component {comp} at frame {frame}")
        log.warning("gmm: component %d collapsed (weight < 1e-8); reseeded", comp)
    model.weights /= model.weights.sum()


def gmm_log_posterior(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.means.shape[1]:
        raise ClusterInputError(f"frames have dim {x.shape[-1]}, model expects {model.means.shape[1]}")
    lj = _log_joint(model.standardizer.transform(x), model.weights, model.means, model.variances)
    return lj - logsumexp(lj, axis=1, keepdims=True)


def gmm_posterior(model, features):
    """Posteriogram p(component | frame) by Bayes' rule, rows summing to 1."""
    return np.exp(gmm_log_posterior(model, features))


def gmm_encode(model, features):
    post = gmm_posterior(model, features)
    return np.argmax(post, axis=1), post
