"""Visual vocabulary fitting and VLAD aggregation with hard assignment."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .exceptions import (
    DimensionMismatchError,
    MagicMismatchError,
    MissingArtifactError,
    NonFiniteError,
)

VOCAB_MAGIC = b"LGVC"
DEFAULT_CLUSTERS = 64
MAX_KEYPOINTS_PER_IMAGE = 2048


class Metric(IntEnum):
    COSINE = 0
    EUCLIDEAN = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        return cls[str(value).upper()]


@dataclass
class Vocabulary:
    centroids: np.ndarray
    metric: Metric = Metric.COSINE
    seed: int = 0

    def __post_init__(self):
        self.metric = Metric.parse(self.metric)
        self.centroids = check_matrix(self.centroids, "centroids", allow_empty=False)

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass
class VladDescriptor:
    """Global image descriptor. ``empty`` marks the all-zero descriptor."""

    values: np.ndarray
    empty: bool = False

    def __len__(self):
        return self.values.shape[0]


def _normalize_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _sq_dists(x, c):
    # exact per-pair differences keep ties symmetric; chunked for memory
    out = np.empty((x.shape[0], c.shape[0]))
    step = max(1, 2_000_000 // max(1, c.size))
    for s in range(0, x.shape[0], step):
        diff = x[s:s + step, None, :] - c[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _sq_dists_fast(x, c, xx):
    # expanded form for the Lloyd loop, where exact tie symmetry is irrelevant
    d2 = x @ c.T
    d2 *= -2.0
    d2 += xx[:, None]
    d2 += np.einsum("ij,ij->i", c, c)[None, :]
    return np.maximum(d2, 0.0, out=d2)


def _cluster_sums(x, labels, k):
    return np.stack([np.bincount(labels, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(x, n_clusters, seed=0, spherical=False, max_iter=100, tol=1e-6, return_history=False):
    """Lloyd's k-means with k-means++ seeding.

    With ``spherical=True`` the rows of ``x`` must already be unit-norm and
    centroids are renormalised after each update. Empty clusters are
    re-seeded from the points farthest from their current centroid.
    """
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, n_clusters, rng)
    history = []
    xx = np.einsum("ij,ij->i", x, x)
    for _ in range(max_iter):
        d2 = _sq_dists_fast(x, centers, xx)
        labels = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(x.shape[0]), labels]
        history.append(float(point_cost.sum()))

        counts = np.bincount(labels, minlength=n_clusters)
        sums = _cluster_sums(x, labels, n_clusters)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        if spherical:
            norms = np.linalg.norm(new, axis=1)
            ok = nz & (norms > 0)
            new[ok] /= norms[ok, None]
            new[nz & ~ok] = centers[nz & ~ok]
        empty = np.flatnonzero(~nz)
        if empty.size:
            far = np.argsort(-point_cost, kind="stable")
            for j, idx in zip(empty, far):
                new[j] = x[idx]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol and not empty.size:
            break
    if return_history:
        d2 = _sq_dists_fast(x, centers, xx)
        history.append(float(d2.min(axis=1).sum()))
        return centers, history
    return centers


def _stack_descriptors(descriptors, max_per_image, rng):
    if isinstance(descriptors, np.ndarray) and descriptors.ndim == 2:
        mats = [descriptors]
    else:
        mats = list(descriptors)
    rows = []
    for m in mats:
        m = np.asarray(m, dtype=np.float64)
        if max_per_image is not None and m.shape[0] > max_per_image:
            m = m[np.sort(rng.choice(m.shape[0], max_per_image, replace=False))]
        rows.append(m)
    if not rows:
        return np.empty((0, 0))
    return np.vstack(rows)


def fit_vocabulary(
    descriptors,
    n_clusters=DEFAULT_CLUSTERS,
    metric="cosine",
    seed=0,
    max_per_image=MAX_KEYPOINTS_PER_IMAGE,
    max_iter=100,
    tol=1e-6,
) -> Vocabulary:
    """Cluster local descriptors into a vocabulary.

    Args:
        descriptors: one stacked ``(N, D)`` array or a sequence of per-keyframe
            descriptor matrices. Per-keyframe matrices are subsampled to at
            most ``max_per_image`` rows.
        n_clusters: number of cluster prototypes.
        metric: ``"cosine"`` (spherical k-means) or ``"euclidean"``.
        seed: drives subsampling and k-means++ seeding.
    """
    metric = Metric.parse(metric)
    rng = np.random.default_rng([seed, 1])
    x = _stack_descriptors(descriptors, max_per_image, rng)
    x = check_matrix(x, "descriptors")
    if x.shape[0] < n_clusters:
        raise ValueError(f"need at least {n_clusters} descriptors, got {x.shape[0]}")
    if metric is Metric.COSINE:
        x = _normalize_rows(x)
    centers = kmeans(x, n_clusters, seed=seed, spherical=metric is Metric.COSINE, max_iter=max_iter, tol=tol)
    return Vocabulary(centers, metric, seed)


def assign(f, vocab: Vocabulary) -> int:
    """Hard-assign one descriptor; ties go to the lowest cluster index."""
    f = check_vector(f, "descriptor")
    if f.shape[0] != vocab.dim:
        raise DimensionMismatchError(f"descriptor length {f.shape[0]} != vocabulary dim {vocab.dim}")
    return int(assign_many(f[None, :], vocab)[0])


def assign_many(F, vocab: Vocabulary):
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if vocab.metric is Metric.COSINE:
        cn = _normalize_rows(vocab.centroids)
        return np.argmax(F @ cn.T, axis=1)
    return np.argmin(_sq_dists(F, vocab.centroids), axis=1)


def compute_vlad(descriptors, vocab: Vocabulary, intra_norm=True, weighting="residual") -> VladDescriptor:
    """Aggregate a keyframe's local descriptors into a VLAD vector.

    ``weighting="cosine"`` scales each residual by the cosine between the
    descriptor and its assigned centroid.
    """
    F = np.asarray(descriptors, dtype=np.float64)
    if F.ndim != 2 or (F.shape[0] and F.shape[1] != vocab.dim):
        raise DimensionMismatchError(
            f"descriptor matrix shape {F.shape} incompatible with vocabulary dim {vocab.dim}"
        )
    if not np.all(np.isfinite(F)):
        raise NonFiniteError("descriptors contain non-finite values")
    C = vocab.centroids
    size = C.shape[0] * C.shape[1]
    if F.shape[0] == 0:
        return VladDescriptor(np.zeros(size), empty=True)

    # summing in a canonical row order makes the output bit-identical under permutation
    F = F[np.lexsort(F.T[::-1])]
    labels = assign_many(F, vocab)
    resid = F - C[labels]
    if weighting == "cosine":
        fn = np.linalg.norm(F, axis=1)
        cn = np.linalg.norm(C[labels], axis=1)
        denom = fn * cn
        cos = np.divide((F * C[labels]).sum(axis=1), denom, out=np.zeros_like(denom), where=denom > 0)
        resid = resid * cos[:, None]
    elif weighting != "residual":
        raise ValueError(f"unknown weighting {weighting!r}")

    blocks = np.zeros_like(C)
    np.add.at(blocks, labels, resid)
    if intra_norm:
        blocks = _normalize_rows(blocks)
    v = blocks.ravel()
    n = np.linalg.norm(v)
    if n == 0:
        return VladDescriptor(v, empty=True)
    return VladDescriptor(v / n)


def vlad_similarity(a: VladDescriptor, b: VladDescriptor) -> float:
    if len(a) != len(b):
        raise DimensionMismatchError(f"descriptor lengths differ ({len(a)} != {len(b)})")
    if a.empty or b.empty:
        return -1.0
    na, nb = np.linalg.norm(a.values), np.linalg.norm(b.values)
    if na == 0 or nb == 0:
        return -1.0
    return float(np.dot(a.values, b.values) / (na * nb))


# --------------------------------------------------------------------------
# persistence

def save_vocabulary(vocab: Vocabulary, path):
    c = np.ascontiguousarray(vocab.centroids, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOCAB_MAGIC)
        fh.write(struct.pack("<IIBQ", c.shape[0], c.shape[1], int(vocab.metric), int(vocab.seed)))
        fh.write(c.tobytes())


def load_vocabulary(path) -> Vocabulary:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing vocabulary file {path}")
    raw = path.read_bytes()
    if raw[:4] != VOCAB_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {VOCAB_MAGIC!r}")
    hdr = struct.calcsize("<IIBQ")
    n, d, metric, seed = struct.unpack("<IIBQ", raw[4:4 + hdr])
    payload = raw[4 + hdr:]
    if len(payload) != 4 * n * d:
        raise DimensionMismatchError(f"{path}: header {n}x{d} does not match payload size")
    c = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    return Vocabulary(c, Metric(metric), seed)


# --------------------------------------------------------------------------
# estimator

class VladEncoder(TransformerMixin, BaseEstimator):
    """Fit a vocabulary on keyframe descriptors and encode keyframes as VLAD.

    ``X`` is a sequence of per-keyframe ``(N_K, N_KD)`` descriptor matrices;
    :meth:`transform` returns an ``(n_keyframes, n_clusters * N_KD)`` array.
    """

    def __init__(self, n_clusters=DEFAULT_CLUSTERS, metric="cosine", max_keypoints=MAX_KEYPOINTS_PER_IMAGE,
                 intra_norm=True, weighting="residual", random_state=0):
        self.n_clusters = n_clusters
        self.metric = metric
        self.max_keypoints = max_keypoints
        self.intra_norm = intra_norm
        self.weighting = weighting
        self.random_state = random_state

    def fit(self, X, y=None):
        self.vocabulary_ = fit_vocabulary(
            X, self.n_clusters, self.metric, self.random_state, self.max_keypoints
        )
        self.n_features_out_ = self.vocabulary_.n_clusters * self.vocabulary_.dim
        return self

    def encode(self, X):
        check_is_fitted(self, "vocabulary_")
        return [compute_vlad(F, self.vocabulary_, self.intra_norm, self.weighting) for F in X]

    def transform(self, X):
        return np.vstack([d.values for d in self.encode(X)]) if len(X) else np.empty((0, self.n_features_out_))
