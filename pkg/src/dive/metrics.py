"""Metric kernels: FID, class-distance statistics and CMC/mAP retrieval.

All functions are pure and operate on float64 numpy arrays.  Moment
summaries combine exactly, so shards can be reduced in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Modality

__all__ = [
    "FeatureSet",
    "GaussianSummary",
    "NotPSDError",
    "DistanceStats",
    "RetrievalResult",
    "fid",
    "moment_summary",
    "class_distances",
    "cmc_map",
    "l2_normalize",
]

PSD_TOL = 1e-8
NORM_TOL = 1e-6


class NotPSDError(FloatingPointError, ValueError):
    """A covariance (or covariance product) is negative beyond tolerance."""


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


@dataclass(frozen=True)
class FeatureSet:
    """Feature rows with identity, modality and (optional) camera labels."""

    matrix: np.ndarray
    labels: np.ndarray
    modalities: np.ndarray
    cameras: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise ValueError("feature matrix has non-finite entries")
        n = m.shape[0]
        labels = np.asarray(self.labels)
        mods = np.asarray([Modality(k).value for k in self.modalities], dtype=object) \
            if len(self.modalities) else np.zeros(0, dtype=object)
        if labels.shape != (n,) or mods.shape != (n,):
            raise ValueError("labels and modalities must have one entry per row")
        cams = None
        if self.cameras is not None:
            cams = np.asarray(self.cameras)
            if cams.shape != (n,):
                raise ValueError("cameras must have one entry per row")
        if self.normalized and n and np.any(np.abs(np.linalg.norm(m, axis=1) - 1.0) > NORM_TOL):
            raise ValueError("normalized FeatureSet rows must have unit L2 norm")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def normalize(self) -> "FeatureSet":
        return FeatureSet(l2_normalize(self.matrix), self.labels, self.modalities, self.cameras,
                          True)

    def concat(self, other: "FeatureSet") -> "FeatureSet":
        cams = None
        if self.cameras is not None and other.cameras is not None:
            cams = np.concatenate([self.cameras, other.cameras])
        return FeatureSet(np.vstack([self.matrix, other.matrix]),
                          np.concatenate([self.labels, other.labels]),
                          np.concatenate([self.modalities, other.modalities]), cams,
                          self.normalized and other.normalized)


@dataclass(frozen=True)
class GaussianSummary:
    """Sample mean, unbiased covariance and the count they came from."""

    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = mu.shape[0]
        if cov.shape != (d, d):
            raise ValueError("covariance shape must be (d, d)")
        if np.max(np.abs(cov - cov.T), initial=0.0) > PSD_TOL:
            raise ValueError("covariance is not symmetric")
        if d and np.linalg.eigvalsh(cov).min() < -PSD_TOL * max(1.0, float(np.abs(cov).max())):
            raise NotPSDError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    def combine(self, other: "GaussianSummary") -> "GaussianSummary":
        """Exact summary of the union of both underlying samples."""
        if self.mean.shape != other.mean.shape:
            raise ValueError("dimension mismatch")
        na, nb = self.n, other.n
        if na < 1 or nb < 1:
            raise ValueError("combine needs counts on both summaries")
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * (nb / n)
        scatter = (self.cov * (na - 1) + other.cov * (nb - 1)
                   + np.outer(delta, delta) * (na * nb / n))
        cov = scatter / (n - 1)
        return GaussianSummary(mean, (cov + cov.T) / 2, n)


def moment_summary(features: FeatureSet | np.ndarray) -> GaussianSummary:
    x = features.matrix if isinstance(features, FeatureSet) else np.asarray(features, np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("moment_summary needs at least two rows")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (x.shape[0] - 1)
    return GaussianSummary(mean, (cov + cov.T) / 2, x.shape[0])


def _sqrt_psd(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    tol = PSD_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < -tol:
        raise NotPSDError(f"{what} has eigenvalue {w.min():.3g} below tolerance")
    return np.sqrt(np.clip(w, 0.0, None)), v


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(Sa Sb)^(1/2)`` is computed from the eigenvalues of the
    symmetric matrix ``Sa^(1/2) Sb Sa^(1/2)``, clamping tiny negatives to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    s, v = _sqrt_psd(a.cov, "first covariance")
    root_a = (v * s) @ v.T
    inner = root_a @ b.cov @ root_a
    w, _ = _sqrt_psd(inner, "covariance product")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * w.sum())
    return max(value, 0.0)


# -- class distances ----------------------------------------------------------

@dataclass(frozen=True)
class DistanceStats:
    mean: float
    median: float
    count: int
    histogram: np.ndarray = field(repr=False)
    bin_edges: np.ndarray = field(repr=False)


def _stats(d: np.ndarray, edges: np.ndarray) -> DistanceStats:
    hist, _ = np.histogram(d, bins=edges)
    return DistanceStats(float(d.mean()), float(np.median(d)), int(d.size), hist, edges)


def class_distances(features: FeatureSet, normalize: bool = True, cross_modality: bool = True,
                    bins: int = 20) -> tuple[DistanceStats, DistanceStats]:
    """Pairwise Euclidean distances split into same- and different-identity pairs.

    With ``cross_modality`` only pairs of one visible and one infrared row
    count, so the intra statistic measures how far a synthesized infrared
    image drifts from its identity's visible images.
    """
    x = l2_normalize(features.matrix) if normalize else features.matrix
    labels = features.labels
    if len(np.unique(labels)) < 2:
        raise ValueError("class_distances needs at least two identities")
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    same = labels[:, None] == labels[None, :]
    if cross_modality:
        vis = features.modalities == Modality.VISIBLE.value
        ir = ~vis
        for ident in np.unique(labels):
            rows = labels == ident
            if not (vis & rows).any() or not (ir & rows).any():
                raise ValueError(f"identity {ident} lacks rows in both modalities")
        pair = vis[:, None] & ir[None, :]
    else:
        pair = np.triu(np.ones_like(same), k=1)
    intra, inter = d[pair & same], d[pair & ~same]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("degenerate label structure: no intra or no inter pairs")
    top = max(float(d.max()), 1e-12)
    edges = np.linspace(0.0, top, bins + 1)
    return _stats(intra, edges), _stats(inter, edges)


# -- retrieval ----------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalResult:
    cmc: np.ndarray  # cmc[k-1] = fraction of evaluated queries matched within top k
    mAP: float
    evaluated: int
    skipped: int

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def cmc_map(query: FeatureSet, gallery: FeatureSet, normalize: bool = True,
            max_rank: int | None = None) -> RetrievalResult:
    """CMC curve and mAP for Euclidean retrieval.

    For each query, gallery rows sharing both its identity and its camera
    (modality and camera id) are removed.  Rankings use a stable sort, so
    equal distances are ordered by gallery index.  Queries left with no
    correct gallery row are skipped and counted.
    """
    if query.matrix.shape[1] != gallery.matrix.shape[1]:
        raise ValueError("query and gallery feature widths differ")
    q = l2_normalize(query.matrix) if normalize else query.matrix
    g = l2_normalize(gallery.matrix) if normalize else gallery.matrix
    ng = g.shape[0]
    max_rank = ng if max_rank is None else min(max_rank, ng)
    hits = np.zeros(max(max_rank, 1))
    aps = []
    skipped = 0
    qcam = query.cameras if query.cameras is not None else np.full(len(query), -1)
    gcam = gallery.cameras if gallery.cameras is not None else np.full(ng, -1)
    for i in range(q.shape[0]):
        same_id = gallery.labels == query.labels[i]
        same_cam = (gallery.modalities == query.modalities[i]) & (gcam == qcam[i])
        keep = ~(same_id & same_cam)
        dist = ((g - q[i]) ** 2).sum(1)
        order = np.argsort(dist, kind="stable")
        order = order[keep[order]]
        match = same_id[order]
        if not match.any():
            skipped += 1
            continue
        first = int(np.argmax(match))
        if first < max_rank:
            hits[first:] += 1
        pos = np.flatnonzero(match)
        aps.append(float(np.mean(np.arange(1, pos.size + 1) / (pos + 1))))
    evaluated = len(aps)
    cmc = hits / evaluated if evaluated else hits
    return RetrievalResult(cmc[:max(max_rank, 1)], float(np.mean(aps)) if aps else 0.0,
                           evaluated, skipped)
