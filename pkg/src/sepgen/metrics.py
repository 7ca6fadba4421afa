"""Evaluation metrics over pluggable feature extractors.

Distribution distances (Frechet distance under a Gaussian assumption and an
unbiased kernel MMD^2), pairwise similarity metrics with per-item z-scores,
and the label-to-separation similarity spread. All functions are pure numpy.
"""

from __future__ import annotations

import abc
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NormalizationError, ShapeError


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, d)
    extractor_id: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ShapeError("features contain non-finite values")
        object.__setattr__(self, "features", feats)


@dataclass
class MetricReport:
    fid: float
    clip_fid: float
    kid: float
    ais: float
    ais_z: float
    iis: float
    iis_z: float
    num_generated: int
    num_reference: int
    extractor_ids: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "clip_fid": self.clip_fid,
            "kid": self.kid,
            "ais": self.ais,
            "ais_z": self.ais_z,
            "iis": self.iis,
            "iis_z": self.iis_z,
            "num_generated": self.num_generated,
            "num_reference": self.num_reference,
            "extractor_ids": dict(self.extractor_ids),
        }


def _check_dims(a: FeatureSet, b: FeatureSet) -> None:
    if a.features.shape[1] != b.features.shape[1]:
        raise ShapeError(
            f"feature dimensions differ: {a.features.shape[1]} vs {b.features.shape[1]}"
        )


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T

def fid(real_feats: FeatureSet, gen_feats: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    The cross-covariance square root is computed by eigendecomposition of the
    symmetrized product with negative eigenvalues clamped to zero.
    """
    _check_dims(real_feats, gen_feats)
    x, y = real_feats.features, gen_feats.features
    d = x.shape[1]
    if min(x.shape[0], y.shape[0]) < d:
        warnings.warn(
            f"fewer samples than feature dims ({min(x.shape[0], y.shape[0])} < {d}); "
            "covariance estimates will be poor"
        )
    mu_r, mu_g = x.mean(axis=0), y.mean(axis=0)
    cov_r = np.cov(x, rowvar=False)
    cov_g = np.cov(y, rowvar=False)
    root_g = _psd_sqrt(cov_g)
    cross = _psd_sqrt(root_g @ cov_r @ root_g)
    mean_term = float(np.sum((mu_r - mu_g) ** 2))
    return mean_term + float(np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))


def kid(real_feats: FeatureSet, gen_feats: FeatureSet) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y / d + 1)^3;
    within-set sums exclude the diagonal."""
    _check_dims(real_feats, gen_feats)
    x, y = real_feats.features, gen_feats.features
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ShapeError("kid needs at least 2 items per set")
    d = x.shape[1]
    k_xx = (x @ x.T / d + 1.0) ** 3
    k_yy = (y @ y.T / d + 1.0) ** 3
    k_xy = (x @ y.T / d + 1.0) ** 3
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


class ImageFeatureExtractor(abc.ABC):
    """Maps a batch of images (N, H, W, 3) in [0, 1] to features (N, d)."""

    extractor_id: str

    @abc.abstractmethod
    def image_features(self, images: np.ndarray) -> FeatureSet: ...


def clip_fid(real_imgs: np.ndarray, gen_imgs: np.ndarray, extractor: ImageFeatureExtractor) -> float:
    """Frechet distance computed in an alternate (semantic) embedding space."""
    return fid(extractor.image_features(real_imgs), extractor.image_features(gen_imgs))


@dataclass(frozen=True)
class PairwiseSimilarity:
    mean: float
    z_scores: np.ndarray
    mean_z: float


def pairwise_similarity(a_feats: FeatureSet, b_feats: FeatureSet) -> PairwiseSimilarity:
    """Mean cosine similarity of aligned rows plus per-item z-scores.

    For item i the z-score normalizes SIM(a_i, b_i) against the mean and
    standard deviation of {SIM(a_i, b_j) : j != i}. A zero standard deviation
    yields z_i = 0 with a degeneracy warning.
    """
    _check_dims(a_feats, b_feats)
    a, b = a_feats.features, b_feats.features
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"aligned sets must match in size: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n < 3:
        raise ShapeError("z-scores need at least 3 aligned pairs")
    norms_a = np.linalg.norm(a, axis=1)
    norms_b = np.linalg.norm(b, axis=1)
    if np.any(norms_a == 0) or np.any(norms_b == 0):
        raise NormalizationError("zero feature row")
    sims = (a @ b.T) / np.outer(norms_a, norms_b)
    diag = np.diag(sims)
    off = sims[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    mu = off.mean(axis=1)
    sigma = off.std(axis=1)
    z = np.zeros(n)
    degenerate = sigma == 0
    if np.any(degenerate):
        warnings.warn(f"{int(degenerate.sum())} items have zero cross-pair spread; z set to 0")
    ok = ~degenerate
    z[ok] = (diag[ok] - mu[ok]) / sigma[ok]
    return PairwiseSimilarity(mean=float(diag.mean()), z_scores=z, mean_z=float(z.mean()))


def semantic_spread(label_embeddings: np.ndarray, sep_embeddings: np.ndarray) -> float:
    """Standard deviation of all label-to-separation cosine similarities for
    one item. Values near zero mean the separations look alike to every
    label; alignment training should widen this."""
    lab = np.asarray(label_embeddings, dtype=np.float64)
    sep = np.asarray(sep_embeddings, dtype=np.float64)
    if lab.ndim != 2 or sep.ndim != 2:
        raise ShapeError("embeddings must be 2-D")
    norms_l = np.linalg.norm(lab, axis=1)
    norms_s = np.linalg.norm(sep, axis=1)
    if np.any(norms_l == 0) or np.any(norms_s == 0):
        raise NormalizationError("zero embedding row")
    sims = (lab @ sep.T) / np.outer(norms_l, norms_s)
    if sims.size < 2:
        raise ConfigError("spread needs at least 2 similarity values")
    return float(sims.std())
