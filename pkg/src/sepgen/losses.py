"""Stage-1 training objectives.

Covers the negative SI-SDR reconstruction measure, the bipartition-minimum
mixture reconstruction loss, a differentiable Spearman ranking loss with an
exact (non-differentiable) oracle, the soft-assignment step, the symmetric
contrastive loss, and the linear loss-weight schedule.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .errors import ConfigError, DegenerateSignalError, NormalizationError, ShapeError


@dataclass(frozen=True)
class Bipartition:
    """Ordered split of source indices: `left` reconstructs the first mixture,
    `right` the second."""

    left: tuple[int, ...]
    right: tuple[int, ...]


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float  # weight on the bipartition reconstruction term
    contrastive: float
    ranking: float

    def __post_init__(self):
        for name, v in (
            ("reconstruction", self.reconstruction),
            ("contrastive", self.contrastive),
            ("ranking", self.ranking),
        ):
            if v < 0:
                raise ConfigError(f"{name} weight must be non-negative, got {v}")


def si_sdr_loss(
    reference: torch.Tensor, estimate: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Negative scale-invariant SDR of `estimate` against `reference`.

    Broadcasts over leading dimensions; the last dimension is time. The
    stabilizer `eps` is added to both numerator and denominator, so a perfect
    reconstruction returns a finite floor instead of -inf.
    """
    if reference.shape[-1] != estimate.shape[-1]:
        raise ShapeError(
            f"length mismatch: {reference.shape[-1]} vs {estimate.shape[-1]}"
        )
    if not bool((reference.abs().sum(dim=-1) > 0).all()):
        raise DegenerateSignalError("reference signal is identically zero")
    return _si_sdr_unchecked(reference, estimate, eps)


def _si_sdr_unchecked(reference, estimate, eps):
    ref_energy = (reference * reference).sum(dim=-1, keepdim=True)
    alpha = (estimate * reference).sum(dim=-1, keepdim=True) / ref_energy
    scaled = alpha * reference
    num = (scaled * scaled).sum(dim=-1) + eps
    den = ((scaled - estimate) ** 2).sum(dim=-1) + eps
    return -10.0 * torch.log10(num / den)


@functools.lru_cache(maxsize=None)
def enumerate_bipartitions(num_sources: int) -> tuple[Bipartition, ...]:
    """All 2^M - 2 ordered bipartitions of {0..M-1} into two non-empty sets."""
    if num_sources < 2:
        raise ConfigError("bipartitions need at least 2 sources")
    out = []
    for mask in range(1, 2**num_sources - 1):
        left = tuple(i for i in range(num_sources) if mask >> i & 1)
        right = tuple(i for i in range(num_sources) if not mask >> i & 1)
        out.append(Bipartition(left, right))
    return tuple(out)


@functools.lru_cache(maxsize=None)
def _membership_matrix(num_sources: int) -> torch.Tensor:
    parts = enumerate_bipartitions(num_sources)
    mat = torch.zeros(len(parts), num_sources, dtype=torch.float64)
    for row, part in enumerate(parts):
        mat[row, list(part.left)] = 1.0
    return mat


def reconstruction_loss(
    m1: torch.Tensor,
    m2: torch.Tensor,
    separations: torch.Tensor,
    eps: float = 1e-8,
) -> tuple[torch.Tensor, Bipartition]:
    """Minimum over all ordered bipartitions of the summed SI-SDR losses.

    `separations` has shape (M, L); `m1` and `m2` are length-L waveform
    tensors. Returns the minimal loss and the minimizing bipartition.
    """
    losses, idx = reconstruction_loss_batch(
        m1.unsqueeze(0), m2.unsqueeze(0), separations.unsqueeze(0), eps
    )
    parts = enumerate_bipartitions(separations.shape[0])
    return losses[0], parts[int(idx[0])]


def reconstruction_loss_batch(
    m1: torch.Tensor,
    m2: torch.Tensor,
    separations: torch.Tensor,
    eps: float = 1e-8,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched bipartition minimum: inputs (B, L), (B, L), (B, M, L); returns
    per-item losses (B,) and argmin bipartition indices (B,)."""
    if separations.ndim != 3:
        raise ShapeError("separations must have shape (B, M, L)")
    num_sources = separations.shape[1]
    if num_sources < 2:
        raise ConfigError("reconstruction loss needs at least 2 sources")
    if m1.shape[-1] != m2.shape[-1] or m1.shape[-1] != separations.shape[-1]:
        raise ShapeError("mixtures and separations must share the time length")
    member = _membership_matrix(num_sources).to(separations.dtype)
    est1 = torch.einsum("pm,bml->bpl", member, separations)
    est2 = torch.einsum("pm,bml->bpl", member.mul(-1).add(1), separations)
    total = si_sdr_loss(m1.unsqueeze(1), est1, eps) + si_sdr_loss(
        m2.unsqueeze(1), est2, eps
    )
    idx = total.argmin(dim=1)
    return total.gather(1, idx.unsqueeze(1)).squeeze(1), idx


def soft_ranks(values: torch.Tensor, smoothing: float) -> torch.Tensor:
    """Differentiable ascending ranks via pairwise logistic comparisons.

    At exact ties this reproduces average ranks; as the pairwise gaps grow
    relative to `smoothing`, it converges to the hard ranks.
    """
    diff = (values.unsqueeze(-1) - values.unsqueeze(-2)) / smoothing
    comparisons = torch.sigmoid(diff)
    return 1.0 + comparisons.sum(dim=-1) - 0.5


def spearman_rank_loss(sims: torch.Tensor, smoothing: float = 1e-3) -> torch.Tensor:
    """1 minus the (soft) Spearman correlation between `sims` and its
    descending sort. 0 when already descending, 2 when ascending.

    A constant vector is a declared degenerate case: returns 0 with zero
    gradient.
    """
    if sims.ndim != 1 or sims.shape[0] < 2:
        raise ConfigError("ranking loss needs a vector of at least 2 similarities")
    if bool((sims == sims[0]).all()):
        return sims.sum() * 0.0
    ranks = soft_ranks(sims, smoothing)
    target = torch.sort(ranks, descending=True).values
    return 1.0 - _pearson(ranks, target)


def _pearson(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ac = a - a.mean()
    bc = b - b.mean()
    return (ac * bc).sum() / torch.sqrt((ac * ac).sum() * (bc * bc).sum())


def spearman_rank_loss_exact(sims: np.ndarray) -> float:
    """Exact oracle: Pearson correlation of average-tie ranks against the
    ranks of the descending sort. Non-differentiable; for verification."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 1 or sims.shape[0] < 2:
        raise ConfigError("ranking loss needs a vector of at least 2 similarities")
    if np.all(sims == sims[0]):
        return 0.0
    ranks = stats.rankdata(sims, method="average")
    target = np.sort(ranks)[::-1]
    corr = np.corrcoef(ranks, target)[0, 1]
    return float(1.0 - corr)


def _normalize_rows(matrix: torch.Tensor, what: str) -> torch.Tensor:
    norms = matrix.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NormalizationError(f"zero row in {what}")
    return matrix / norms


def soft_assign(
    audio_emb: torch.Tensor, text_emb: torch.Tensor, tau: float = 1e-2
) -> torch.Tensor:
    """Temperature-scaled soft pairing of each audio row with a convex
    combination of text embeddings. Shapes: (M, D) x (M', D) -> (M, D)."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    a = _normalize_rows(audio_emb, "audio embeddings")
    t = _normalize_rows(text_emb, "text embeddings")
    weights = torch.softmax(a @ t.T / tau, dim=-1)
    return weights @ text_emb


def contrastive_loss(
    audio_emb: torch.Tensor, assigned_text: torch.Tensor, tau_prime
) -> torch.Tensor:
    """Symmetric cross-entropy over the scaled cosine-similarity matrix,
    matching row i of the audio embeddings with row i of the soft-assigned
    text embeddings."""
    if audio_emb.shape[0] != assigned_text.shape[0]:
        raise ShapeError(
            f"row count mismatch: {audio_emb.shape[0]} vs {assigned_text.shape[0]}"
        )
    tau_value = float(torch.as_tensor(tau_prime).detach())
    if tau_value <= 0:
        raise ConfigError(f"tau_prime must be positive, got {tau_value}")
    a = _normalize_rows(audio_emb, "audio embeddings")
    t = _normalize_rows(assigned_text, "assigned text embeddings")
    logits = a @ t.T / tau_prime
    m = logits.shape[0]
    rows = torch.log_softmax(logits, dim=1).diagonal()
    cols = torch.log_softmax(logits, dim=0).diagonal()
    return -(rows.sum() + cols.sum()) / (2 * m)


class ContrastiveTemperature(torch.nn.Module):
    """Trainable contrastive temperature, stored in log space so it stays
    positive under unconstrained optimization."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        if init <= 0:
            raise ConfigError(f"temperature init must be positive, got {init}")
        self.log_tau = torch.nn.Parameter(torch.tensor(float(np.log(init)), dtype=torch.float64))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()


def stage1_loss(rec, cl, rank, weights: LossWeights):
    """Weighted combination of the three stage-1 terms. Zero weights
    contribute exactly-zero gradients to the corresponding term."""
    return (
        weights.reconstruction * rec
        + weights.contrastive * cl
        + weights.ranking * rank
    )


def schedule_weights(current_epoch: int, total_epochs: int) -> LossWeights:
    """Linear schedule: reconstruction weight falls from 1 to 0 across the run
    while the alignment weights rise from 0 to 1."""
    if total_epochs < 2:
        raise ConfigError("schedule needs at least 2 epochs")
    if not 1 <= current_epoch <= total_epochs:
        raise ConfigError(
            f"epoch {current_epoch} outside [1, {total_epochs}]"
        )
    lam = 1.0 - (current_epoch - 1) / (total_epochs - 1)
    return LossWeights(reconstruction=lam, contrastive=1.0 - lam, ranking=1.0 - lam)
