"""Temperature-scaled contrastive loss over paired embedding batches.

Shared by the global (image-level) and local (region-level) branches: both
reduce to the same normalized cross-entropy over cosine similarities, they
only differ in what the embeddings represent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class ContrastiveError(ValueError):
    """Raised for invalid embedding batches or loss configuration."""


@dataclass
class ContrastiveConfig:
    """Settings for the temperature-scaled contrastive loss.

    ``include_positive_in_denominator`` switches between summing the
    denominator over negatives only (default) and the variant that also
    includes the positive pair.
    """

    temperature: float = 0.5
    include_positive_in_denominator: bool = False

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ContrastiveError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class EmbeddingBatch:
    """A batch of 2N embeddings with an explicit positive-pair mapping.

    ``pair_index[i]`` is the index of embedding i's positive partner. The
    mapping must be an involution without fixed points: every embedding has
    exactly one partner and is never its own.
    """

    vectors: torch.Tensor
    pair_index: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ContrastiveError(f"vectors must be (M, D), got shape {tuple(self.vectors.shape)}")
        m = self.vectors.shape[0]
        if self.pair_index is None:
            # default layout: first half pairs with second half
            if m % 2 != 0:
                raise ContrastiveError("default pairing needs an even batch")
            n = m // 2
            self.pair_index = torch.cat(
                [torch.arange(n, 2 * n), torch.arange(0, n)]
            )
        pairs = torch.as_tensor(self.pair_index, dtype=torch.long)
        if pairs.shape != (m,):
            raise ContrastiveError(f"pair_index must have shape ({m},)")
        idx = torch.arange(m)
        if (pairs == idx).any():
            raise ContrastiveError("pair_index has a fixed point (embedding paired with itself)")
        if not (pairs[pairs] == idx).all():
            raise ContrastiveError("pair_index is not an involution")
        self.pair_index = pairs


def cosine_similarity(u, v) -> float:
    """Cosine similarity of two vectors; zero-norm inputs are an error.

    A zero-norm embedding signals a collapsed representation, so it is
    rejected rather than silently mapped to 0.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContrastiveError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ContrastiveError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def nt_xent_loss(batch: EmbeddingBatch, cfg: ContrastiveConfig) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over a paired batch.

    For each anchor i with positive p(i):

        loss_i = -log( exp(sim(i, p(i)) / t) / sum_k exp(sim(i, k) / t) )

    where k ranges over all embeddings except i itself and, unless
    ``include_positive_in_denominator`` is set, except p(i) as well. The
    returned scalar is the mean over all 2N anchors. With the positive
    excluded from the denominator the loss may be negative; only finiteness
    and differentiability are guaranteed.
    """
    z = batch.vectors
    m = z.shape[0]
    if m < 4:
        raise ContrastiveError(f"need at least 2 sample pairs (4 embeddings), got {m}")
    norms = torch.linalg.vector_norm(z, dim=1)
    if not torch.isfinite(z).all():
        raise ContrastiveError("non-finite embedding")
    if (norms == 0).any():
        raise ContrastiveError("zero-norm embedding (collapsed representation)")

    zn = z / norms.unsqueeze(1)
    logits = (zn @ zn.T) / cfg.temperature

    idx = torch.arange(m, device=z.device)
    pos = logits[idx, batch.pair_index]

    mask = torch.zeros((m, m), dtype=torch.bool, device=z.device)
    mask[idx, idx] = True
    if not cfg.include_positive_in_denominator:
        mask[idx, batch.pair_index] = True
    denom = torch.logsumexp(logits.masked_fill(mask, float("-inf")), dim=1)

    return (denom - pos).mean()
