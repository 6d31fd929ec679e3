"""Group-based memory attention.

Each target memory row is compared (cosine) with every memory row of each
similar image.  A target row's best match per similar image, averaged over the
group and negated, goes through a softmax over target rows to give its
distinctiveness ``D``; the attention is ``A = omega * D + bias`` with both
scalars kept non-negative, and the decoder sees the rows scaled by ``A``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Module
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

_NEG = -1e9


class GmaConfigError(ValueError):
    pass


class GmaParams(Module):
    def __init__(self, omega: float = 1.0, bias: float = 0.5):
        self.omega = Parameter(omega, name="omega", constraint="nonnegative")
        self.bias = Parameter(bias, name="bias", constraint="nonnegative")


@dataclass
class GmaResult:
    similarity: list  # R_k, each (N_k, N_0)
    summary: list  # per-similar-image best match per target row, each (N_0,)
    distinctiveness: Tensor
    attention: Tensor
    weighted_memory: Tensor

    def to_json(self) -> dict:
        return {
            "R": [r.data.tolist() for r in self.similarity],
            "R_tilde": [r.data.tolist() for r in self.summary],
            "D": self.distinctiveness.data.tolist(),
            "A": self.attention.data.tolist(),
        }


def _as_tensor(m) -> Tensor:
    if hasattr(m, "vectors"):
        m = m.vectors
    return m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float64))


def similarity_matrix(target_memory, similar_memory) -> Tensor:
    """Cosine similarities ``R[i, j] = cos(similar_i, target_j)``; zero rows give 0."""
    m0, mk = _as_tensor(target_memory), _as_tensor(similar_memory)
    if m0.shape[-1] != mk.shape[-1]:
        raise ValueError(f"memory widths differ: {m0.shape} vs {mk.shape}")
    for name, m in (("target", m0), ("similar", mk)):
        zero = ~np.any(m.data != 0, axis=-1)
        if zero.any():
            log.debug("%s memory has %d zero-norm rows; their similarities are 0", name, int(zero.sum()))
    return T.normalize(mk) @ T.normalize(m0).T


def apply_attention(target_memory, attention) -> Tensor:
    m0, a = _as_tensor(target_memory), _as_tensor(attention)
    if a.ndim != 1 or a.shape[0] != m0.shape[0]:
        raise ValueError(f"attention of shape {a.shape} does not match {m0.shape[0]} memory rows")
    return m0 * a.reshape(-1, 1)


def distinctive_attention(target_memory, group_memories, params: GmaParams) -> GmaResult:
    group_memories = list(group_memories)
    if not group_memories:
        raise GmaConfigError("group attention needs at least one similar image (K >= 1)")
    m0 = _as_tensor(target_memory)
    sims = [similarity_matrix(m0, mk) for mk in group_memories]
    summary = [T.max(r, axis=0) for r in sims]
    mean_sim = T.stack(summary, axis=0).mean(axis=0)
    d = T.softmax(-mean_sim, axis=-1)
    a = params.omega * d + params.bias
    return GmaResult(sims, summary, d, a, apply_attention(m0, a))


def group_attention(memory: Tensor, valid: np.ndarray | None, params: GmaParams,
                    targets=None) -> tuple[Tensor, Tensor, Tensor]:
    """Batched attention with each image of one group acting as target.

    ``memory`` is (B, N, d) for the B group members (rows beyond an image's
    region count are padding, marked False in ``valid``).  ``targets`` selects
    which member positions act as targets (default: all).  Returns ``(D, A,
    M')`` with shapes (n_targets, N), (n_targets, N), (n_targets, N, d).
    """
    b, n, dm = memory.shape
    if b < 2:
        raise GmaConfigError("group attention needs at least one similar image (K >= 1)")
    if valid is None:
        valid = np.ones((b, n), dtype=bool)
    targets = list(range(b)) if targets is None else list(targets)
    unit = T.normalize(memory)
    flat = unit.reshape(b * n, dm)
    # sims[k, i, t, j] = cos(memory[k, i], memory[t, j])
    sims = (flat @ flat.T).reshape(b, n, b, n)
    if not valid.all():
        sims = sims + np.where(valid, 0.0, _NEG)[:, :, None, None]
    best = T.max(sims, axis=1)  # (k, t, j)
    weights = np.zeros((b, len(targets)))
    for col, t in enumerate(targets):
        weights[:, col] = 1.0 / (b - 1)
        weights[t, col] = 0.0
    mean_sim = (best[:, targets, :] * weights[:, :, None]).sum(axis=0)  # (targets, j)
    logits = -mean_sim
    tvalid = valid[targets]
    if not tvalid.all():
        logits = logits + np.where(tvalid, 0.0, _NEG)
    d = T.softmax(logits, axis=-1)
    a = params.omega * d + params.bias
    weighted = memory[targets] * a.reshape(len(targets), n, 1)
    return d, a, weighted
