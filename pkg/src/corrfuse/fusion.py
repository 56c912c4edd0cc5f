"""Correlation-guided attention: per-disease attention over the three sources.

For patient ``s`` the sources are stacked as rows ``[h_ehr, m_ehr_ehr,
m_ehr_cxr]``.  Each disease prototype is projected to a query; keys and values
are projections of the stack, and absent sources are removed with an additive
``-inf`` mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import (DimensionError, Tensor, fan_in_uniform, mask_from_present,
                       masked_softmax, stack)

SOURCES = ("ehr", "ehr_ehr", "ehr_cxr")


@dataclass
class FusionParams:
    """Square ``W_q``, ``W_k``, ``W_v`` plus the shared query used by the no-CGA variant."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    g: Tensor

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    def named(self, prefix: str = "fusion"):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W_q", "W_k", "W_v", "g")}


def init_fusion(rng: np.random.Generator, dim: int) -> FusionParams:
    return FusionParams(fan_in_uniform(rng, (dim, dim)), fan_in_uniform(rng, (dim, dim)),
                        fan_in_uniform(rng, (dim, dim)), fan_in_uniform(rng, (1, dim), fan_in=dim))


@dataclass
class SourceStack:
    """``T`` is (B x) 3 x d; ``mask`` is the matching (B x) 3 additive mask."""

    T: Tensor
    mask: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return np.isfinite(self.mask)


def stack_features(h_ehr, m_ee, m_ec, has_neighbors, has_cxr) -> SourceStack:
    """Stack the three sources along axis -2 and build the availability mask.

    Works for a single patient (vectors of length d, scalar flags) or a batch
    (B x d matrices, length-B flags).
    """
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in (h_ehr, m_ee, m_ec)]
    if len({p.shape for p in parts}) != 1:
        raise DimensionError(f"source shapes differ: {[p.shape for p in parts]}")
    axis = 0 if parts[0].ndim == 1 else 1
    T = stack(parts, axis=axis)
    nb = np.asarray(has_neighbors, dtype=bool)
    cx = np.asarray(has_cxr, dtype=bool)
    present = np.stack([np.ones_like(nb), nb, cx], axis=-1)
    return SourceStack(T, mask_from_present(present))


def attention_weights(stack_: SourceStack, queries: Tensor, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Attention of every query over the sources plus the projected values.

    ``queries`` is Q x d.  For a batched stack returns alpha as B x Q x 3 and
    values as B x 3 x d.
    """
    T = stack_.T
    d = params.dim
    if T.shape[-1] != d or queries.shape[-1] != d:
        raise DimensionError(f"fusion dim {d} vs stack {T.shape} and queries {queries.shape}")
    batched = T.ndim == 3
    if not batched:
        T = T.reshape(1, *T.shape)
    mask = np.asarray(stack_.mask).reshape(T.shape[0], 1, 3)
    q = queries @ params.W_q                     # Q x d
    k = T @ params.W_k                           # B x 3 x d
    v = T @ params.W_v                           # B x 3 x d
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))   # B x Q x 3
    alpha = masked_softmax(scores, mask, axis=-1)
    return alpha, v


def fuse_batch(stack_: SourceStack, prototypes: Tensor, params: FusionParams,
               shared_query: bool = False) -> tuple[Tensor, Tensor]:
    """Fused representation per (patient, disease): B x N x d, with alpha B x N x 3.

    With ``shared_query`` every disease uses the learned global query ``g``
    instead of its prototype (plain self-attention over the stack).
    """
    n_labels = prototypes.shape[0]
    if shared_query:
        alpha, v = attention_weights(stack_, params.g, params)
        fused = alpha @ v                                          # B x 1 x d
        ones = Tensor(np.ones((1, n_labels, 1)))
        return fused * ones, alpha * ones
    alpha, v = attention_weights(stack_, prototypes, params)
    return alpha @ v, alpha


def cga_attend(stack_: SourceStack, query, params: FusionParams) -> Tensor:
    """Single patient, single disease: length-d fused vector."""
    query = query if isinstance(query, Tensor) else Tensor(query)
    alpha, v = attention_weights(stack_, query.reshape(1, -1), params)
    return (alpha @ v).reshape(-1)


def fuse_all_diseases(stack_: SourceStack, prototypes, params: FusionParams) -> Tensor:
    """Single patient: N x d, row n attends with prototype n."""
    prototypes = prototypes if isinstance(prototypes, Tensor) else Tensor(prototypes)
    fused, _ = fuse_batch(stack_, prototypes, params)
    return fused.reshape(prototypes.shape[0], params.dim)
