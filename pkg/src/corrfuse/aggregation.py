"""Type-specific neighbor aggregation into the target EHR node.

Two messages are produced per patient: multi-head graph attention over
similar patients' EHR embeddings, and a recency-weighted sum of the patient's
own projected CXR embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffmath import (DimensionError, Tensor, fan_in_uniform, leaky_relu,
                       mask_from_present, masked_softmax, stack)

LEAKY_SLOPE = 0.01


@dataclass
class AggParams:
    """``W_E``: heads x d x (d/heads); ``a``: heads x 2(d/heads); ``W_C``: d x d."""

    W_E: Tensor
    a: Tensor
    W_C: Tensor

    @property
    def heads(self) -> int:
        return self.W_E.shape[0]

    @property
    def dim(self) -> int:
        return self.W_E.shape[1]

    @property
    def head_dim(self) -> int:
        return self.W_E.shape[2]

    def named(self, prefix: str = "agg"):
        return {f"{prefix}.W_E": self.W_E, f"{prefix}.a": self.a, f"{prefix}.W_C": self.W_C}


def init_agg(rng: np.random.Generator, dim: int, heads: int = 4) -> AggParams:
    if dim % heads:
        raise DimensionError(f"{heads} heads do not divide embedding size {dim}")
    hd = dim // heads
    return AggParams(
        W_E=fan_in_uniform(rng, (heads, dim, hd), fan_in=dim),
        a=fan_in_uniform(rng, (heads, 2 * hd), fan_in=2 * hd),
        W_C=fan_in_uniform(rng, (dim, dim)),
    )


def ehr_messages(h: Tensor, adjacency: np.ndarray, params: AggParams,
                 slope: float = LEAKY_SLOPE, return_attention: bool = False):
    """Graph-attention messages for every node of a batch.

    ``h`` is B x d, ``adjacency[s, t]`` says whether ``t`` is a neighbor of
    ``s``.  Returns the B x d message matrix and a boolean vector flagging
    nodes that have at least one neighbor; rows without neighbors are zero.
    """
    n, d = h.shape
    if d != params.dim:
        raise DimensionError(f"embeddings have size {d}, aggregation expects {params.dim}")
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (n, n):
        raise DimensionError(f"adjacency shape {adjacency.shape} does not match {n} nodes")
    heads, hd = params.heads, params.head_dim
    present = adjacency.any(axis=1)

    proj = h.reshape(1, n, d) @ params.W_E                      # heads x B x hd
    src = proj @ params.a[:, :hd].reshape(heads, hd, 1)         # heads x B x 1
    dst = (proj @ params.a[:, hd:].reshape(heads, hd, 1)).transpose(0, 2, 1)
    scores = leaky_relu(src + dst, slope)                       # heads x B x B
    # rows with no neighbor attend over a dummy full row and are zeroed below
    mask = mask_from_present(adjacency | ~present[:, None])
    alpha = masked_softmax(scores, mask[None], axis=-1)
    msg = (alpha @ proj).transpose(1, 0, 2).reshape(n, d)
    msg = msg * present[:, None].astype(np.float64)
    if return_attention:
        return msg, present, alpha.data * present[None, :, None]
    return msg, present


def aggregate_ehr_ehr(target: Tensor, neighbors: Sequence[Tensor], params: AggParams,
                      slope: float = LEAKY_SLOPE) -> tuple[Tensor, bool]:
    """Message for a single target node; ``(zeros, False)`` when no neighbors."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if not neighbors:
        return Tensor(np.zeros(params.dim)), False
    h = stack([target, *neighbors], axis=0)
    adj = np.zeros((h.shape[0],) * 2, dtype=bool)
    adj[0, 1:] = True
    msg, _ = ehr_messages(h, adj, params, slope)
    return msg[0], True


def temporal_weights(delta_ts) -> np.ndarray:
    """Softmax of the normalized acquisition times; later images weigh more."""
    dt = np.asarray(delta_ts, dtype=np.float64).reshape(-1)
    if dt.size == 0:
        raise ValueError("temporal_weights needs at least one CXR")
    e = np.exp(dt - dt.max())
    return e / e.sum()


def temporal_weight_matrix(owner: np.ndarray, delta_ts: np.ndarray, n_patients: int) -> np.ndarray:
    """B x M matrix whose row s holds patient s's weights over the batch CXRs."""
    owner = np.asarray(owner, dtype=np.int64)
    out = np.zeros((n_patients, owner.size))
    for p in np.unique(owner):
        idx = np.nonzero(owner == p)[0]
        out[p, idx] = temporal_weights(np.asarray(delta_ts)[idx])
    return out


def cxr_messages(cxr_h: Tensor | None, weight_matrix: np.ndarray, params: AggParams) -> Tensor:
    """Time-weighted CXR messages for a batch; B x d, zero rows for 0-CXR patients."""
    n = weight_matrix.shape[0]
    if cxr_h is None or weight_matrix.shape[1] == 0:
        return Tensor(np.zeros((n, params.dim)))
    if cxr_h.shape[0] != weight_matrix.shape[1]:
        raise DimensionError(f"{cxr_h.shape[0]} CXR embeddings vs {weight_matrix.shape[1]} weight columns")
    return Tensor(weight_matrix) @ (cxr_h @ params.W_C)


def aggregate_cxr(cxr_embeddings: Sequence[Tensor], weights, params: AggParams) -> Tensor:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(cxr_embeddings) != weights.size or weights.size == 0:
        raise DimensionError(f"{len(cxr_embeddings)} CXR embeddings vs {weights.size} weights")
    return cxr_messages(stack(list(cxr_embeddings), axis=0), weights[None, :], params)[0]
