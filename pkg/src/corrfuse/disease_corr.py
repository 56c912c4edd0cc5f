"""Label co-occurrence graph and the two-layer GCN over disease embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffmath import DimensionError, Tensor, fan_in_uniform, leaky_relu

logger = logging.getLogger(__name__)

GCN_SLOPE = 0.2


def count_cooccurrence(labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-label counts and the symmetric pair-count matrix (diagonal = counts)."""
    y = np.asarray(labels)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ValueError("count_cooccurrence needs a non-empty samples x labels matrix")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be multi-hot (0/1)")
    y = y.astype(np.int64)
    return y.sum(axis=0), y.T @ y


def conditional_matrix(counts, cooccur) -> np.ndarray:
    """``A[i, j] = P(label j | label i)`` off the diagonal; zero diagonal.

    Labels that never occur get an all-zero row.
    """
    counts = np.asarray(counts, dtype=np.float64)
    cooccur = np.asarray(cooccur, dtype=np.float64)
    empty = counts == 0
    if empty.any():
        logger.warning("labels %s never occur; their correlation rows are zero",
                       np.nonzero(empty)[0].tolist())
    A = np.divide(cooccur, counts[:, None], out=np.zeros_like(cooccur), where=~empty[:, None])
    np.fill_diagonal(A, 0.0)
    return A


def binarize(A, tau: float = 0.4) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"correlation threshold must lie in [0, 1], got {tau}")
    return (np.asarray(A) >= tau).astype(np.float64)


def normalize_adjacency(A_bin) -> np.ndarray:
    """Symmetric GCN normalization of ``max(A, A^T) + I``."""
    A_bin = np.asarray(A_bin, dtype=np.float64)
    if A_bin.ndim != 2 or A_bin.shape[0] != A_bin.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A_bin.shape}")
    sym = np.maximum(A_bin, A_bin.T)
    np.fill_diagonal(sym, 0.0)
    sym = sym + np.eye(sym.shape[0])
    deg = sym.sum(axis=1)
    return sym / np.sqrt(np.outer(deg, deg))


@dataclass
class DiseaseCorrelation:
    counts: np.ndarray
    cooccur: np.ndarray
    A: np.ndarray
    A_bin: np.ndarray
    A_hat: np.ndarray

    @property
    def n_labels(self) -> int:
        return self.A.shape[0]

    @property
    def Z(self) -> np.ndarray:
        """One-hot initial label embeddings."""
        return np.eye(self.n_labels)

    @classmethod
    def from_labels(cls, labels, tau: float = 0.4) -> "DiseaseCorrelation":
        counts, cooccur = count_cooccurrence(labels)
        A = conditional_matrix(counts, cooccur)
        A_bin = binarize(A, tau)
        return cls(counts, cooccur, A, A_bin, normalize_adjacency(A_bin))


@dataclass
class GCNParams:
    W1: Tensor
    W2: Tensor

    def named(self, prefix: str = "gcn"):
        return {f"{prefix}.W1": self.W1, f"{prefix}.W2": self.W2}


def init_gcn(rng: np.random.Generator, n_labels: int, out_dim: int,
             hidden: int | None = None) -> GCNParams:
    hidden = hidden or 2 * n_labels
    return GCNParams(fan_in_uniform(rng, (n_labels, hidden)), fan_in_uniform(rng, (hidden, out_dim)))


def gcn_forward(A_hat, Z, params: GCNParams, slope: float = GCN_SLOPE) -> Tensor:
    """``A_hat @ act(A_hat @ Z @ W1) @ W2``: one prototype row per disease."""
    A_hat = A_hat if isinstance(A_hat, Tensor) else Tensor(A_hat)
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    n = A_hat.shape[0]
    if A_hat.shape != (n, n) or Z.shape[0] != n or Z.shape[1] != params.W1.shape[0]:
        raise DimensionError(
            f"gcn_forward: A_hat {A_hat.shape}, Z {Z.shape}, W1 {params.W1.shape} are inconsistent")
    hidden = leaky_relu(A_hat @ (Z @ params.W1), slope)
    return A_hat @ (hidden @ params.W2)
