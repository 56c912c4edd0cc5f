"""Batch-level heterogeneous patient graph.

Each patient contributes one EHR (target) node.  Its own CXR images hang off it
through directed CXR -> EHR edges carrying the normalized acquisition time, and
EHR nodes of different patients are joined when the cosine similarity of their
embeddings exceeds a threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffmath import Tensor
from .records import CxrInput, PatientRecord

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0.0 when either is ~zero."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        logger.debug("cosine_similarity: near-zero vector, similarity set to 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(embeddings) -> np.ndarray:
    """All-pairs cosine similarity with the same zero-norm convention."""
    h = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    ok = norms >= NORM_EPS
    if not ok.all():
        logger.debug("similarity_matrix: %d near-zero embeddings get no edges", int((~ok).sum()))
    unit = np.zeros_like(h)
    unit[ok] = h[ok] / norms[ok, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def delta_t(cxr: CxrInput, window_length: float) -> float:
    """Acquisition time scaled into [0, 1] by the observation window."""
    t = cxr.time_hours
    if not 0.0 <= t <= window_length:
        raise ValueError(f"CXR time {t}h outside [0, {window_length}]h window")
    return t / window_length


@dataclass
class PGraph:
    """Heterogeneous graph over one batch.

    ``cxr_edges`` holds ``(cxr_index, patient_index, delta_t)`` where
    ``cxr_index`` addresses the flattened batch CXR list; ``ehr_edges`` holds
    ``(i, j, similarity)`` in both directions.
    """

    patient_ids: list[str]
    cxr_edges: list[tuple[int, int, float]] = field(default_factory=list)
    ehr_edges: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_cxr(self) -> int:
        return len(self.cxr_edges)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_patients, self.n_patients), dtype=bool)
        for i, j, _ in self.ehr_edges:
            adj[i, j] = True
        return adj

    def cxr_owner(self) -> np.ndarray:
        return np.array([p for _, p, _ in self.cxr_edges], dtype=np.int64)

    def cxr_delta_t(self) -> np.ndarray:
        return np.array([t for _, _, t in self.cxr_edges], dtype=np.float64)

    def cxr_counts(self) -> np.ndarray:
        return np.bincount(self.cxr_owner(), minlength=self.n_patients)


def build_pgraph(batch: list[PatientRecord], embeddings, delta: float = 0.6,
                 window_length: float = 48.0) -> PGraph:
    """Build the batch graph; similarity edges need ``cos > delta`` strictly.

    Edge decisions use the embedding values only, so thresholding never enters
    the gradient tape.
    """
    # delta >= 1 is allowed and simply yields no similarity edges
    if delta <= -1.0:
        raise ValueError(f"similarity threshold must exceed -1, got {delta}")
    graph = PGraph([r.patient_id for r in batch])
    k = 0
    for p, rec in enumerate(batch):
        for cxr in rec.cxrs:
            graph.cxr_edges.append((k, p, delta_t(cxr, window_length)))
            k += 1
    n = len(batch)
    if n > 1:
        sim = similarity_matrix(embeddings)
        ii, jj = np.nonzero(sim > delta)
        graph.ehr_edges = [(int(i), int(j), float(sim[i, j])) for i, j in zip(ii, jj) if i != j]
    return graph
