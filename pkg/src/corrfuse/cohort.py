"""Synthetic multi-modal ICU cohorts with planted, modality-specific signal.

Labels come in co-occurrence blocks.  Each block is switched on by a latent
factor, and the block is assigned one evidence source:

* ``ehr``      the factor shifts the EHR time series along a fixed direction;
* ``cxr``      the factor shifts the CXR feature vectors (absent without CXR);
* ``neighbor`` the factor is shared by a patient cluster, and the EHR only
  carries a weak, noisy cluster signature, so pooling similar patients helps.

Within an active block every label fires independently with probability
``block_cooccurrence``, which is then the designed value of the conditional
co-occurrence ``P(j | i)`` for two labels of the same block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from statistics import NormalDist

import numpy as np

from .config import ConfigError, load_json, validate
from .records import CxrInput, EhrInput, PatientRecord

FORMAT_VERSION = 1
SOURCES = ("ehr", "cxr", "neighbor")

_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}

COHORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "n_patients": _POS_INT,
        "n_labels": _POS_INT,
        "n_features": _POS_INT,
        "cxr_dim": _POS_INT,
        "time_steps": _POS_INT,
        "window_length": {"type": "number", "exclusiveMinimum": 0},
        "cxr_availability_rate": _RATE,
        "cxr_count_mean": {"type": "number", "minimum": 1},
        "label_blocks": {
            "type": ["array", "null"],
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        },
        "block_size": _POS_INT,
        "block_cooccurrence": _RATE,
        "block_prevalence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "modality_assignment": {"type": ["array", "null"], "items": {"enum": list(SOURCES)}},
        "ehr_signal": _NONNEG,
        "cxr_signal": _NONNEG,
        "neighbor_signal": _NONNEG,
        "cluster_share": _RATE,
        "ehr_noise": _NONNEG,
        "cxr_noise": _NONNEG,
        "ehr_missing_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_clusters": _POS_INT,
        "label_noise": _RATE,
        "relevant_cxr": {"enum": ["all", "not_latest"]},
        "seed": {"type": "integer", "minimum": 0},
    },
}


@dataclass
class CohortSpec:
    n_patients: int = 200
    n_labels: int = 25
    n_features: int = 17
    cxr_dim: int = 32
    time_steps: int = 12
    window_length: float = 48.0
    cxr_availability_rate: float = 0.6
    cxr_count_mean: float = 1.89
    label_blocks: list[list[int]] | None = None
    block_size: int = 5
    block_cooccurrence: float = 0.7
    block_prevalence: float = 0.25
    modality_assignment: list[str] | None = None
    ehr_signal: float = 1.0
    cxr_signal: float = 1.0
    neighbor_signal: float = 1.0
    cluster_share: float = 0.9
    ehr_noise: float = 1.0
    cxr_noise: float = 1.0
    ehr_missing_rate: float = 0.2
    n_clusters: int = 4
    label_noise: float = 0.0
    relevant_cxr: str = "all"
    seed: int = 0

    def __post_init__(self):
        validate(self.to_dict(), COHORT_SCHEMA, "cohort spec")
        covered = sorted(i for block in self.blocks() for i in block)
        if covered != list(range(self.n_labels)):
            raise ConfigError("label blocks must cover every label exactly once")
        if len(self.sources()) != len(self.blocks()):
            raise ConfigError("modality_assignment needs one entry per label block")

    @classmethod
    def from_dict(cls, obj: dict) -> "CohortSpec":
        validate(obj, COHORT_SCHEMA, "cohort spec")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})

    @classmethod
    def from_file(cls, path) -> "CohortSpec":
        return cls.from_dict(load_json(path, "cohort spec"))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    def blocks(self) -> list[list[int]]:
        if self.label_blocks is not None:
            return [list(b) for b in self.label_blocks]
        return [list(range(s, min(s + self.block_size, self.n_labels)))
                for s in range(0, self.n_labels, self.block_size)]

    def sources(self) -> list[str]:
        if self.modality_assignment is not None:
            return list(self.modality_assignment)
        return [SOURCES[i % len(SOURCES)] for i in range(len(self.blocks()))]


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    """Draw ``spec.n_patients`` records; patient ``i`` uses its own RNG stream."""
    blocks, sources = spec.blocks(), spec.sources()
    g = _stream(spec.seed, 0)
    ehr_dirs = _unit_rows(g, len(blocks), spec.n_features)
    cxr_dirs = _unit_rows(g, len(blocks), spec.cxr_dim)
    signatures = _unit_rows(g, spec.n_clusters, spec.n_features)
    cluster_factor = g.standard_normal((spec.n_clusters, len(blocks)))
    cutoff = NormalDist().inv_cdf(1.0 - spec.block_prevalence)
    share = np.sqrt(spec.cluster_share)
    own = np.sqrt(1.0 - spec.cluster_share)
    is_ehr = np.array([s == "ehr" for s in sources])
    is_cxr = np.array([s == "cxr" for s in sources])
    is_nb = np.array([s == "neighbor" for s in sources])

    records = []
    for i in range(spec.n_patients):
        rng = _stream(spec.seed, i + 1)
        cluster = int(rng.integers(spec.n_clusters))
        factor = rng.standard_normal(len(blocks))
        factor = np.where(is_nb, share * cluster_factor[cluster] + own * factor, factor)

        labels = np.zeros(spec.n_labels, dtype=np.int8)
        fires = rng.random(spec.n_labels) < spec.block_cooccurrence
        for b, block in enumerate(blocks):
            if factor[b] > cutoff:
                labels[block] = fires[block]
        if spec.label_noise:
            flip = rng.random(spec.n_labels) < spec.label_noise
            labels = np.where(flip, 1 - labels, labels).astype(np.int8)

        centre = spec.ehr_signal * (factor * is_ehr) @ ehr_dirs
        if is_nb.any():
            centre = centre + spec.neighbor_signal * signatures[cluster]
        values = centre + spec.ehr_noise * rng.standard_normal((spec.time_steps, spec.n_features))
        mask = (rng.random(values.shape) >= spec.ehr_missing_rate).astype(np.float64)
        ehr = EhrInput(values * mask, mask)

        cxrs = []
        if rng.random() < spec.cxr_availability_rate:
            k = 1 + int(rng.poisson(spec.cxr_count_mean - 1.0))
            if spec.relevant_cxr == "not_latest":
                k = max(k, 2)
            times = np.sort(rng.uniform(0.0, spec.window_length, size=k))
            signal = spec.cxr_signal * (factor * is_cxr) @ cxr_dirs
            carrier = int(rng.integers(k - 1)) if spec.relevant_cxr == "not_latest" else None
            for j, t in enumerate(times):
                carries = carrier is None or j == carrier
                feats = (signal if carries else 0.0) + spec.cxr_noise * rng.standard_normal(spec.cxr_dim)
                cxrs.append(CxrInput(feats, float(t)))
        records.append(PatientRecord(f"p{i:05d}", ehr, cxrs, labels))
    return records


def label_names(n_labels: int) -> list[str]:
    return [f"disease_{i:02d}" for i in range(n_labels)]
