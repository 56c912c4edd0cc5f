"""Patient records and the JSON-lines cohort format."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_WINDOW_HOURS = 48.0

_RECORD_KEYS = {"format_version", "patient_id", "ehr", "cxrs", "labels"}
_EHR_KEYS = {"values", "mask"}
_CXR_KEYS = {"features", "time_hours"}


class CohortFormatError(ValueError):
    """A cohort file or record does not follow the expected layout."""


@dataclass
class EhrInput:
    """EHR time series of shape ``(T, J)`` plus its observation mask.

    Missing entries may be given as NaN; they are imputed to 0 and flagged
    unobserved in ``mask``.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise CohortFormatError(f"EHR values must be a non-empty T x J matrix, got shape {values.shape}")
        observed = ~np.isnan(values)
        if self.mask is None:
            mask = observed.astype(np.float64)
        else:
            mask = np.array(self.mask, dtype=np.float64)
            if mask.shape != values.shape:
                raise CohortFormatError(f"EHR mask shape {mask.shape} != values shape {values.shape}")
            mask = mask * observed
        self.values = np.where(mask > 0, np.nan_to_num(values), 0.0)
        self.mask = mask

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def summary(self) -> np.ndarray:
        """Time-mean of the imputed values followed by the observed fraction."""
        return np.concatenate([self.values.mean(axis=0), self.mask.mean(axis=0)])


@dataclass
class CxrInput:
    features: np.ndarray
    time_hours: float

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64).reshape(-1)
        self.time_hours = float(self.time_hours)
        if self.features.size == 0 or not np.isfinite(self.features).all():
            raise CohortFormatError("CXR features must be a non-empty finite vector")
        if not self.time_hours >= 0.0:
            raise CohortFormatError(f"CXR time {self.time_hours}h is negative or not a number")


@dataclass
class PatientRecord:
    patient_id: str
    ehr: EhrInput
    cxrs: list[CxrInput] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        self.patient_id = str(self.patient_id)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
            raise CohortFormatError(f"patient {self.patient_id}: labels must be a binary vector")
        self.labels = labels.astype(np.int8)

    @property
    def n_cxr(self) -> int:
        return len(self.cxrs)

    def check_window(self, window_length: float = DEFAULT_WINDOW_HOURS) -> None:
        for cxr in self.cxrs:
            if not 0.0 <= cxr.time_hours <= window_length:
                raise CohortFormatError(
                    f"patient {self.patient_id}: CXR time {cxr.time_hours}h outside [0, {window_length}]h window")

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "patient_id": self.patient_id,
            "ehr": {"values": self.ehr.values.tolist(), "mask": self.ehr.mask.tolist()},
            "cxrs": [{"features": c.features.tolist(), "time_hours": c.time_hours} for c in self.cxrs],
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        if not isinstance(obj, dict):
            raise CohortFormatError("record must be a JSON object")
        _warn_unknown(obj, _RECORD_KEYS, "record")
        version = obj.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise CohortFormatError(f"unsupported format_version {version}")
        try:
            ehr_obj = obj["ehr"]
            _warn_unknown(ehr_obj, _EHR_KEYS, "ehr")
            ehr = EhrInput(ehr_obj["values"], ehr_obj.get("mask"))
            cxrs = []
            for c in obj.get("cxrs", []):
                _warn_unknown(c, _CXR_KEYS, "cxr")
                cxrs.append(CxrInput(c["features"], c["time_hours"]))
            return cls(obj["patient_id"], ehr, cxrs, np.asarray(obj["labels"]))
        except KeyError as err:
            raise CohortFormatError(f"missing field {err.args[0]!r}") from err
        except (TypeError, ValueError) as err:
            if isinstance(err, CohortFormatError):
                raise
            raise CohortFormatError(str(err)) from err


def _warn_unknown(obj: dict, known: set, where: str) -> None:
    extra = sorted(set(obj) - known)
    if extra:
        logger.warning("ignoring unknown %s fields: %s", where, ", ".join(extra))


def save_cohort(records: Iterable[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")


def load_cohort(path, window_length: float = DEFAULT_WINDOW_HOURS) -> list[PatientRecord]:
    """Read a JSONL cohort; any bad line raises with its 1-based line number."""
    records = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = PatientRecord.from_json(json.loads(line))
                rec.check_window(window_length)
            except (json.JSONDecodeError, CohortFormatError) as err:
                raise CohortFormatError(f"{path}: line {lineno}: {err}") from err
            records.append(rec)
    return records
