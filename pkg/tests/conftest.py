import numpy as np
import pytest

from corrfuse.cohort import CohortSpec, generate_cohort
from corrfuse.config import TrainConfig
from corrfuse.records import CxrInput, EhrInput, PatientRecord


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(pid, values, cxrs=(), labels=(0, 1)):
    """Record from raw arrays; ``cxrs`` is a sequence of (features, hours)."""
    return PatientRecord(pid, EhrInput(np.asarray(values, dtype=float)),
                         [CxrInput(np.asarray(f, dtype=float), float(t)) for f, t in cxrs],
                         np.asarray(labels, dtype=np.int8))


@pytest.fixture
def small_cohort():
    spec = CohortSpec(n_patients=40, n_labels=6, n_features=5, cxr_dim=6, time_steps=4,
                      block_size=2, seed=3)
    return generate_cohort(spec)


@pytest.fixture
def tiny_config():
    return TrainConfig(dim=8, hidden=8, heads=2, batch_size=8, epochs=2, patience=5)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)``; printed once at the end of the run."""
    log = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number, passed, detail):
        log.append((number, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE_KEY, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(log):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
