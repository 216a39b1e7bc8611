import numpy as np
import pytest
from hypothesis import settings

from mupod.data import PatientRecord, demo_vector
from mupod.synthetic import GeneratorConfig, generate_dataset

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


def random_patient(rng, pid="P0", T=5, n_meds=6, n_diags=5, label=None, rate=0.3):
    meds = (rng.random((T, n_meds)) < rate).astype(float)
    diags = (rng.random((T, n_diags)) < rate).astype(float)
    label = int(rng.integers(0, 2)) if label is None else label
    sex = "F" if rng.random() < 0.5 else "M"
    return PatientRecord(pid, label, meds, diags, demo_vector(float(rng.uniform(18, 90)), sex), np.arange(T))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(GeneratorConfig(n_patients=120, n_months=8, med_vocab_size=6, diag_vocab_size=6, seed=4))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
