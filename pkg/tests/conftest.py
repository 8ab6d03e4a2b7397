import numpy as np
import pytest

from strengthnet.datasets import PROFILES, generate_synthetic_corpus, split_manifest, synthetic_corpus_specs
from strengthnet.features import SAMPLE_RATE, Waveform

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def sine(freq=440.0, seconds=1.0, rate=SAMPLE_RATE, amp=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny split synthetic corpus on disk: 5 neutral + 5 per emotion."""
    out = tmp_path_factory.mktemp("small_corpus")
    specs = synthetic_corpus_specs(PROFILES["synthA"], n_per_emotion=5, n_neutral=5, rng_seed=3)
    manifest, truth = generate_synthetic_corpus(specs, out)
    return split_manifest(manifest, rng_seed=0), truth, out
