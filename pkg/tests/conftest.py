import numpy as np
import pytest

from egr_forge.synth import SynthSpec, generate_toy_dataset


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small synthetic tree: 12 identities x 2 images x (pristine + 4 subsets)."""
    root = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_dataset(SynthSpec(identities=12, images_per_identity=2, seed=5), root)
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
