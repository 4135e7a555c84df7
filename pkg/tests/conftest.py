import numpy as np
import pytest
import torch

from t23dqa.encoders import make_test_backend
from t23dqa.synthetic import generate_synthetic_benchmark

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """6 prompts x 3 generators, 32 px views, default noise."""
    out = tmp_path_factory.mktemp("tiny")
    manifest, planted = generate_synthetic_benchmark(out, n_prompts=6, n_generators=3, image_size=32, seed=3)
    return manifest, planted, out


@pytest.fixture
def tiny_backend():
    return make_test_backend(n_features=8, patch_grid=(2, 2), input_resolution=32, seed=0)


@pytest.fixture
def toy64():
    """float64 backend at toy width for gradient checks."""
    return make_test_backend(n_features=8, patch_grid=(2, 2), input_resolution=32, seed=0, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def _record(label: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
