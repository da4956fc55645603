import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oocboost.ellpack import convert
from oocboost.ingest import ingest_blocks, synthetic_blocks

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def make_store(tmp_path):
    """Synthetic rows -> CSR pages -> ELLPACK store, inside tmp_path."""
    counter = iter(range(10**6))

    def make(n_rows=2000, n_features=6, seed=0, missing_rate=0.0, max_bin=32,
             csr_bytes=1 << 20, page_bytes=1 << 20):
        d = tmp_path / f"data{next(counter)}"
        pages = ingest_blocks(synthetic_blocks(n_rows, n_features, seed, missing_rate=missing_rate),
                              csr_bytes, d / "csr")
        return convert(pages, d / "ell", max_bin, page_bytes)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
