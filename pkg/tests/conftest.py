import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from issp.config import RunConfig
from issp.tensor import tune_malloc

tune_malloc()

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(method="issp", r=0.95, k_p=20, k_ft=20, seed=42, **model):
    """A run small enough for unit tests (seconds, not minutes)."""
    cfg = RunConfig(seed=seed)
    cfg.prune.method, cfg.prune.r, cfg.prune.k_p, cfg.prune.k_ft = method, r, k_p, k_ft
    cfg.schedule.total_iters = k_p + k_ft
    cfg.model.channels = model.get("channels", 4)
    cfg.model.n_blocks = model.get("n_blocks", 1)
    cfg.data.synthetic, cfg.data.synth_size = 8, 32
    cfg.data.patch = cfg.model.patch = model.get("patch", 8)
    cfg.data.batch = model.get("batch", 4)
    return cfg.validate()


# one line per acceptance criterion, echoed in the terminal summary
REPORT: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
