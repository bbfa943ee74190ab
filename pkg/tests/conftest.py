import numpy as np
import pytest

import twostepkm.propensity as propensity_module

ACCEPTANCE_LINES: list[str] = []
IRLS_PATHS: list[tuple] = []


def loglik_is_monotone(path, rel=1e-9) -> bool:
    """Non-decreasing up to rounding of the final, sub-resolution steps."""
    path = np.asarray(path, dtype=float)
    if path.size < 2:
        return True
    slack = rel * np.maximum(1.0, np.abs(path[1:]))
    return bool(np.all(np.diff(path) >= -slack))


@pytest.fixture(autouse=True)
def _record_irls(monkeypatch):
    """Record the log-likelihood path of every IRLS fit run in-process."""
    original = propensity_module.irls

    def recording(*args, **kwargs):
        result = original(*args, **kwargs)
        IRLS_PATHS.append(tuple(result[1]))
        return result

    monkeypatch.setattr(propensity_module, "irls", recording)
    yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    if IRLS_PATHS:
        bad = sum(not loglik_is_monotone(p) for p in IRLS_PATHS)
        terminalreporter.write_line(f"IRLS fits observed: {len(IRLS_PATHS)}, non-monotone log-likelihood paths: {bad}")
