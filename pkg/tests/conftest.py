import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from locpmap.model import GridModel, Weights, grid_edges

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def table_model(height, width, unary_logs, pair_tables=None, symmetric=False):
    """Model whose log-potentials equal the given tables exactly.

    unary_logs: (n, K). pair_tables: (K, K) shared by every edge, or (m, K, K).
    Unary features are the table rows with identity weights; pairwise features
    are one-hot edge indicators.
    """
    U = np.asarray(unary_logs, dtype=np.float64)
    n, K = U.shape
    m = grid_edges(height, width).shape[0]
    if pair_tables is None:
        pair_tables = np.zeros((K, K))
    T = np.asarray(pair_tables, dtype=np.float64)
    if T.ndim == 2:
        T = np.broadcast_to(T, (m, K, K))
    dp = max(m, 1)
    Xp = np.eye(dp)[:m]
    Wp = np.zeros((K, K, dp))
    if m:
        Wp[:, :, :m] = np.transpose(T, (1, 2, 0))
    model = GridModel(height, width, K, U, Xp)
    return model, Weights(np.eye(K), Wp, symmetric)


def random_model(height, width, K=2, seed=0, du=2, dp=2, scale=1.0, symmetric=False):
    rng = np.random.default_rng(seed)
    m = grid_edges(height, width).shape[0]
    model = GridModel(height, width, K, rng.normal(size=(height * width, du)), rng.normal(size=(m, dp)))
    return model, Weights.random(rng, K, du, dp, scale, symmetric)


@pytest.fixture
def tiny():
    return random_model(2, 2, 2, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
