import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moec_hga import numerics as nx

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def reverse_and_numeric(build, arrays, seed=0):
    """Gradients of ``sum(build(*params) * R)`` by the tape and by central differences.

    ``R`` is a fixed random weighting so every output entry matters.
    """
    weights = {}

    def loss_on(tape, values):
        nodes = [tape.parameter(f"p{i}", v) for i, v in enumerate(values)]
        out = build(*nodes)
        if "R" not in weights:
            weights["R"] = np.random.default_rng(seed).normal(size=out.shape)
        return nx.sum_all(nx.mul(out, weights["R"]))

    tape = nx.Tape()
    loss = loss_on(tape, arrays)
    analytic = tape.backward(loss)
    params = {f"p{i}": a for i, a in enumerate(arrays)}
    numeric = nx.finite_diff_grad(
        lambda p: loss_on(nx.Tape(), [p[f"p{i}"] for i in range(len(arrays))]).item(), params
    )
    return analytic, numeric


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)))
