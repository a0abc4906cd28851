import numpy as np
import pytest

from policyscope import flow as fl


def central_difference(f, params, key, index, h=1e-6):
    """Independent gradient oracle: (f(p + h e) - f(p - h e)) / 2h for one coordinate."""
    p = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    orig = p[key][index]
    p[key][index] = orig + h
    up = f(p)
    p[key][index] = orig - h
    down = f(p)
    return (up - down) / (2 * h)


def relative_error(a, b):
    a, b = float(a), float(b)
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def randomize(model, rng, scale=0.3):
    """Give every weight (including the zero-initialized heads) a random value."""
    m = model.copy()
    m.params = {k: v + scale * rng.standard_normal(v.shape) for k, v in m.params.items()}
    return m


@pytest.fixture
def random_flow():
    def make(dim, seed, **config):
        rng = np.random.default_rng(seed)
        model = fl.init_model(dim, fl.FlowConfig(**config) if config else None, rng)
        model = randomize(model, rng)
        model.reward_mean, model.reward_std = 0.3, 1.7
        return model

    return make


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(line)
