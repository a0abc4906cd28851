import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyscope.envs import PuckWorld
from policyscope.priors import (
    OutOfRangeError,
    PriorSpec,
    log_jacobian_to_unbounded,
    log_prior_unbounded,
    to_bounded,
    to_unbounded,
)

PUCK = PuckWorld().prior


def test_midpoint_maps_to_zero():
    np.testing.assert_allclose(to_unbounded(PUCK.midpoint, PUCK), 0.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(to_bounded(np.zeros(PUCK.dim), PUCK), PUCK.midpoint, rtol=0, atol=1e-15)


def test_boundary_is_clipped_inward():
    i = PUCK.index("mass")
    x = PUCK.midpoint.copy()
    x[i] = 1.0
    z = to_unbounded(x, PUCK)
    eps = PUCK.epsilon_clip
    assert z[i] == pytest.approx(math.log(eps / (1 - eps)))
    assert to_bounded(z, PUCK)[i] == pytest.approx(1.0 + 19.0 * eps)


def test_out_of_range_names_dimension():
    x = PUCK.midpoint.copy()
    x[PUCK.index("w")] = 0.05
    with pytest.raises(OutOfRangeError, match="'w'"):
        to_unbounded(x, PUCK)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=8, max_size=8))
def test_round_trip_interior(fractions):
    x = PUCK.lo + PUCK.width * np.array(fractions)
    np.testing.assert_allclose(to_bounded(to_unbounded(x, PUCK), PUCK), x, rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-800, 800), min_size=8, max_size=8))
def test_bounded_images_stay_in_range(z):
    x = to_bounded(np.array(z), PUCK)
    assert np.all(x >= PUCK.lo) and np.all(x <= PUCK.hi)
    w = x[PUCK.index("w")]
    assert 0.02 <= w <= 0.045


def test_log_prior_values():
    spec1 = PriorSpec(["a"], [0], [1])
    assert log_prior_unbounded(np.zeros(1), spec1) == pytest.approx(math.log(0.25), abs=1e-12)
    spec2 = PriorSpec(["a", "b"], [0, 0], [1, 1])
    assert log_prior_unbounded(np.zeros(2), spec2) == pytest.approx(-2.772589, abs=1e-6)


def test_log_prior_range_independent():
    a = PriorSpec(["p", "q"], [0, 0], [1, 1])
    b = PriorSpec(["p", "q"], [-50, 3], [70, 3.01])
    z = np.random.default_rng(0).standard_normal((50, 2)) * 3
    np.testing.assert_array_equal(log_prior_unbounded(z, a), log_prior_unbounded(z, b))
    x = to_bounded(z, b)
    np.testing.assert_allclose(to_unbounded(x, b), z, atol=1e-6)


def test_log_prior_normalizes():
    spec = PriorSpec(["a"], [2], [5])
    grid = np.linspace(-40, 40, 80001)[:, None]
    assert abs(np.trapezoid(np.exp(log_prior_unbounded(grid, spec)), grid[:, 0]) - 1.0) < 0.02
    rng = np.random.default_rng(0)
    # importance estimate with a wide normal proposal
    z = rng.normal(0, 4, 200_000)
    w = np.exp(log_prior_unbounded(z[:, None], spec) + 0.5 * (z / 4) ** 2 + math.log(4 * math.sqrt(2 * math.pi)))
    assert abs(w.mean() - 1.0) < 0.02


def test_log_jacobian_matches_numeric():
    spec = PriorSpec(["a", "b"], [1, -3], [20, 3])
    x = np.array([4.0, 0.5])
    z = to_unbounded(x, spec)
    h = 1e-6
    num = 0.0
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        num += math.log((to_unbounded(x + e, spec)[i] - to_unbounded(x - e, spec)[i]) / (2 * h))
    assert log_jacobian_to_unbounded(z, spec)[0] == pytest.approx(num, abs=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        PriorSpec(["a"], [1], [1])
    with pytest.raises(ValueError):
        PriorSpec(["a", "b"], [0], [1])
