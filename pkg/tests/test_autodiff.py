import math

import numpy as np
import pytest

from policyscope import autodiff as ad

from .conftest import central_difference, relative_error


def scalar(x):
    return float(np.asarray(ad._val(x)).reshape(()))


def test_forward_anchors():
    assert scalar(ad.tanh(np.zeros((1, 1)))) == 0.0
    assert scalar(ad.logsumexp(np.zeros((1, 2)), axis=1)) == pytest.approx(math.log(2), abs=1e-12)
    rng = np.random.default_rng(0)
    out = ad.matmul(rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), np.zeros((3, 5)))
    assert np.all(out == 0.0)


def test_derivative_anchors():
    _, g = ad.value_and_grad(lambda p: ad.tanh(p["x"]), {"x": np.zeros((1, 1))})
    assert g["x"][0, 0] == pytest.approx(1.0)
    _, g = ad.value_and_grad(lambda p: ad.log(ad.sigmoid(p["x"])), {"x": np.zeros((1, 1))})
    assert g["x"][0, 0] == pytest.approx(0.5)


def test_fan_out_accumulates():
    _, g = ad.value_and_grad(lambda p: ad.add(p["x"], p["x"]), {"x": np.array([[3.0]])})
    assert g["x"][0, 0] == 2.0


def test_backward_before_forward():
    with pytest.raises(ad.TapeError):
        ad.Tape().backward()


def test_shape_mismatch_names_node():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 3)), "x")
    with pytest.raises(ad.ShapeError, match=r"matmul \(node 1\)"):
        ad.matmul(x, np.ones((4, 2)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(x, np.ones((3, 2)))


def test_tape_is_topologically_ordered():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.tanh(ad.matmul(x, np.ones((2, 2))))
    ad.sum(ad.mul(y, x))
    for node in tape.nodes:
        for parent in node.parents:
            if isinstance(parent, ad.Var):
                assert parent.index < node.index


def _primitive_losses():
    # each maps leaves -> scalar, mixing the primitive with random weights
    return {
        "matmul": lambda p, w: ad.sum(ad.mul(ad.matmul(p["x"], p["y"], w["mask"]), w["r3"])),
        "add": lambda p, w: ad.sum(ad.mul(ad.add(p["x"], p["b"]), w["r"])),
        "mul": lambda p, w: ad.sum(ad.mul(ad.mul(p["x"], p["x2"]), w["r"])),
        "tanh": lambda p, w: ad.sum(ad.mul(ad.tanh(p["x"]), w["r"])),
        "sigmoid": lambda p, w: ad.sum(ad.mul(ad.sigmoid(p["x"]), w["r"])),
        "exp": lambda p, w: ad.sum(ad.mul(ad.exp(p["x"]), w["r"])),
        "log": lambda p, w: ad.sum(ad.mul(ad.log(p["pos"]), w["r"])),
        "sum": lambda p, w: ad.sum(ad.mul(ad.sum(p["x"], axis=1), w["rc"])),
        "logsumexp": lambda p, w: ad.sum(ad.mul(ad.logsumexp(p["x"], axis=1), w["rc"])),
    }


@pytest.mark.parametrize("name", sorted(_primitive_losses()))
def test_primitive_gradients_match_finite_differences(name):
    loss = _primitive_losses()[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = {
            "x": rng.standard_normal((3, 4)),
            "x2": rng.standard_normal((3, 4)),
            "y": rng.standard_normal((4, 2)),
            "b": rng.standard_normal((1, 4)),
            "pos": rng.uniform(0.5, 2.0, (3, 4)),
        }
        consts = {
            "mask": (rng.random((4, 2)) < 0.6).astype(float),
            "r": rng.standard_normal((3, 4)),
            "r3": rng.standard_normal((3, 2)),
            "rc": rng.standard_normal((3, 1)),
        }
        f = lambda p: float(np.asarray(loss(p, consts)).reshape(()))
        _, grads = ad.value_and_grad(lambda p: loss(p, consts), params)
        for key in params:
            idx = tuple(rng.integers(0, s) for s in params[key].shape)
            fd = central_difference(f, params, key, idx)
            worst = max(worst, relative_error(grads[key][idx], fd))
    assert worst <= 1e-4


def test_masked_weights_get_zero_gradient():
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    _, g = ad.value_and_grad(lambda p: ad.sum(ad.matmul(p["x"], p["w"], mask)),
                             {"x": np.ones((3, 2)), "w": np.ones((2, 2))})
    assert g["w"][0, 1] == 0.0 and g["w"][1, 0] == 0.0
    assert g["w"][0, 0] == 3.0


def test_determinism():
    rng = np.random.default_rng(5)
    params = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 3))}
    f = lambda p: ad.logsumexp(ad.tanh(ad.matmul(p["x"], p["w"])))
    a = ad.value_and_grad(f, params)
    b = ad.value_and_grad(f, params)
    assert a[0] == b[0]
    assert all(np.array_equal(a[1][k], b[1][k]) for k in params)


class TestAdam:
    def test_first_step(self):
        p, state = ad.adam_step({"w": np.zeros((1, 1))}, {"w": np.ones((1, 1))}, ad.AdamState(learning_rate=1e-3))
        assert p["w"][0, 0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
        assert state.step_count == 1

    def test_zero_gradient(self):
        p, state = ad.adam_step({"w": np.full((1, 1), 0.5)}, {"w": np.zeros((1, 1))}, ad.AdamState())
        assert p["w"][0, 0] == 0.5
        assert state.first_moment["w"][0, 0] == 0.0 and state.second_moment["w"][0, 0] == 0.0

    def test_moments_decay_under_zero_gradient(self):
        _, state = ad.adam_step({"w": np.zeros((1, 1))}, {"w": np.ones((1, 1))}, ad.AdamState())
        m1, v1 = state.first_moment["w"][0, 0], state.second_moment["w"][0, 0]
        _, state = ad.adam_step({"w": np.zeros((1, 1))}, {"w": np.zeros((1, 1))}, state)
        assert state.first_moment["w"][0, 0] == pytest.approx(0.9 * m1)
        assert state.second_moment["w"][0, 0] == pytest.approx(0.999 * v1)
        assert state.step_count == 2

    def test_second_identical_step_magnitude(self):
        state = ad.AdamState(learning_rate=1e-3)
        p = {"w": np.zeros((1, 1))}
        g = {"w": np.ones((1, 1))}
        p1, state = ad.adam_step(p, g, state)
        p2, state = ad.adam_step(p1, g, state)
        # m_hat = v_hat = 1 again after bias correction
        assert p1["w"][0, 0] - p2["w"][0, 0] == pytest.approx(1e-3, rel=1e-7)

    def test_non_finite_gradient(self):
        with pytest.raises(ad.NonFiniteGradientError):
            ad.adam_step({"w": np.zeros((1, 1))}, {"w": np.array([[np.nan]])}, ad.AdamState())

    def test_moment_shapes(self):
        params = {"a": np.zeros((2, 3)), "b": np.zeros((1, 4))}
        grads = {k: np.ones_like(v) for k, v in params.items()}
        _, state = ad.adam_step(params, grads, ad.AdamState())
        for k, v in params.items():
            assert state.first_moment[k].shape == v.shape == state.second_moment[k].shape
