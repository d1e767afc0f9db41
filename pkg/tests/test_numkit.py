import numpy as np
import pytest

from cloudcast import numkit as nk
from cloudcast.errors import NumericFailure, ShapeError


def test_matmul_cases():
    np.testing.assert_array_equal(nk.mat_mul(np.eye(2), [[3, 4], [5, 6]]), [[3, 4], [5, 6]])
    np.testing.assert_array_equal(nk.mat_mul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(nk.mat_mul(np.zeros((2, 3)), rng.normal(size=(3, 4))), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        nk.mat_mul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left = nk.mat_mul(nk.mat_mul(a, b), c)
        right = nk.mat_mul(a, nk.mat_mul(b, c))
        assert np.all(np.abs(left - right) <= 1e-9 * (np.abs(left) + 1e-12) + 1e-12)


def test_scalar_nonlinearities():
    assert nk.sigmoid(0.0).item() == 0.5
    assert nk.sigmoid(2.0).item() == pytest.approx(0.8807970779778823, abs=1e-15)
    assert nk.tanh(0.0).item() == 0.0
    assert nk.tanh(0.5).item() == pytest.approx(0.46211715726000974, abs=1e-15)
    x = np.random.default_rng(2).normal(scale=5, size=(20, 5))
    np.testing.assert_allclose(nk.sigmoid(x).value + nk.sigmoid(-x).value, 1.0, atol=1e-15)
    np.testing.assert_array_equal(nk.tanh(-x).value, -nk.tanh(x).value)


def test_nonlinearity_ranges():
    x = np.random.default_rng(3).normal(scale=30, size=(1000, 1))
    x[:4, 0] = [800.0, -800.0, 40.0, -40.0]
    s, t = nk.sigmoid(x).value, nk.tanh(x).value
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


def test_grad_eval_simple():
    value, grads = nk.grad_eval(lambda P: P["w"] * P["w"], {"w": np.array([[3.0]])})
    assert value == 9.0 and grads["w"][0, 0] == 6.0
    _, grads = nk.grad_eval(lambda P: nk.sigmoid(P["w"]), {"w": np.array([[0.0]])})
    assert grads["w"][0, 0] == 0.25


def _random_program(seed):
    rng = np.random.default_rng(seed)
    params = {"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=(1, 4)),
              "w2": rng.normal(size=(4, 4)), "w3": rng.normal(size=(4, 1))}
    x = rng.normal(size=(5, 3))

    def f(P):
        h = nk.tanh(nk.affine(x, P["w1"], P["b1"]))
        h = nk.sigmoid(h @ P["w2"])
        out = nk.relu(h) @ P["w3"]
        return nk.total(nk.square(out))

    return f, params


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_composed_programs(seed):
    f, params = _random_program(seed)
    report = nk.grad_check(f, params, epsilon=1e-5, tolerance=1e-4)
    assert report.passed, report.worst


def test_grad_check_linear_exact():
    a = np.array([[1.5, -2.0, 0.25]])
    report = nk.grad_check(lambda P: nk.total(nk.mul(a, P["w"])), {"w": np.ones((1, 3))})
    assert report.max_rel_error < 1e-10


def test_grad_check_detects_corrupted_adjoint():
    def bad_square(x):
        x = nk.constant(x)
        return nk._node(x.value ** 2, "bad_square", (x,),
                        lambda g: nk._accumulate(x, 3.0 * g * x.value))

    report = nk.grad_check(lambda P: nk.total(bad_square(P["w"])), {"w": np.array([[0.7, -1.2]])})
    assert not report.passed


def test_grad_check_rejects_bad_arguments():
    with pytest.raises(ValueError):
        nk.grad_check(lambda P: nk.total(P["w"]), {"w": np.ones((1, 1))}, epsilon=0)


def test_numeric_failure_names_op():
    with pytest.raises(NumericFailure) as info:
        nk.grad_eval(lambda P: nk.total(nk.mul(P["w"], np.array([[np.inf]]))), {"w": np.ones((1, 1))})
    assert info.value.op == "mul"


def test_opt_step_zero_gradient_is_noop():
    params = {"w": np.array([[1.0, -2.0]])}
    state = nk.AdamState()
    new, state2 = nk.opt_step(params, {"w": np.zeros((1, 2))}, state)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state2.step == state.step + 1


def test_opt_step_first_step_moves_by_lr():
    new, _ = nk.opt_step({"p": np.array([[0.5]])}, {"p": np.array([[1.0]])}, nk.AdamState(lr=1e-3))
    assert 0.5 - new["p"][0, 0] == pytest.approx(1e-3, rel=1e-6)


def test_opt_step_deterministic_and_checked():
    rng = np.random.default_rng(4)
    params = {"w": rng.normal(size=(3, 3))}
    grads = [{"w": rng.normal(size=(3, 3))} for _ in range(5)]

    def run():
        p, s = params, nk.AdamState()
        for g in grads:
            p, s = nk.opt_step(p, g, s)
        return p["w"]

    assert run().tobytes() == run().tobytes()
    with pytest.raises(NumericFailure):
        nk.opt_step(params, {"w": np.full((3, 3), np.nan)}, nk.AdamState())
    with pytest.raises(ShapeError):
        nk.opt_step(params, {"w": np.zeros((2, 3))}, nk.AdamState())


def test_random_source_streams():
    a = nk.RandomSource(42).uniform(0, 1, 10_000)
    b = nk.RandomSource(42).uniform(0, 1, 10_000)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, nk.RandomSource(43).uniform(0, 1, 10_000))


def test_random_source_derive_is_order_independent():
    root = nk.RandomSource(7)
    first = root.derive("sweep", 3).normal(size=5)
    root.derive("other").normal(size=100)
    again = nk.RandomSource(7).derive("sweep", 3).normal(size=5)
    np.testing.assert_array_equal(first, again)
    assert root.derive_seed("a") != root.derive_seed("b")
