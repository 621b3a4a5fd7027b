import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vqflow import autodiff as ad
from vqflow.autodiff import GradientTape, Tensor, backward, finite_difference_check
from vqflow.exceptions import ContractError, DimensionError, NumericError


def grads_of(f, *arrays):
    params = {f"p{i}": Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for i, a in enumerate(arrays)}
    with GradientTape(params) as tape:
        loss = f(*params.values())
    return backward(loss, tape)


class TestLinear:
    def test_identity(self):
        out = ad.linear(Tensor([3.0, 4.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [3.0, 4.0])

    def test_scaled_with_bias(self):
        out = ad.linear(Tensor([1.0, 1.0]), Tensor(2 * np.eye(2)), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 3.0])

    def test_matches_scalar_loop_oracle(self):
        # frozen from explicit dot-product loops over the same seed-0 draw
        rng = np.random.default_rng(0)
        W, b, x = rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
        out = ad.linear(Tensor(x, dtype=np.float64), Tensor(W, dtype=np.float64), Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, [2.554810654360719, -2.3224623066875973, -2.9316013157003464],
                                   rtol=1e-14)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)|\(2, 2\).*\(3,\)"):
            ad.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


class TestAvgPool:
    def test_constant(self):
        out = ad.avg_pool_spatial(Tensor(np.full((3, 5, 2), 5.0)))
        np.testing.assert_array_equal(out.data, [5.0, 5.0, 5.0])

    def test_small(self):
        out = ad.avg_pool_spatial(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        np.testing.assert_array_equal(out.data, [2.5])

    def test_matches_naive_summation(self):
        h = np.random.default_rng(0).uniform(-2, 2, (4, 3, 3))
        out = ad.avg_pool_spatial(Tensor(h, dtype=np.float64))
        np.testing.assert_allclose(
            out.data, [0.031125646775397135, 0.20204690649065046, -0.13818285014208945, 0.2606159099226486],
            rtol=1e-13)

    def test_channels_last_agrees(self):
        h = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
        a = ad.avg_pool_spatial(Tensor(h))
        b = ad.avg_pool_spatial(Tensor(np.moveaxis(h, 1, -1)), channels_last=True)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-6)

    def test_empty_extent(self):
        with pytest.raises(DimensionError):
            ad.avg_pool_spatial(Tensor(np.zeros((2, 0, 3))))

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 3, 3, 2))
        lhs = ad.avg_pool_spatial(Tensor(a * x + b * y, dtype=np.float64)).data
        rhs = a * ad.avg_pool_spatial(Tensor(x, dtype=np.float64)).data + b * ad.avg_pool_spatial(
            Tensor(y, dtype=np.float64)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestBackward:
    def test_sum(self):
        g = grads_of(lambda x: ad.sum(x), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g["p0"], [1.0, 1.0, 1.0])

    def test_sum_of_squares(self):
        g = grads_of(lambda x: ad.sum(x * x), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g["p0"], [2.0, 4.0, 6.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradientTape({"x": x}) as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_nan_names_primitive(self):
        x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        with GradientTape({"x": x}) as tape:
            loss = ad.sum(ad.log(x + Tensor(np.array([0.0, 1e-300]))) * 0.0 + ad.tanh(x) * Tensor(np.array([np.inf, 1.0])))
        with pytest.raises(NumericError, match="'"):
            backward(loss, tape)

    def test_shared_subexpression_accumulates(self):
        # y = x*x used twice: d/dx (y + y) = 4x
        g = grads_of(lambda x: (lambda y: ad.sum(y + y))(x * x), [1.5, -2.0])
        np.testing.assert_allclose(g["p0"], [6.0, -8.0])

    def test_gradient_buffer_shape(self):
        g = grads_of(lambda w, x: ad.sum(ad.linear(x, w)), np.ones((3, 2)), np.ones((4, 2)))
        assert g["p0"].shape == (3, 2) and g["p1"].shape == (4, 2)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x * x
        assert y._backward is None

    def test_nodes_visited_once(self):
        calls = []
        x = Tensor(np.array([2.0]), requires_grad=True)
        with GradientTape({"x": x}) as tape:
            y = ad.exp(x)
            orig = y._backward
            y._backward = lambda g: (calls.append(1), orig(g))[1]
            loss = ad.sum(y * y + y)
        backward(loss, tape)
        assert calls == [1]


def _random_inputs(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-2, 2, size=s) for s in shapes]


PRIMITIVES = {
    "add": (lambda a, b: ad.sum(ad.add(a, b) * ad.add(a, b)), [(3, 2), (2,)]),
    "sub": (lambda a, b: ad.sum(ad.sub(a, b) * a), [(3, 2), (3, 1)]),
    "mul": (lambda a, b: ad.sum(ad.mul(a, b)), [(2, 3), (2, 3)]),
    "exp": (lambda a: ad.sum(ad.exp(a)), [(4,)]),
    "log": (lambda a: ad.sum(ad.log(a * a + 0.5)), [(4,)]),
    "softplus": (lambda a: ad.sum(ad.softplus(a) * a), [(5,)]),
    "tanh": (lambda a: ad.sum(ad.tanh(a) * a), [(5,)]),
    "linear": (lambda w, b, x: ad.sum(ad.tanh(ad.linear(x, w, b))), [(3, 4), (3,), (2, 4)]),
    "concat_split": (lambda a, b: (lambda parts: ad.sum(parts[0] * parts[1]))(
        ad.split(ad.concat([a, b], axis=-1), [3, 3], axis=-1)), [(2, 2), (2, 4)]),
    "avg_pool": (lambda h: ad.sum(ad.avg_pool_spatial(h) * ad.avg_pool_spatial(h)), [(3, 2, 4)]),
    "mean": (lambda a: ad.mean(a * a, axis=0)[0] + ad.mean(a), [(3, 2)]),
    "gather": (lambda a: ad.sum(ad.gather(a, np.array([2, 0, 2]), axis=0) * 1.5), [(3, 2)]),
    "reshape_broadcast": (lambda a: ad.sum(ad.broadcast_to(ad.reshape(a, (1, 4)), (3, 4)) * ad.broadcast_to(
        ad.reshape(a, (1, 4)), (3, 4))), [(2, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(name, seed):
    f, shapes = PRIMITIVES[name]
    params = [Tensor(x, requires_grad=True) for x in _random_inputs(seed, *shapes)]
    err = finite_difference_check(lambda: f(*params), params, eps=1e-5)
    assert err < 1e-3


def test_pass_through_routes_gradient_to_carrier():
    v = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    code = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    with GradientTape({"v": v, "code": code}) as tape:
        q = ad.pass_through(code, v)
        loss = ad.sum(q * Tensor(np.array([2.0, 3.0])))
    g = backward(loss, tape)
    np.testing.assert_array_equal(q.data, [1.0, 1.0])
    np.testing.assert_array_equal(g["v"], [2.0, 3.0])
    np.testing.assert_array_equal(g["code"], [0.0, 0.0])


def test_stop_gradient_blocks():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g = grads_of(lambda x: ad.sum(ad.stop_gradient(x) * x), [1.0, 2.0])
    np.testing.assert_array_equal(g["p0"], [1.0, 2.0])


class TestFiniteDifference:
    def test_square(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        assert finite_difference_check(lambda: ad.sum(p * p), [p], eps=1e-4) < 1e-6

    def test_exp(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        assert finite_difference_check(lambda: ad.sum(ad.exp(p)), [p], eps=1e-4) < 1e-6

    def test_nondeterministic_function_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            finite_difference_check(lambda: ad.sum(p * float(rng.normal())), [p])

    def test_nonpositive_eps_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ContractError):
            finite_difference_check(lambda: ad.sum(p), [p], eps=0.0)

    def test_detects_wrong_gradient(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        bad = lambda: ad.pass_through(ad.sum(p * p), ad.sum(p))  # noqa: E731
        assert finite_difference_check(bad, [p]) > 0.5


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    w, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(6, 3))
    run = lambda: ad.softplus(ad.linear(Tensor(x), Tensor(w), Tensor(b))).data.tobytes()  # noqa: E731
    assert run() == run()


def test_float32_default_dtype():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_exp_overflow_is_numeric_error():
    with pytest.raises(NumericError):
        ad.exp(Tensor(np.array([1e4])))
