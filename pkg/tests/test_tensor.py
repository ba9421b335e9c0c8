import numpy as np
import pytest

from dualssl import tensor as T
from dualssl.errors import ConfigError, ContractError, NumericalError, ShapeError
from dualssl.gradcheck import OP_CASES, check_op, numerical_gradient, op_gradient_error, relative_error
from dualssl.rng import CounterRNG
from dualssl.tensor import Tensor

TRIALS = 20
GRAD_TOL = 1e-5


def randn(rng, *shape):
    return rng.normal(shape)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_one_by_one(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_of_sum(self):
        rng = CounterRNG(1)
        a, b = randn(rng, 4, 5), randn(rng, 5, 3)
        ta = Tensor(a, requires_grad=True)
        T.matmul(ta, Tensor(b)).sum().backward()

        def f():
            return float((a @ b).sum())

        assert relative_error(ta.grad, numerical_gradient(f, a)) < 1e-6

    def test_batched_against_2d(self):
        rng = CounterRNG(2)
        assert check_op(T.matmul, [randn(rng, 2, 3, 4), randn(rng, 4, 5)]) < GRAD_TOL
        assert check_op(T.matmul, [randn(rng, 2, 3, 4), randn(rng, 2, 4, 5)]) < GRAD_TOL


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25, atol=0)

    def test_no_overflow(self):
        np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = randn(CounterRNG(3), 5, 7) * 10
        out = T.softmax(Tensor(x), axis=-1).data
        assert (out > 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_jacobian(self):
        assert check_op(T.softmax, [randn(CounterRNG(4), 6)]) < 1e-6


class TestLayerNorm:
    def test_constant_slice(self):
        out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-5)

    def test_per_slice_moments(self):
        out = T.layer_norm(Tensor(randn(CounterRNG(5), 3, 8) * 4 + 2), Tensor(np.ones(8)),
                           Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


class TestSmallOps:
    def test_relu(self):
        assert T.relu(Tensor(-2.0)).item() == 0.0
        assert T.relu(Tensor(3.0)).item() == 3.0

    def test_mean(self):
        assert T.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5

    def test_broadcast_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))

    def test_broadcast_add_gradient_shapes(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        assert b.grad.tolist() == [2.0, 2.0, 2.0]
        assert a.grad.shape == (2, 3)

    def test_overflow_raises(self):
        with pytest.raises(NumericalError):
            T.exp(Tensor([1000.0]))

    def test_log_of_zero_raises(self):
        with pytest.raises(NumericalError):
            T.log(Tensor([0.0]))


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_row(self):
        x = Tensor([[0.0, 0.0]], requires_grad=True)
        out = T.l2_normalize(x)
        assert out.data.tolist() == [[0.0, 0.0]]
        out.sum().backward()
        assert np.isfinite(x.grad).all()

    def test_unit_norm(self):
        out = T.l2_normalize(Tensor(randn(CounterRNG(6), 4, 16))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(5.0))
        assert T.dropout(x, 0.0, True, CounterRNG(0)) is x

    def test_eval_identity(self):
        x = Tensor(np.arange(5.0))
        assert T.dropout(x, 0.5, False, CounterRNG(0)) is x

    def test_survivor_fraction(self):
        out = T.dropout(Tensor(np.ones(100_000)), 0.5, True, CounterRNG(7)).data
        frac = (out != 0).mean()
        assert abs(frac - 0.5) < 0.01
        np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            T.dropout(Tensor(np.ones(3)), rate, True, CounterRNG(0))


class TestBatchNorm:
    def _args(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d)), np.zeros(d), np.ones(d)

    def test_constant_column(self):
        x = np.column_stack([np.full(4, 3.0), np.arange(4.0)])
        out = T.batch_norm_1d(Tensor(x), *self._args(2), training=True).data
        np.testing.assert_array_equal(out[:, 0], 0.0)

    def test_eval_affine_only(self):
        gain, bias = Tensor([2.0, 3.0]), Tensor([1.0, -1.0])
        x = randn(CounterRNG(8), 5, 2)
        out = T.batch_norm_1d(Tensor(x), gain, bias, np.zeros(2), np.ones(2), training=False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5) * [2, 3] + [1, -1], atol=1e-15)

    def test_single_sample_training_rejected(self):
        with pytest.raises(ShapeError):
            T.batch_norm_1d(Tensor(np.ones((1, 3))), *self._args(3), training=True)

    def test_running_stats_update(self):
        x = randn(CounterRNG(9), 6, 3)
        g, b, rm, rv = self._args(3)
        T.batch_norm_1d(Tensor(x), g, b, rm, rv, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_reused_node_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * 3
        (y * y + y).backward()  # d/dx (9x^2 + 3x) = 18x + 3
        assert x.grad == 39.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad

    def test_composed_mlp(self):
        rng = CounterRNG(10)

        def mlp(x, w1, b1, w2):
            return T.matmul(T.gelu(T.matmul(x, w1) + b1), w2)

        err = check_op(mlp, [randn(rng, 5, 4), randn(rng, 4, 6), randn(rng, 6), randn(rng, 6, 3)])
        assert err < GRAD_TOL

    def test_accumulation_identity(self):
        rng = CounterRNG(11)
        w_init = randn(rng, 4, 3)
        x1, x2 = randn(rng, 5, 4), randn(rng, 5, 4)

        def loss(w, x):
            return (T.tanh(T.matmul(x, w)) ** 2).mean()

        w = Tensor(w_init.copy(), requires_grad=True)
        (loss(w, x1) + loss(w, x2)).backward()
        joint = w.grad.copy()
        w.grad = None
        loss(w, x1).backward()
        loss(w, x2).backward()
        np.testing.assert_allclose(w.grad, joint, atol=1e-12, rtol=0)

    def test_determinism(self):
        def run():
            rng = CounterRNG(12)
            w = Tensor(randn(rng, 4, 4), requires_grad=True)
            x = Tensor(randn(rng, 3, 4))
            out = T.softmax(T.matmul(x, w))
            T.dropout(out, 0.3, True, rng).sum().backward()
            return out.data.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestPrecision:
    def test_f32_mode(self):
        with T.precision("f32"):
            assert Tensor([1.0]).dtype == np.float32
            assert T.gelu(Tensor([1.0])).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            T.set_precision("f16")


# ---------------------------------------------------------------------------
# finite-difference suite: every differentiable op, 20 random trials each
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    worst = op_gradient_error(name, TRIALS)
    assert worst < GRAD_TOL, f"{name}: worst relative error {worst:.2e}"
