import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featkd import tensor as T
from featkd.tensor import BatchNormState, Tensor, backward, op_trace

from _gradcheck import check_grads


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, shape)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_dot_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        # oracle: 1*3 + 2*4
        assert out.data.tolist() == [[11.0]]

    def test_zeros(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


class TestElementwise:
    def test_relu_sign_cases(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_add_small(self):
        assert T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]

    def test_exp_identity(self):
        assert T.exp(Tensor([0.0])).data.tolist() == [1.0]

    def test_log_rejects_non_positive(self):
        with pytest.raises(ValueError, match="strictly positive"):
            T.log(Tensor([1.0, 0.0]))

    def test_binary_shape_mismatch(self):
        with pytest.raises(ValueError, match=r"\(3,\).*\(2,\)"):
            T.add(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0]))

    def test_row_broadcast(self):
        out = T.add(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([10.0, 20.0]))
        assert out.data.tolist() == [[11.0, 22.0], [13.0, 24.0]]

    def test_dispatcher(self):
        out = T.elementwise("mul", Tensor([2.0]), Tensor([3.0]))
        assert out.data.tolist() == [6.0]
        with pytest.raises(ValueError, match="unknown elementwise kind"):
            T.elementwise("tanh", Tensor([1.0]))
        with pytest.raises(ValueError, match="binary"):
            T.elementwise("sub", Tensor([1.0]))
        with pytest.raises(ValueError, match="unary"):
            T.elementwise("relu", Tensor([1.0]), Tensor([1.0]))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)

    def test_two_logit_high_precision(self):
        # oracle: e / (1 + e) at 50 decimal digits
        mpmath.mp.dps = 50
        expected = float(mpmath.e / (1 + mpmath.e))
        out = T.softmax(Tensor([[1.0, 0.0]]))
        assert abs(out.data[0, 0] - expected) < 1e-4
        assert abs(out.data[0, 1] - (1 - expected)) < 1e-4

    def test_large_logits_stable(self):
        out = T.softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data[0, 0] - 1.0) < 1e-12
        assert abs(out.data[0, 1]) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6),
                    min_size=1, max_size=4).filter(
                        lambda rows: len({len(r) for r in rows}) == 1))
    def test_rows_sum_to_one(self, rows):
        out = T.softmax(Tensor(rows))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


class TestBatchNorm:
    def test_training_normalizes(self):
        rng = np.random.default_rng(0)
        x = rng.normal(5.0, 2.0, (64, 3))
        state = BatchNormState.create(3)
        out = T.batch_norm(Tensor(x), state, training=True)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-3)

    def test_zero_variance_column(self):
        # hand oracle: x == mu so (x - mu)/sqrt(0 + eps) * gamma + beta == beta
        state = BatchNormState.create(2)
        state.gamma.data[:] = 2.0
        state.beta.data[:] = 3.0
        out = T.batch_norm(Tensor(np.full((4, 2), 7.0)), state, training=True)
        np.testing.assert_allclose(out.data, 3.0, atol=1e-12)

    def test_eval_matches_training_when_stats_match(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0.0, 1.5, (32, 4))
        s1 = BatchNormState.create(4)
        train_out = T.batch_norm(Tensor(x), s1, training=True)
        s2 = BatchNormState.create(4)
        s2.running_mean = x.mean(axis=0)
        s2.running_var = x.var(axis=0)
        eval_out = T.batch_norm(Tensor(x), s2, training=False)
        np.testing.assert_allclose(eval_out.data, train_out.data, atol=1e-6)

    def test_degenerate_batch(self):
        with pytest.raises(ValueError, match="batch >= 2"):
            T.batch_norm(Tensor(np.ones((1, 3))), BatchNormState.create(3), training=True)

    def test_running_stats_update_only_in_training(self):
        state = BatchNormState.create(2)
        before = state.running_mean.copy()
        T.batch_norm(Tensor(np.ones((4, 2)) * 3.0), state, training=False)
        np.testing.assert_array_equal(state.running_mean, before)
        T.batch_norm(Tensor(np.ones((4, 2)) * 3.0), state, training=True)
        np.testing.assert_allclose(state.running_mean, 0.9 * before + 0.1 * 3.0)


class TestBackward:
    def test_sum_linear(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.sum_all(w))
        assert w.grad.tolist() == [1.0, 1.0, 1.0]

    def test_sum_of_squares_analytic(self):
        # oracle: d/dw sum(w^2) = 2w
        w = Tensor([1.0, -2.0], requires_grad=True)
        backward(T.sum_all(T.square(w)))
        assert w.grad.tolist() == [2.0, -4.0]

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(T.add(w, w))

    def test_fanout_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        y = T.add(w, w)  # dy/dw = 2
        backward(T.sum_all(y))
        assert w.grad.tolist() == [2.0]

    def test_stop_gradient_boundary(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        hidden = T.square(w)
        loss = T.sum_all(T.mul(hidden.detach(), Tensor([3.0, 3.0])))
        backward(loss)
        assert w.grad is None
        assert hidden.grad is None

    def test_detach_shares_storage(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        view = w.detach()
        w.data -= 1.0
        np.testing.assert_array_equal(view.data, [0.0, 1.0])


class TestGradcheck:
    """Analytic vs central-difference gradients for every differentiable op."""

    def test_matmul(self):
        rng = np.random.default_rng(10)
        check_grads(lambda ts: T.sum_all(T.square(T.matmul(ts[0], ts[1]))),
                    [rand(rng, 3, 4), rand(rng, 4, 2)])

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_elementwise(self, kind):
        rng = np.random.default_rng(hash(kind) % 2 ** 31)
        check_grads(lambda ts: T.sum_all(T.square(T.elementwise(kind, ts[0], ts[1]))),
                    [rand(rng, 4, 3), rand(rng, 4, 3)])
        check_grads(lambda ts: T.sum_all(T.square(T.elementwise(kind, ts[0], ts[1]))),
                    [rand(rng, 4, 3), rand(rng, 3)])  # row broadcast

    def test_relu(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 5, 4)
        x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
        check_grads(lambda ts: T.sum_all(T.relu(ts[0])), [x])

    def test_log(self):
        rng = np.random.default_rng(12)
        check_grads(lambda ts: T.sum_all(T.log(ts[0])), [rng.uniform(0.5, 2.5, (4, 3))])

    def test_exp_square(self):
        rng = np.random.default_rng(13)
        check_grads(lambda ts: T.sum_all(T.exp(ts[0])), [rand(rng, 3, 3)])
        check_grads(lambda ts: T.sum_all(T.square(ts[0])), [rand(rng, 3, 3)])

    def test_softmax_and_log_softmax(self):
        rng = np.random.default_rng(14)
        probe = Tensor(rng.uniform(-1, 1, (4, 5)))
        check_grads(lambda ts: T.sum_all(T.mul(T.softmax(ts[0]), probe)),
                    [rand(rng, 4, 5)])
        check_grads(lambda ts: T.sum_all(T.mul(T.log_softmax(ts[0]), probe)),
                    [rand(rng, 4, 5)])

    def test_mean_concat_slice(self):
        rng = np.random.default_rng(15)
        check_grads(lambda ts: T.mean_all(T.square(ts[0])), [rand(rng, 4, 2)])
        check_grads(
            lambda ts: T.sum_all(T.square(T.concat_rows(ts[0], ts[1]))),
            [rand(rng, 3, 2), rand(rng, 2, 2)])
        check_grads(
            lambda ts: T.sum_all(T.square(T.slice_rows(ts[0], 1, 3))),
            [rand(rng, 5, 2)])

    def test_batch_norm_training_and_eval(self):
        rng = np.random.default_rng(16)
        rm, rv = rng.uniform(-1, 1, 3), rng.uniform(0.5, 2.0, 3)

        def build(training):
            def _build(ts):
                state = BatchNormState(gamma=ts[1], beta=ts[2],
                                       running_mean=rm.copy(), running_var=rv.copy())
                return T.sum_all(T.square(T.batch_norm(ts[0], state, training)))
            return _build

        inputs = [rand(rng, 8, 3), rng.uniform(0.5, 1.5, 3), rand(rng, 3)]
        check_grads(build(True), inputs)
        check_grads(build(False), inputs)

    def test_random_op_chain(self):
        # multi-op chain exercising fan-out and mixed shapes
        rng = np.random.default_rng(17)

        def build(ts):
            h = T.relu(T.add(T.matmul(ts[0], ts[1]), ts[2]))
            p = T.softmax(T.matmul(h, ts[3]))
            return T.add(T.mean_all(T.square(T.sub(h, 0.5))),
                         T.sum_all(T.mul(p, T.log(T.add(p, 1.0)))))

        x = rand(rng, 4, 3)
        check_grads(build, [x, rand(rng, 3, 5), rand(rng, 5), rand(rng, 5, 3)])


class TestDeterminism:
    def test_same_inputs_same_outputs(self):
        def run():
            rng = np.random.default_rng(99)
            a = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            loss = T.mean_all(T.square(T.relu(T.matmul(a, b))))
            backward(loss)
            return loss.data.copy(), a.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestInvariants:
    def test_tensor_rejects_empty(self):
        with pytest.raises(ValueError, match="positive"):
            Tensor(np.zeros((0, 3)))

    def test_finite_after_passes(self):
        rng = np.random.default_rng(5)
        w = Tensor(rand(rng, 4, 4), requires_grad=True)
        out = T.softmax(T.matmul(Tensor(rand(rng, 3, 4)), w))
        loss = T.mean_all(T.square(out))
        backward(loss)
        assert np.all(np.isfinite(out.data))
        assert np.all(np.isfinite(w.grad))

    def test_op_trace_order(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        out = T.relu(T.add(T.matmul(x, x), Tensor([1.0, 1.0])))
        assert op_trace(out) == ["matmul", "add", "relu"]
