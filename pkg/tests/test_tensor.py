import numpy as np
import pytest

from tinytransfer import tensor as T
from tinytransfer.errors import ConfigurationError, DataError, DimensionError
from tinytransfer.tensor import Tensor

from conftest import assert_grads_close, numerical_grad, spread_values


def weighted_sum(out: Tensor, weights: np.ndarray) -> float:
    return float((out.data * weights).sum())


def check_op_gradients(build, inputs, rng, instances=5):
    """FD-check every differentiable input of ``build(*tensors)``.

    ``inputs`` is a list of factories producing fresh numpy arrays; the
    scalar objective is a fixed random weighting of the op output.
    """
    for _ in range(instances):
        arrays = [factory(rng) for factory in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*tensors)
        w = rng.normal(size=out.shape)
        out.backward(seed=w)
        for a, t in zip(arrays, tensors):
            numeric = numerical_grad(lambda: weighted_sum(build(*[Tensor(x) for x in arrays]), w), a)
            assert_grads_close(t.grad, numeric)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert out.data.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_projector_selects_rows(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert out.data.tolist() == [[5.0, 6.0], [0.0, 0.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients_match_finite_differences(self, rng):
        check_op_gradients(T.matmul,
                           [lambda r: r.normal(size=(3, 3)), lambda r: r.normal(size=(3, 3))],
                           rng)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_sums(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 9.0

    def test_output_dims_formula(self, rng):
        out = T.conv2d(Tensor(rng.normal(size=(2, 3, 8, 8))),
                       Tensor(rng.normal(size=(4, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 4, 4, 4)

    def test_nonpositive_output_rejected(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_gradients_match_finite_differences(self, rng, stride, padding):
        check_op_gradients(
            lambda x, k: T.conv2d(x, k, stride=stride, padding=padding),
            [lambda r: r.normal(size=(2, 3, 8, 8)), lambda r: r.normal(size=(4, 3, 3, 3))],
            rng, instances=2)


class TestElementwiseAndStructural:
    def test_relu_sign_split(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_gradients(self, rng):
        check_op_gradients(T.relu, [lambda r: spread_values(r, (4, 5))], rng)

    def test_add_broadcast_bias(self, rng):
        check_op_gradients(T.add,
                           [lambda r: r.normal(size=(4, 3)), lambda r: r.normal(size=(3,))],
                           rng)

    def test_add_shape_error(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_scale_gradients(self, rng):
        check_op_gradients(lambda x: T.scale(x, -2.5), [lambda r: r.normal(size=(3, 4))], rng)

    def test_flatten_roundtrip_gradients(self, rng):
        check_op_gradients(T.flatten, [lambda r: r.normal(size=(2, 3, 2, 2))], rng)


class TestPooling:
    def test_maxpool_unique_max_forward_backward(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]], requires_grad=True)
        out = T.maxpool2d(x, 2)
        assert out.data.ravel().tolist() == [4.0]
        out.backward()
        assert x.grad.ravel().tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_maxpool_tie_breaks_first_row_major(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = T.maxpool2d(x, 2)
        out.backward()
        assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_maxpool_gradients(self, rng):
        check_op_gradients(lambda x: T.maxpool2d(x, 2),
                           [lambda r: spread_values(r, (2, 3, 6, 6))], rng)

    def test_avgpool_uniform_share(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        out = T.avgpool2d(x, 2)
        out.backward()
        assert np.allclose(x.grad, 0.25)

    def test_avgpool_gradients(self, rng):
        check_op_gradients(lambda x: T.avgpool2d(x, 2),
                           [lambda r: r.normal(size=(2, 3, 6, 6))], rng)

    def test_global_avgpool_gradients(self, rng):
        check_op_gradients(T.global_avgpool, [lambda r: r.normal(size=(2, 3, 4, 4))], rng)


class TestSoftmaxCrossEntropy:
    def test_uniform_scores_give_log_k(self):
        for k in (2, 3, 10, 37):
            loss = T.softmax_cross_entropy(Tensor(np.zeros((5, k))), np.zeros(5, dtype=int))
            assert abs(loss.item() - np.log(k)) < 1e-9

    def test_confident_correct_is_near_zero(self):
        scores = np.zeros((1, 4))
        scores[0, 2] = 30.0
        loss = T.softmax_cross_entropy(Tensor(scores), [2])
        assert loss.item() < 1e-12

    def test_label_out_of_range_names_sample(self):
        with pytest.raises(DataError, match="sample 1"):
            T.softmax_cross_entropy(Tensor(np.zeros((3, 2))), [0, 5, 1])

    def test_large_scores_stable(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 1000.0]]), [0])
        assert abs(loss.item() - np.log(2)) < 1e-9

    def test_gradients_match_finite_differences(self, rng):
        labels = rng.integers(0, 5, size=4)
        for _ in range(5):
            a = rng.normal(size=(4, 5))
            t = Tensor(a, requires_grad=True)
            loss = T.softmax_cross_entropy(t, labels)
            loss.backward()
            numeric = numerical_grad(
                lambda: T.softmax_cross_entropy(Tensor(a), labels).item(), a)
            assert_grads_close(t.grad, numeric)

    def test_softmax_rows_sum_to_one(self, rng):
        probs = T.softmax(rng.normal(size=(20, 7)) * 10)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12


class TestBatchNorm:
    def _apply(self, x, gamma, beta, training):
        return T.batchnorm2d(x, gamma, beta, np.zeros(x.shape[1]), np.ones(x.shape[1]),
                             momentum=0.1, eps=1e-5, training=training)

    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.normal(2.0, 3.0, size=(8, 3, 4, 4)))
        out = self._apply(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-12
        assert np.abs(out.data.std(axis=(0, 2, 3)) - 1.0).max() < 1e-3

    def test_eval_mode_uses_running_stats_only(self, rng):
        run_mean = np.array([1.0, -2.0])
        run_var = np.array([4.0, 0.25])
        x = rng.normal(size=(3, 2, 2, 2))
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            run_mean, run_var, 0.1, 1e-5, training=False)
        expected = (x - run_mean[None, :, None, None]) / np.sqrt(run_var + 1e-5)[None, :, None, None]
        assert np.allclose(out.data, expected)
        assert run_mean.tolist() == [1.0, -2.0]  # untouched

    def test_frozen_training_keeps_stats(self, rng):
        run_mean = np.zeros(2)
        run_var = np.ones(2)
        T.batchnorm2d(Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(np.ones(2)),
                      Tensor(np.zeros(2)), run_mean, run_var, 0.1, 1e-5,
                      training=True, update_stats=False)
        assert run_mean.tolist() == [0.0, 0.0]
        assert run_var.tolist() == [1.0, 1.0]

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients_match_finite_differences(self, rng, training):
        check_op_gradients(
            lambda x, g, b: self._apply(x, g, b, training),
            [lambda r: r.normal(size=(4, 2, 3, 3)),
             lambda r: r.uniform(0.5, 1.5, size=2),
             lambda r: r.normal(size=2)],
            rng, instances=3)


class TestGraphMechanics:
    def test_gradient_accumulates_across_shared_use(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        out = T.add(x, T.scale(x, 2.0))
        out.backward()
        assert np.allclose(x.grad, 3.0)

    def test_backward_twice_doubles_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        out = T.relu(x)
        out.backward()
        once = x.grad.copy()
        out.backward()
        assert np.array_equal(x.grad, 2.0 * once)

    def test_fresh_backward_after_zero_reproduces(self, rng):
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = T.softmax_cross_entropy(T.matmul(x, w), [0, 1, 0, 1])
        loss.backward()
        first = w.grad.copy()
        w.zero_grad()
        x.zero_grad()
        loss2 = T.softmax_cross_entropy(T.matmul(x, w), [0, 1, 0, 1])
        loss2.backward()
        assert np.array_equal(w.grad, first)

    def test_topo_visits_each_node_once(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        y = T.add(x, x)
        z = T.add(y, y)
        order = T.topo_order(z)
        assert len(order) == len({id(n) for n in order}) == 3
        assert order.index(z) > order.index(y) > order.index(x)

    def test_no_grad_leaves_stay_none(self, rng):
        x = Tensor(rng.normal(size=(2, 2)))
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        out = T.matmul(x, w)
        out.backward()
        assert x.grad is None
        assert w.grad is not None
