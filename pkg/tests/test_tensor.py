import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from prompt_evolve import tensor as T
from prompt_evolve.tensor import DimensionError, GradTape, NonFiniteEvaluation, Tensor, check_gradients

finite = st.floats(-5, 5, allow_nan=False)


class TestTensorBasics:
    def test_data_is_read_only(self):
        t = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 3.0

    def test_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64

    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3)))

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_item_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_scalar_ops(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal((2.0 * x + 1.0).data, [3.0, 5.0])
        np.testing.assert_array_equal((1.0 - x).data, [0.0, -1.0])


class TestTape:
    def test_records_ops_in_order(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradTape() as tape:
            b = T.relu(a @ a)
            b.sum()
        assert tape.op_names[:2] == ["matmul", "relu"]

    def test_clear(self):
        a = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            (a * a).sum()
        tape.clear()
        assert len(tape) == 0

    def test_no_recording_outside_tape(self):
        a = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            pass
        (a * a).sum()
        assert len(tape) == 0

    def test_unused_source_gets_zeros(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            y = (a * a).sum()
        ga, gb = tape.gradient(y, [a, b])
        np.testing.assert_array_equal(ga, [2.0, 4.0])
        np.testing.assert_array_equal(gb, [0.0])

    def test_shared_subexpression_accumulates(self):
        a = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            y = (a * a + a).sum()
        (g,) = tape.gradient(y, [a])
        assert g[0] == 7.0

    def test_relu_subgradient_zero_at_kink(self):
        a = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        with GradTape() as tape:
            y = T.relu(a).sum()
        (g,) = tape.gradient(y, [a])
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


class TestNumerics:
    def test_softmax_stable_for_large_logits(self):
        s = T.softmax(Tensor([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(s.data, [[0.5, 0.5, 0.0]])

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_softmax_rows_sum_to_one(self, x):
        s = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s >= 0).all()

    def test_batched_matmul(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_slice_and_concat_roundtrip(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        left, right = T.slice_axis(x, 0, 1, axis=1), T.slice_axis(x, 1, 4, axis=1)
        np.testing.assert_array_equal(T.concat(left, right, axis=1).data, x.data)


class TestGradCheck:
    def test_suite_passes(self):
        for name, rep in T.gradcheck_suite(seed=3).items():
            assert rep.passed, (name, rep.max_rel_error)

    def test_detects_wrong_gradient(self):
        # a deliberately broken op: forward x^2, backward claims 3x
        def bad_square(x):
            return T._record("bad", x.data ** 2, (x,), lambda g: (3.0 * x.data * g,))

        rep = check_gradients(lambda x: bad_square(x).sum(), [Tensor([1.0, 2.0])])
        assert not rep.passed
        assert rep.max_rel_error > 0.3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_evaluation_is_reported(self):
        with pytest.raises(NonFiniteEvaluation, match="input 0"):
            check_gradients(lambda x: T.log(x).sum(), [Tensor([1e-6])], eps=1e-3)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            check_gradients(lambda x: x.sum(), [Tensor([1.0])], eps=0.0)

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
    def test_matmul_gradient_is_exact_bilinear(self, a, b):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with GradTape() as tape:
            y = (ta @ tb).sum()
        ga, gb = tape.gradient(y, [ta, tb])
        np.testing.assert_allclose(ga, np.ones((2, 2)) @ b.T, atol=1e-12)
        np.testing.assert_allclose(gb, a.T @ np.ones((2, 2)), atol=1e-12)
