import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entadapt import tensorcore as tc
from entadapt.errors import ContractError, DimensionError, NonFiniteError
from entadapt.gradcheck import check_gradients, check_op, op_cases
from entadapt.params import AdamState, ParameterStore, adam_step
from entadapt.tensorcore import Tensor


def leaf(rng, *shape):
    return Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        out = tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(0)
        A, B = leaf(rng, 3, 3), leaf(rng, 3, 3)
        assert check_gradients(lambda: tc.sum(tc.matmul(A, B)), [A]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_no_overflow(self):
        y = tc.softmax(Tensor([1000.0, 0.0])).data
        assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300

    def test_matches_high_precision(self):
        x = [1.0, 2.0, 3.0]
        mpmath.mp.dps = 50
        lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in x))
        expected = [float(mpmath.exp(v - lse)) for v in x]
        np.testing.assert_allclose(tc.softmax(Tensor(x)).data, expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(tc.log_softmax(Tensor(x)).data, [float(v - lse) for v in x], atol=1e-12)

    def test_empty(self):
        with pytest.raises(DimensionError):
            tc.softmax(Tensor(np.zeros(0)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_normalised(self, xs):
        y = tc.softmax(Tensor(xs)).data
        assert abs(y.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(tc.log_softmax(Tensor(xs)).data, np.log(y), atol=1e-12)


class TestLayernorm:
    def test_constant_row(self):
        out = tc.layernorm(Tensor([[5.0, 5, 5, 5]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_normalised_row(self):
        out = tc.layernorm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-5)

    def test_too_narrow(self):
        with pytest.raises(DimensionError):
            tc.layernorm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
        w = rng.normal(size=(3, 5))
        assert check_gradients(lambda: tc.sum(tc.mul_const(tc.layernorm(x, g, b), w)), [x, g, b]) < 1e-5


# every differentiable op, weighted so the scalar loss depends on every output entry
@pytest.mark.parametrize("name", list(op_cases(np.random.default_rng(0))))
def test_op_gradients(name):
    assert check_op(name, zlib.crc32(name.encode())) < 1e-5


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tc.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tc.sum(tc.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tc.sum(x).backward()
        tc.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [2, 2])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            tc.scale(x, 2.0).backward()

    def test_frozen_grad_untouched(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        frozen = Tensor([3.0, 4.0])
        tc.sum(tc.mul(x, frozen)).backward()
        assert frozen.grad is None
        np.testing.assert_array_equal(x.grad, [3, 4])

    def test_tape_visits_each_op_once_in_reverse(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tc.exp(x)
        z = tc.mul(y, y)
        loss = tc.sum(tc.add(z, y))
        nodes = tc.tape(loss)
        ids = [n._id for n in nodes]
        assert ids == sorted(ids, reverse=True) and len(set(ids)) == len(ids)
        assert [n.op for n in nodes if not n.is_leaf] == ["sum", "add", "mul", "exp"]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with tc.no_grad():
            y = tc.exp(x)
        assert not y.requires_grad and y.is_leaf

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            tc.exp(Tensor([1000.0]))
        with pytest.raises(NonFiniteError):
            tc.log(Tensor([0.0]))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            a, w = leaf(rng, 4, 3), leaf(rng, 3, 3)
            loss = tc.sum(tc.log_softmax(tc.gelu(tc.matmul(a, w))))
            loss.backward()
            return loss.data.tobytes(), a.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_corruption_hook_breaks_gradcheck(self):
        rng = np.random.default_rng(2)
        a, w = leaf(rng, 3, 3), leaf(rng, 3, 3)
        with tc.corrupt_gradient("matmul"):
            assert check_gradients(lambda: tc.sum(tc.matmul(a, w)), [a]) > 0.1


class TestAdam:
    def _store(self, value, grad, trainable=True):
        p = ParameterStore()
        t = p.add("p", np.array([value]), "base", trainable)
        if trainable:
            t.grad[:] = grad
        return p

    def test_first_step(self):
        p = self._store(1.0, 1.0)
        adam_step(p, AdamState(), lr=0.1)
        np.testing.assert_allclose(p["p"].data, [0.9], atol=1e-8)

    def test_frozen_unchanged(self):
        p = ParameterStore()
        frozen = p.add("f", np.array([1.5, -2.0]), "base", trainable=False)
        live = p.add("t", np.array([1.0]), "lora")
        live.grad[:] = 1.0
        before = frozen.data.tobytes()
        adam_step(p, AdamState(), lr=0.1)
        assert frozen.data.tobytes() == before

    def test_zero_grad_no_change(self):
        p = self._store(0.3, 0.0)
        adam_step(p, AdamState(), lr=0.1)
        assert p["p"].data[0] == 0.3

    def test_group_learning_rates(self):
        p = ParameterStore()
        a = p.add("a", np.array([1.0]), "lora")
        c = p.add("c", np.array([1.0]), "speaker_codes")
        a.grad[:] = c.grad[:] = 1.0
        adam_step(p, AdamState(), lr={"lora": 0.1, "speaker_codes": 0.01})
        np.testing.assert_allclose([a.data[0], c.data[0]], [0.9, 0.99], atol=1e-8)

    def test_names_subset(self):
        p = ParameterStore()
        a = p.add("a", np.array([1.0]), "speaker_codes")
        b = p.add("b", np.array([1.0]), "speaker_codes")
        a.grad[:] = b.grad[:] = 1.0
        state = AdamState()
        adam_step(p, state, lr=0.1, names=["a"])
        assert b.data[0] == 1.0 and "b" not in state.m
