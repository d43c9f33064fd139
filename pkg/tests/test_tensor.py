"""Autodiff correctness: every op checked against central finite differences,
plus Adam against a hand-computed two-step oracle."""

from __future__ import annotations

import numpy as np
import pytest

from bnhtr import tensor as T
from bnhtr.optim import Adam, clip_global_norm
from bnhtr.tensor import Tape, Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    """Gradient checks need f64; restore the module default afterwards."""
    previous = T.default_dtype()
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float32" if previous == np.float32 else "float64")


def numeric_grad(func, arrays, index, eps=1e-6):
    """Central finite differences of scalar ``func(*arrays)`` w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    probe = base[index].reshape(-1)
    for i in range(probe.size):
        original = probe[i]
        probe[i] = original + eps
        up = func(*base)
        probe[i] = original - eps
        down = func(*base)
        probe[i] = original
        flat[i] = (up - down) / (2 * eps)
    return grad


def check_op(op, *shapes, seed=0, **kwargs):
    """Assert analytic grads of sum(op(*tensors)) match finite differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors, **kwargs)
        total = T.tsum(out)
        tape.backward(total)

    def scalar(*arrs):
        ts = [Tensor(a) for a in arrs]
        return float(T.tsum(op(*ts, **kwargs)).data)

    for i, tensor in enumerate(tensors):
        numeric = numeric_grad(scalar, arrays, i)
        assert tensor.grad is not None
        np.testing.assert_allclose(tensor.grad, numeric, rtol=1e-6, atol=1e-8)


class TestOpGradients:
    def test_add_broadcast(self):
        check_op(T.add, (3, 4), (3, 4))
        check_op(T.add, (3, 4), (4,))
        check_op(T.add, (2, 1, 4), (3, 1))

    def test_mul_broadcast(self):
        check_op(T.mul, (3, 4), (3, 4))
        check_op(T.mul, (3, 4), (1, 4))

    def test_scale(self):
        check_op(lambda a: T.scale(a, -2.5), (3, 4))

    def test_matmul(self):
        check_op(T.matmul, (3, 4), (4, 5))
        check_op(T.matmul, (2, 3, 4), (4, 5))  # broadcast rhs
        check_op(T.matmul, (2, 3, 4), (2, 4, 5))  # batched

    def test_tsum(self):
        check_op(T.tsum, (3, 4))

    def test_reshape(self):
        check_op(lambda a: T.reshape(a, (4, 3)), (3, 4))
        check_op(lambda a: T.reshape(a, (2, 2, 3)), (12,))

    def test_permute(self):
        check_op(lambda a: T.permute(a, (2, 0, 1)), (2, 3, 4))

    def test_transpose_last(self):
        check_op(T.transpose_last, (2, 3, 4))

    def test_narrow(self):
        check_op(lambda a: T.narrow(a, 1, 1, 2), (3, 5))
        check_op(lambda a: T.narrow(a, -1, 0, 3), (2, 5))

    def test_concat(self):
        check_op(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 4))
        check_op(lambda a, b, c: T.concat([a, b, c], axis=0), (1, 3), (2, 3), (1, 3))

    def test_softmax(self):
        check_op(T.softmax, (3, 5))
        # weighted sum makes the check sensitive to off-diagonal Jacobian
        weights = np.random.default_rng(1).standard_normal((3, 5))
        check_op(lambda a: T.mul(T.softmax(a), Tensor(weights)), (3, 5))

    def test_gelu(self):
        check_op(T.gelu, (4, 4))

    def test_layer_norm(self):
        check_op(T.layer_norm, (3, 8), (8,), (8,))
        check_op(lambda a, g, b: T.layer_norm(a, g, b, eps=1e-3), (2, 4, 8), (8,), (8,))

    def test_dropout(self):
        def op(a):
            return T.dropout(a, 0.4, np.random.default_rng(7))

        check_op(op, (6, 6))

    def test_embedding_lookup(self):
        ids = np.array([[0, 2], [1, 1]])
        check_op(lambda t: T.embedding_lookup(t, ids), (4, 5))

    def test_cross_entropy(self):
        targets = np.array([1, 4, 2])
        check_op(lambda l: T.cross_entropy(l, targets), (3, 5))

    def test_cross_entropy_with_ignored(self):
        targets = np.array([[1, -100], [3, 0]])
        check_op(lambda l: T.cross_entropy(l, targets), (2, 2, 5))


class TestOpValues:
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 7)) * 10)
        rows = T.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_softmax_stable_for_large_logits(self):
        x = Tensor(np.array([[1000.0, 1000.0, 999.0]]))
        out = T.softmax(x).data
        assert np.isfinite(out).all()

    def test_layer_norm_statistics(self):
        x = Tensor(np.random.default_rng(0).standard_normal((5, 16)) * 3 + 2)
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_gelu_known_values(self):
        out = T.gelu(Tensor(np.array([0.0, 1.0, -1.0]))).data
        np.testing.assert_allclose(out[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(out[1], 0.8411919906082768, rtol=1e-12)
        # gelu(x) - gelu(-x) == x since the gate and its mirror sum to 1
        np.testing.assert_allclose(out[1] - out[2], 1.0, rtol=1e-12)

    def test_cross_entropy_matches_manual(self):
        logits = np.log(np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]))
        value = T.cross_entropy(Tensor(logits), np.array([0, 1])).data
        expected = -(np.log(0.7) + np.log(0.8)) / 2
        np.testing.assert_allclose(value, expected, rtol=1e-12)

    def test_cross_entropy_ignore_index_drops_positions(self):
        logits = Tensor(np.random.default_rng(0).standard_normal((4, 6)))
        full = T.cross_entropy(logits, np.array([1, 2, 3, 4])).data
        partial = T.cross_entropy(logits, np.array([1, 2, -100, -100])).data
        first_two = T.cross_entropy(
            Tensor(logits.data[:2]), np.array([1, 2])
        ).data
        np.testing.assert_allclose(partial, first_two, rtol=1e-12)
        assert not np.allclose(full, partial)

    def test_cross_entropy_all_ignored_raises(self):
        logits = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            T.cross_entropy(logits, np.array([-100, -100]))

    def test_cross_entropy_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([[0], [1]]))

    def test_embedding_out_of_range_raises(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(IndexError):
            T.embedding_lookup(table, np.array([4]))

    def test_dropout_identity_at_zero(self):
        x = Tensor(np.ones((3, 3)), requires_grad=True)
        out = T.dropout(x, 0.0, np.random.default_rng(0))
        assert out is x

    def test_dropout_scales_survivors(self):
        x = Tensor(np.ones((1000,)))
        out = T.dropout(x, 0.25, np.random.default_rng(0)).data
        survivors = out[out != 0]
        np.testing.assert_allclose(survivors, 1.0 / 0.75)
        assert 0.6 < len(survivors) / 1000 < 0.9

    def test_dropout_bad_p_rejected(self):
        x = Tensor(np.ones(3))
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                T.dropout(x, p, np.random.default_rng(0))


class TestTape:
    def test_gradient_accumulates_across_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            out = T.add(T.mul(x, x), x)  # x^2 + x -> d/dx = 2x + 1
            tape.backward(out)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_tape_no_recording(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        out = T.mul(x, x)
        assert out.requires_grad
        assert x.grad is None  # nothing recorded, nothing to replay

    def test_constants_get_no_grad(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        c = Tensor(np.array([3.0]))
        with Tape() as tape:
            out = T.mul(x, c)
            tape.backward(out)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [3.0])

    def test_nested_tapes_are_independent(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as outer:
            a = T.mul(x, x)
            with Tape() as inner:
                b = T.mul(x, x)
                inner.backward(b)
            inner_grad = x.grad.copy()
            x.zero_grad()
            outer.backward(a)
        np.testing.assert_allclose(inner_grad, [4.0])
        np.testing.assert_allclose(x.grad, [4.0])

    def test_custom_seed_grad(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = T.scale(x, 3.0)
            tape.backward(out, grad=np.full((2, 2), 2.0))
        np.testing.assert_allclose(x.grad, np.full((2, 2), 6.0))

    def test_operator_sugar(self):
        a = Tensor(np.eye(2), requires_grad=True)
        b = Tensor(np.ones((2, 2)))
        with Tape() as tape:
            out = T.tsum((a @ b) + b * b)
            tape.backward(out)
        np.testing.assert_allclose(a.grad, np.full((2, 2), 2.0))


class TestDtypeSwitch:
    def test_set_default_dtype(self):
        T.set_default_dtype("f32")
        assert Tensor(np.zeros(2)).data.dtype == np.float32
        T.set_default_dtype("float64")
        assert Tensor(np.zeros(2)).data.dtype == np.float64

    def test_unknown_dtype_rejected(self):
        with pytest.raises(ValueError):
            T.set_default_dtype("float16")


class TestClipGlobalNorm:
    def test_no_clip_below_threshold(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([0.3, 0.0, 0.4])  # norm 0.5
        norm = clip_global_norm({"p": p}, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_allclose(p.grad, [0.3, 0.0, 0.4])

    def test_clips_jointly(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        a.grad = np.array([3.0])
        b.grad = np.array([4.0])  # joint norm 5
        norm = clip_global_norm({"a": a, "b": b}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(a.grad, [0.6])
        np.testing.assert_allclose(b.grad, [0.8])
        joint = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
        assert joint == pytest.approx(1.0)

    def test_skips_gradless_params(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        assert clip_global_norm({"p": p}, 1.0) == 0.0


class TestAdam:
    def test_two_steps_match_hand_computation(self):
        # Single scalar parameter, constant gradient of 2.0, defaults
        # beta1=0.9, beta2=0.999, eps=1e-8, lr=0.1.
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": p}, lr=0.1)

        # step 1: m=0.2, v=0.004, m_hat=2.0, v_hat=4.0
        #   update = 0.1 * 2 / (2 + 1e-8) -> p = 1 - 0.0999999995
        p.grad = np.array([2.0])
        opt.step()
        expected1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected1], rtol=1e-12)

        # step 2 with gradient 1.0:
        #   m = 0.9*0.2 + 0.1*1 = 0.28        m_hat = 0.28/(1-0.81)
        #   v = 0.999*0.004 + 0.001*1 = 0.004996
        #   v_hat = 0.004996/(1-0.998001)
        p.grad = np.array([1.0])
        opt.step()
        m_hat = 0.28 / (1 - 0.9**2)
        v_hat = 0.004996 / (1 - 0.999**2)
        expected2 = expected1 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, [expected2], rtol=1e-12)

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": p}, lr=0.5)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0])
        assert opt.t == 1  # time still advances

    def test_state_roundtrip_resumes_exactly(self):
        rng = np.random.default_rng(0)
        p1 = Tensor(rng.standard_normal(4), requires_grad=True)
        p2 = Tensor(p1.data.copy(), requires_grad=True)
        a = Adam({"w": p1}, lr=0.05)
        b = Adam({"w": p2}, lr=0.05)

        grads = [rng.standard_normal(4) for _ in range(4)]
        for g in grads[:2]:
            p1.grad = g.copy()
            a.step()
            p2.grad = g.copy()
            b.step()
        state = a.state_dict()
        # b continues after loading a's state; results must track a exactly.
        b.load_state_dict(state)
        for g in grads[2:]:
            p1.grad = g.copy()
            a.step()
            p2.grad = g.copy()
            b.step()
        np.testing.assert_array_equal(p1.data, p2.data)

    def test_state_dict_copies(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": p})
        state = opt.state_dict()
        state["m"]["w"][0] = 99.0
        assert opt.m["w"][0] == 0.0

    def test_load_rejects_mismatched_names(self):
        opt = Adam({"w": Tensor(np.zeros(2), requires_grad=True)})
        other = Adam({"x": Tensor(np.zeros(2), requires_grad=True)})
        with pytest.raises(ValueError):
            opt.load_state_dict(other.state_dict())

    def test_zero_grad_clears(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        Adam({"w": p}).zero_grad()
        assert p.grad is None
