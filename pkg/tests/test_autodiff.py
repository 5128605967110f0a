"""Tensor engine tests: op semantics, gradient correctness, tape rules.

Expected gradients come from central finite differences (eps=1e-5) or
hand derivatives; the op set is exercised one op at a time with frozen
random constants so every check is deterministic.
"""

import numpy as np
import pytest

from mwpgen.autodiff import (
    NonFiniteError,
    NondeterministicError,
    Tape,
    Tensor,
    UnknownOpError,
    add,
    concat,
    conv1d,
    div,
    embedding,
    exp,
    forward_op,
    gather_cols,
    grad_check,
    log,
    matmul,
    max_over_time,
    mul,
    narrow,
    neg,
    no_grad,
    numeric_gradient,
    reduce_sum,
    sigmoid,
    softmax,
    sub,
    tanh,
    tile_rows,
    transpose,
)

RNG = np.random.default_rng(20240811)
TOL = 1e-4


def const(*shape):
    return Tensor(RNG.normal(0.0, 0.8, size=shape))


# frozen partners for the single-input grad checks
C33 = const(3, 3)
C34 = const(3, 4)
C43 = const(4, 3)
C14 = const(1, 4)
C24 = const(2, 4)
C4 = const(4)
CPOS = Tensor(np.abs(RNG.normal(1.5, 0.3, size=(2, 4))) + 0.5)


def check(f, point, tol=TOL):
    err = grad_check(f, point, eps=1e-5)
    assert err < tol, err


class TestForwardSemantics:
    def test_matmul_identity(self):
        a = const(3, 3)
        out = matmul(Tensor(np.eye(3)), a)
        assert np.allclose(out.data, a.data)

    def test_softmax_symmetry(self):
        out = softmax(Tensor(np.zeros((1, 3))))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_softmax_shift_invariance_and_overflow(self):
        big = softmax(Tensor(np.array([[1000.0, 1000.0]])))
        assert np.allclose(big.data, [[0.5, 0.5]])
        a = np.array([[0.3, -1.2, 2.0]])
        assert np.allclose(softmax(Tensor(a)).data, softmax(Tensor(a + 500)).data)

    def test_softmax_rows_sum_to_one(self):
        out = softmax(const(5, 7))
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_sigmoid_values(self):
        assert sigmoid(Tensor(np.zeros((1, 1)))).data[0, 0] == 0.5
        extreme = sigmoid(Tensor(np.array([[-745.0, 745.0]])))
        assert np.all(np.isfinite(extreme.data))
        assert extreme.data[0, 0] < 1e-300 and extreme.data[0, 1] == 1.0

    def test_bias_add_broadcast(self):
        m = const(3, 4)
        b = const(4)
        out = add(m, b)
        assert np.allclose(out.data, m.data + b.data)

    def test_disallowed_broadcast(self):
        with pytest.raises(ValueError):
            add(const(3, 4), const(3, 1))

    def test_narrow_and_concat_roundtrip(self):
        m = const(4, 6)
        left = narrow(m, 1, 0, 3)
        right = narrow(m, 1, 3, 3)
        back = concat([left, right], axis=1)
        assert np.array_equal(back.data, m.data)

    def test_gather_cols_order(self):
        row = Tensor(np.array([[10.0, 20.0, 30.0, 40.0]]))
        out = gather_cols(row, [3, 0, 3])
        assert np.array_equal(out.data, [[40.0, 10.0, 40.0]])

    def test_tile_rows(self):
        out = tile_rows(Tensor(np.array([[1.0, 2.0]])), 3)
        assert out.data.shape == (3, 2)
        assert np.array_equal(out.data, np.tile([[1.0, 2.0]], (3, 1)))

    def test_embedding_rows(self):
        table = const(5, 3)
        out = embedding(table, [4, 0, 4])
        assert np.array_equal(out.data, table.data[[4, 0, 4]])
        with pytest.raises(IndexError):
            embedding(table, [5])

    def test_max_over_time_lowest_index_tie(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]]))
        with Tape() as tape:
            xt = Tensor(x.data.copy(), requires_grad=True)
            out = max_over_time(xt)
            loss = reduce_sum(out)
        tape.backward(loss)
        assert np.array_equal(out.data, [[3.0, 5.0]])
        # column 0 max is shared by rows 1 and 2 -> row 1 wins;
        # column 1 max is shared by rows 0 and 1 -> row 0 wins
        expected = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
        assert np.array_equal(xt.grad, expected)

    def test_maxpool_routes_one_unit_per_column(self):
        xt = Tensor(RNG.normal(size=(6, 5)), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(max_over_time(xt))
        tape.backward(loss)
        assert np.array_equal(xt.grad.sum(axis=0), np.ones(5))
        assert np.array_equal(np.sort(np.unique(xt.grad)), [0.0, 1.0])

    def test_conv1d_matches_naive_oracle(self):
        L, d, width, dout = 7, 3, 3, 4
        x = RNG.normal(size=(L, d))
        w = RNG.normal(size=(width * d, dout))
        b = RNG.normal(size=dout)
        out = conv1d(Tensor(x), Tensor(w), Tensor(b), width)
        naive = np.stack([
            x[i:i + width].reshape(-1) @ w + b for i in range(L - width + 1)
        ])
        assert np.allclose(out.data, naive)

    def test_conv1d_too_short(self):
        with pytest.raises(ValueError):
            conv1d(const(2, 3), const(9, 4), const(4), 3)

    def test_forward_op_dispatch(self):
        out = forward_op("tanh", Tensor(np.zeros((1, 2))))
        assert np.array_equal(out.data, np.zeros((1, 2)))
        with pytest.raises(UnknownOpError):
            forward_op("made_up_op", Tensor(np.zeros(1)))

    def test_nonfinite_forward_rejected(self):
        with pytest.raises(NonFiniteError):
            log(Tensor(np.array([0.0])))
        with pytest.raises(NonFiniteError):
            div(Tensor(np.ones(2)), Tensor(np.zeros(2)))

    def test_float64_everywhere(self):
        out = matmul(Tensor(np.eye(2, dtype=np.float32)), const(2, 2))
        assert out.data.dtype == np.float64


class TestGradients:
    """Per-op finite-difference checks with frozen constants."""

    def test_add(self):
        check(lambda x: reduce_sum(add(x, C34) * C34), const(3, 4))

    def test_bias_add(self):
        check(lambda x: reduce_sum(add(C34, x) * C34), const(4))

    def test_sub(self):
        check(lambda x: reduce_sum(sub(x, C34) * C34), const(3, 4))

    def test_mul(self):
        check(lambda x: reduce_sum(mul(x, C34) * C34), const(3, 4))

    def test_div(self):
        check(lambda x: reduce_sum(div(x, CPOS)), const(2, 4))

    def test_div_wrt_denominator(self):
        check(lambda x: reduce_sum(div(C24, x)), Tensor(CPOS.data.copy()))

    def test_neg(self):
        check(lambda x: reduce_sum(neg(x) * C34), const(3, 4))

    def test_matmul_lhs(self):
        check(lambda x: reduce_sum(matmul(x, C43) * C33), const(3, 4))

    def test_matmul_rhs(self):
        check(lambda x: reduce_sum(matmul(C34, x) * C33), const(4, 3))

    def test_transpose(self):
        check(lambda x: reduce_sum(transpose(x) * C43), const(3, 4))

    def test_concat(self):
        check(lambda x: reduce_sum(concat([x, C34], axis=0) * concat([C34, C34], axis=0)),
              const(3, 4))

    def test_narrow(self):
        check(lambda x: reduce_sum(narrow(x, 1, 1, 2) * C33.data[:, :2]), const(3, 4))

    def test_sigmoid(self):
        check(lambda x: reduce_sum(sigmoid(x) * C34), const(3, 4))

    def test_sigmoid_quarter_slope_at_zero(self):
        xt = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(sigmoid(xt))
        tape.backward(loss)
        assert np.allclose(xt.grad, 0.25)

    def test_tanh(self):
        check(lambda x: reduce_sum(tanh(x) * C34), const(3, 4))

    def test_tanh_scalar(self):
        check(lambda x: reduce_sum(tanh(x)), Tensor(np.array([0.3])), tol=1e-6)

    def test_exp(self):
        check(lambda x: reduce_sum(exp(x) * C34), const(3, 4))

    def test_log(self):
        check(lambda x: reduce_sum(log(x)), Tensor(CPOS.data.copy()))

    def test_softmax(self):
        check(lambda x: reduce_sum(softmax(x) * C34), const(3, 4))

    def test_reduce_sum_axis(self):
        check(lambda x: reduce_sum(reduce_sum(x, axis=1, keepdims=True) * C33.data[:, :1]),
              const(3, 4))

    def test_embedding(self):
        check(lambda x: reduce_sum(embedding(x, [0, 2, 2, 1]) * C43), const(3, 3))

    def test_gather_cols(self):
        check(lambda x: reduce_sum(gather_cols(x, [0, 3, 3]) * C14.data[:, :3]), const(1, 4))

    def test_tile_rows(self):
        check(lambda x: reduce_sum(tile_rows(x, 3) * C34), const(1, 4))

    def test_conv1d_wrt_input(self):
        w, b = const(4, 3), const(3)
        mixer = const(4, 3).data
        check(lambda x: reduce_sum(conv1d(x, w, b, 2) * mixer), const(5, 2))

    def test_conv1d_wrt_kernel(self):
        x, b = const(5, 2), const(3)
        check(lambda w: reduce_sum(conv1d(x, w, b, 2)), const(4, 3))

    def test_conv1d_wrt_bias(self):
        x, w = const(5, 2), const(4, 3)
        check(lambda b: reduce_sum(conv1d(x, w, b, 2)), const(3))

    def test_max_over_time(self):
        check(lambda x: reduce_sum(max_over_time(x) * C14), const(6, 4))

    def test_glu_fusion(self):
        w1, w2 = const(4, 4), const(4, 4)
        check(lambda x: reduce_sum(matmul(x, w1) * sigmoid(matmul(x, w2))), const(1, 4))

    def test_kl_term(self):
        # closed-form diagonal-Gaussian KL as a function of (mu, log sigma)
        mu_x = Tensor(np.array([[0.3, -0.2]]))
        ls_x = Tensor(np.array([[0.1, -0.4]]))

        def f(stats):
            mu_y = narrow(stats, 1, 0, 2)
            ls_y = narrow(stats, 1, 2, 2)
            var_x = exp(ls_x * 2.0)
            diff = mu_y - mu_x
            num = exp(ls_y * 2.0) + diff * diff
            return reduce_sum((ls_x - ls_y) + num / (var_x * 2.0) + (-0.5))

        check(f, const(1, 4))


class TestTape:
    def test_scalar_square(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x * x)
        tape.backward(loss)
        assert np.allclose(x.grad, 6.0)

    def test_named_gradient_map(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True, name="w")
        b = Tensor(np.zeros(2), requires_grad=True, name="b")
        with Tape() as tape:
            loss = reduce_sum(matmul(Tensor(np.ones((1, 2))), w) + b)
        grads = tape.backward(loss)
        assert set(grads) == {"w", "b"}
        assert np.allclose(grads["w"], 1.0)
        assert np.allclose(grads["b"], 1.0)

    def test_unreachable_param_absent(self):
        w = Tensor(np.ones(2), requires_grad=True, name="w")
        unused = Tensor(np.ones(2), requires_grad=True, name="unused")
        with Tape() as tape:
            loss = reduce_sum(w * 2.0)
        grads = tape.backward(loss)
        assert "unused" not in grads
        assert unused.grad is None

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x * 3.0 + x * 5.0)
        tape.backward(loss)
        assert np.allclose(x.grad, 8.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = x * 2.0
            loss = reduce_sum(x * 1.0)
        tape.backward(loss)
        assert y.grad is None
        assert np.allclose(x.grad, 1.0)

    def test_forward_determinism(self):
        a = const(4, 4)
        b = const(4, 4)
        r1 = tanh(matmul(a, b)).data
        r2 = tanh(matmul(a, b)).data
        assert np.array_equal(r1, r2)


class TestGradCheckTool:
    def test_detects_nondeterminism(self):
        state = {"n": 0.0}

        def flaky(x):
            state["n"] += 1.0
            return reduce_sum(x * state["n"])

        with pytest.raises(NondeterministicError):
            grad_check(flaky, const(2, 2))

    def test_unused_input_gives_zero_error(self):
        # the loss flows through a different tensor; x never joins the graph
        frozen = np.full((2, 2), 0.7)

        def f(x):
            w = Tensor(frozen.copy(), requires_grad=True)
            return reduce_sum(w * w)

        assert grad_check(f, const(2, 2)) == 0.0

    def test_numeric_gradient_quadratic(self):
        x = Tensor(np.array([1.0, -2.0]))
        g = numeric_gradient(lambda t: reduce_sum(t * t), x)
        assert np.allclose(g, [2.0, -4.0], atol=1e-6)
