import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxset import diffcore as dc
from voxset.diffcore import DiffArray, Tape, grad_check


def leaf(a):
    return DiffArray(np.asarray(a, dtype=np.float64), requires_grad=True)


def triple_loop_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for t in range(q):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(DiffArray(np.eye(2)), DiffArray([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_annihilator(self):
        out = dc.matmul(DiffArray([[1.0, 2.0], [3.0, 4.0]]), DiffArray(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        out = dc.matmul(DiffArray(a), DiffArray(b)).data
        assert np.abs(out - triple_loop_matmul(a, b)).max() < 1e-12

    def test_shape_error_reports_both(self):
        with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 3))))

    def test_nan_rejected(self):
        with pytest.raises(dc.NaNInputError):
            dc.matmul(DiffArray([[np.nan]]), DiffArray([[1.0]]))

    def test_vjp(self):
        rng = np.random.default_rng(1)
        b = DiffArray(rng.normal(size=(4, 3)))
        assert grad_check(lambda a: dc.sum_all(dc.matmul(a, b) * dc.matmul(a, b)),
                          DiffArray(rng.normal(size=(2, 4)))) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(dc.softmax_lastdim(DiffArray([0.0, 0.0])).data, [0.5, 0.5])

    @pytest.mark.parametrize("c", [-1e6, -3.0, 0.0, 42.0, 1e6])
    def test_single_slot(self, c):
        assert dc.softmax_lastdim(DiffArray([c])).data.tolist() == [1.0]

    def test_no_overflow(self):
        out = dc.softmax_lastdim(DiffArray([1000.0, 0.0])).data
        assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12

    def test_nan_rejected(self):
        with pytest.raises(dc.NaNInputError):
            dc.softmax_lastdim(DiffArray([np.nan, 1.0]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, vals):
        out = dc.softmax_lastdim(DiffArray(np.array(vals).reshape(1, -1))).data
        assert abs(out.sum() - 1.0) < 1e-12


class TestBatchnorm:
    def params(self, d):
        return leaf(np.ones(d)), leaf(np.zeros(d)), dc.BatchNormState(d)

    def test_constant_column(self):
        g, b, s = self.params(1)
        out = dc.batchnorm1d(DiffArray(np.full((5, 1), 3.0)), g, b, s, train=True)
        assert np.abs(out.data).max() < 1e-12

    def test_already_normalized(self):
        g, b, s = self.params(1)
        out = dc.batchnorm1d(DiffArray([[-1.0], [1.0]]), g, b, s, train=True)
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-5)

    def test_random_batch_statistics(self):
        g, b, s = self.params(8)
        x = np.random.default_rng(3).normal(2.0, 5.0, size=(64, 8))
        out = dc.batchnorm1d(DiffArray(x), g, b, s, train=True).data
        assert np.abs(out.mean(axis=0)).max() < 1e-10
        assert np.abs(out.var(axis=0) - 1).max() < 1e-3

    def test_degenerate_batch(self):
        g, b, s = self.params(2)
        with pytest.raises(dc.DegenerateBatchError):
            dc.batchnorm1d(DiffArray(np.ones((1, 2))), g, b, s, train=True)

    def test_running_stats_and_eval(self):
        g, b, s = self.params(2)
        x = np.array([[0.0, 1.0], [2.0, 5.0]])
        dc.batchnorm1d(DiffArray(x), g, b, s, train=True)
        np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        out = dc.batchnorm1d(DiffArray(x[:1]), g, b, s, train=False).data
        np.testing.assert_allclose(out, (x[:1] - s.running_mean) / np.sqrt(s.running_var + 1e-5))

    def test_vjp_train(self):
        rng = np.random.default_rng(4)
        s = dc.BatchNormState(3)
        w = DiffArray(rng.normal(size=(6, 3)))

        def f(x, gamma, beta):
            return dc.sum_all(dc.batchnorm1d(x, gamma, beta, s, train=True) * w)

        err = grad_check(f, [DiffArray(rng.normal(size=(6, 3))), DiffArray(rng.normal(size=3)),
                             DiffArray(rng.normal(size=3))])
        assert err < 1e-5


class TestRelu:
    def test_definition(self):
        assert dc.relu(DiffArray([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_all_negative(self):
        x = leaf([-3.0, -1.0, -0.5])
        with Tape() as tape:
            y = dc.sum_all(dc.relu(x))
        tape.backward(y)
        assert y.item() == 0 and np.all(x.grad == 0)

    def test_gradient_at_three(self):
        x = leaf([3.0])
        with Tape() as tape:
            y = dc.sum_all(dc.relu(x))
        tape.backward(y)
        eps = 1e-6
        fd = (max(3 + eps, 0) - max(3 - eps, 0)) / (2 * eps)
        assert abs(x.grad[0] - fd) < 1e-8

    def test_subgradient_zero(self):
        x = leaf([0.0])
        with Tape() as tape:
            y = dc.sum_all(dc.relu(x))
        tape.backward(y)
        assert x.grad[0] == 0.0


class TestBackward:
    def test_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        with Tape() as tape:
            y = dc.sum_all(x)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_quadratic(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = dc.sum_all(x * x)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_composed_chain_matches_fd(self):
        rng = np.random.default_rng(5)
        w = DiffArray(rng.normal(size=(4, 5)))
        v = DiffArray(rng.normal(size=(3, 5)))

        def f(a):
            return dc.sum_all(dc.softmax_lastdim(dc.matmul(a, w)) * v)

        assert grad_check(f, DiffArray(rng.normal(size=(3, 4)))) < 1e-5

    def test_twice_is_error(self):
        x = leaf([1.0])
        with Tape() as tape:
            y = dc.sum_all(x)
        tape.backward(y)
        with pytest.raises(dc.BackwardError):
            tape.backward(y)
        tape.reset()

    def test_non_scalar(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = x * x
        with pytest.raises(dc.RankError):
            tape.backward(y)

    def test_detached_loss(self):
        x = leaf([1.0, 2.0])
        y = dc.sum_all(x)
        with pytest.raises(dc.UnreachableError):
            Tape().backward(y)

    def test_unreachable_leaf_has_no_grad(self):
        x, z = leaf([1.0]), leaf([2.0])
        with Tape() as tape:
            y = dc.sum_all(x * x)
            dc.sum_all(z)
        tape.backward(y)
        assert z.grad is None or np.all(z.grad == 0)

    def test_module_level_backward(self):
        x = leaf([2.0])
        with Tape() as tape:
            y = dc.sum_all(x * x * x)
        dc.backward(tape, y)
        assert x.grad[0] == 12.0

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 4))

        def run():
            with Tape():
                return dc.softmax_lastdim(dc.matmul(leaf(a), leaf(b))).data

        assert np.array_equal(run(), run())


class TestGradCheck:
    def test_sum_is_exact(self):
        x = DiffArray(np.random.default_rng(7).normal(size=(3, 4)))
        assert grad_check(dc.sum_all, x) < 1e-8   # finite-difference rounding only

    def test_softmax_dot(self):
        rng = np.random.default_rng(8)
        v = DiffArray(rng.normal(size=6))
        assert grad_check(lambda x: dc.sum_all(dc.softmax_lastdim(x) * v),
                          DiffArray(rng.normal(size=6)), eps=1e-6) < 1e-6

    def test_sabotaged_vjp_detected(self):
        def wrong_square(x):
            return dc.make_op(x.data ** 2, (x,), lambda g: (-2 * x.data * g,))

        x = DiffArray(np.array([0.7, -1.3, 2.0]))
        assert grad_check(lambda a: dc.sum_all(wrong_square(a)), x) > 0.5

    def test_sabotage_switch(self):
        x = DiffArray(np.array([0.7, -1.3, 2.0]))
        with dc.sabotage_vjp():
            assert grad_check(lambda a: dc.sum_all(a * a), x) > 0.5

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(dc.sum_all, DiffArray([1.0]), eps=1e-2)

    def test_nondeterministic_function(self):
        rng = np.random.default_rng(9)
        with pytest.raises(dc.InconsistencyError):
            grad_check(lambda x: dc.sum_all(x * float(rng.normal())), DiffArray([1.0, 2.0]))


PRIMITIVES = {
    "add_bias": lambda r: ((lambda a, b: dc.sum_all(dc.add(a, b) * dc.add(a, b))),
                           [r.normal(size=(4, 3)), r.normal(size=3)]),
    "sub": lambda r: ((lambda a, b: dc.sum_all(dc.sub(a, b) * dc.sub(a, b))),
                      [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
    "mul": lambda r: ((lambda a, b: dc.sum_all(dc.mul(a, b) * a)), [r.normal(size=(2, 5)), r.normal(size=5)]),
    "scale": lambda r: ((lambda a: dc.sum_all(dc.scale(a, -1.7) * a)), [r.normal(size=4)]),
    "matmul": lambda r: ((lambda a, b: dc.sum_all(dc.softmax_lastdim(dc.matmul(a, b)) * dc.matmul(a, b))),
                         [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "einsum_outer": lambda r: ((lambda a, b: dc.sum_all(dc.einsum("nk,nd->nkd", a, b) * dc.einsum("nk,nd->nkd", a, b))),
                               [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
    "einsum_batched": lambda r: ((lambda a, b: dc.sum_all(dc.softmax_lastdim(dc.einsum("nkd,nd->nk", a, b)))
                                  + dc.sum_all(dc.einsum("nkd,nd->nk", a, b) * dc.einsum("nkd,nd->nk", a, b))),
                                 [r.normal(size=(3, 2, 4)), r.normal(size=(3, 4))]),
    "relu": lambda r: ((lambda a: dc.sum_all(dc.relu(a) * a)), [r.normal(size=(4, 4)) + 0.05]),
    "softmax": lambda r: ((lambda a: dc.sum_all(dc.softmax_lastdim(a) * dc.softmax_lastdim(a * a))),
                          [r.normal(size=(2, 5))]),
    "reshape_transpose": lambda r: ((lambda a: dc.sum_all(dc.transpose(dc.reshape(a, (3, 2, 2)), (2, 0, 1))
                                                          * DiffArray(np.arange(12.0).reshape(2, 3, 2)))
                                     + dc.sum_all(a * a)), [r.normal(size=(4, 3))]),
    "take_rows": lambda r: ((lambda a: dc.sum_all(dc.take_rows(a, np.array([2, -1, 0, 2]))
                                                  * dc.take_rows(a, np.array([2, -1, 0, 2])))),
                            [r.normal(size=(3, 2))]),
    "place_rows": lambda r: ((lambda a: dc.sum_all(dc.place_rows(a, np.array([4, 0, 2]), 5)
                                                   * DiffArray(np.arange(10.0).reshape(5, 2))) + dc.sum_all(a * a)),
                             [r.normal(size=(3, 2))]),
    "concat": lambda r: ((lambda a, b: dc.sum_all(dc.concat([a, b], axis=1) * DiffArray(np.arange(10.0).reshape(2, 5)))
                          + dc.sum_all(a * a)), [r.normal(size=(2, 2)), r.normal(size=(2, 3))]),
    "conv2d": lambda r: ((lambda x, w, b: dc.sum_all(dc.conv2d(x, w, b, stride=1) * dc.conv2d(x, w, b, stride=1))),
                         [r.normal(size=(4, 5, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=3)]),
    "conv2d_stride2": lambda r: ((lambda x, w: dc.sum_all(dc.conv2d(x, w, None, stride=2) * dc.conv2d(x, w, None, stride=2))),
                                 [r.normal(size=(6, 4, 2)), r.normal(size=(3, 3, 2, 2))]),
    "upsample_crop": lambda r: ((lambda x: dc.sum_all(dc.crop2d(dc.upsample2x(x), 3, 5)
                                                      * DiffArray(np.arange(30.0).reshape(3, 5, 2)))), [r.normal(size=(2, 3, 2))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f, inputs = PRIMITIVES[name](rng)
    assert grad_check(f, [DiffArray(a) for a in inputs], eps=1e-6) < 1e-5


@settings(max_examples=120, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_grad_check_random_shapes(n, d, f, seed):
    # linear -> batch norm (n >= 2) -> relu -> softmax, scored against fixed weights
    rng = np.random.default_rng(seed)
    w_out = DiffArray(rng.normal(size=(n, f)))
    state = dc.BatchNormState(f)

    def fn(x, w, g, b):
        h = x @ w
        if n >= 2:
            h = dc.batchnorm1d(h, g, b, state, train=True)
        return dc.sum_all(dc.softmax_lastdim(dc.relu(h) + h) * w_out)

    x = rng.normal(size=(n, d))
    args = [x, rng.normal(size=(d, f)), rng.uniform(0.5, 1.5, f), rng.normal(size=f)]
    assert grad_check(fn, [DiffArray(a) for a in args]) < 1e-5


def test_unsupported_einsum_pattern():
    with pytest.raises(dc.DimensionError):
        dc.einsum("ij,jk->i", DiffArray(np.ones((2, 2))), DiffArray(np.ones((2, 2))))


def test_float32_opt_in_preserved():
    a = DiffArray(np.ones((2, 2), dtype=np.float32))
    assert (a @ a).dtype == np.float32
    assert DiffArray([1, 2]).dtype == np.float64


def test_conv2d_against_loops():
    rng = np.random.default_rng(11)
    x, w, b = rng.normal(size=(5, 4, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)
    out = dc.conv2d(DiffArray(x), DiffArray(w), DiffArray(b), stride=2).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((3, 2, 2))
    for i in range(3):
        for j in range(2):
            patch = xp[2 * i: 2 * i + 3, 2 * j: 2 * j + 3]
            ref[i, j] = np.einsum("abc,abcf->f", patch, w) + b
    assert np.abs(out - ref).max() < 1e-12
