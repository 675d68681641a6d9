"""Engine tests: op semantics, hand-computed oracles, finite-difference checks."""
import math

import numpy as np
import pytest

from pinlab import autodiff as ad


def t64(data, requires_grad=False):
    return ad.tensor(data, requires_grad=requires_grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        x = ad.tensor([[2.0, -1.0], [0.5, 3.0]])
        eye = ad.tensor(np.eye(2, dtype=np.float32))
        np.testing.assert_array_equal(ad.matmul(eye, x).data, x.data)

    def test_hand_product(self):
        a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        b = ad.tensor([[1.0], [1.0]])
        np.testing.assert_allclose(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_backward_sum_is_ones_bt(self):
        rng = np.random.default_rng(0)
        a = t64(rng.normal(size=(3, 4)), requires_grad=True)
        b = t64(rng.normal(size=(4, 2)))
        ad.sum_all(ad.matmul(a, b)).backward()
        expected = np.ones((3, 2)) @ b.data.T
        np.testing.assert_allclose(a.grad, expected, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))

    @pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)),
                                                 ((2, 3, 4), (4, 5)),
                                                 ((2, 2, 3, 4), (2, 2, 4, 3))])
    def test_gradcheck(self, shape_a, shape_b):
        rng = np.random.default_rng(7)
        a = t64(rng.normal(size=shape_a), requires_grad=True)
        b = t64(rng.normal(size=shape_b), requires_grad=True)

        def f():
            out = ad.matmul(a, b)
            return ad.sum_all(ad.mul(out, out))

        assert ad.finite_diff_check(f, [a, b]) < 1e-6


class TestLayerNorm:
    def test_constant_row_collapses_to_zero(self):
        x = ad.tensor(np.full((2, 5), 3.0))
        g = ad.tensor(np.ones(5))
        b = ad.tensor(np.zeros(5))
        out = ad.layer_norm(x, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_row(self):
        # mean 2, population std 1 -> normalized [-1, 1]
        x = ad.tensor([[1.0, 3.0]])
        out = ad.layer_norm(x, ad.tensor(np.ones(2)), ad.tensor(np.zeros(2)),
                            eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_requires_width_two(self):
        with pytest.raises(ValueError):
            ad.layer_norm(ad.tensor(np.ones((3, 1))), ad.tensor(np.ones(1)),
                          ad.tensor(np.zeros(1)))

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(4, 6)), requires_grad=True)
        g = t64(rng.normal(size=6), requires_grad=True)
        b = t64(rng.normal(size=6), requires_grad=True)

        def f():
            out = ad.layer_norm(x, g, b)
            return ad.sum_all(ad.mul(out, out))

        assert ad.finite_diff_check(f, [x, g, b]) < 1e-4


class TestSwiglu:
    def test_zero_input(self):
        x = ad.tensor(np.zeros((3, 4)))
        w1 = ad.tensor(np.random.default_rng(0).normal(size=(4, 5)))
        w2 = ad.tensor(np.random.default_rng(1).normal(size=(4, 5)))
        np.testing.assert_array_equal(ad.swiglu(x, w1, w2).data, 0.0)

    def test_scalar_value(self):
        one = ad.tensor([[1.0]])
        out = ad.swiglu(one, one, one)
        expected = 1.0 / (1.0 + math.exp(-1.0))
        np.testing.assert_allclose(out.data, [[expected]], rtol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = t64(rng.normal(size=(3, 4)), requires_grad=True)
        wg = t64(rng.normal(size=(4, 6)), requires_grad=True)
        wv = t64(rng.normal(size=(4, 6)), requires_grad=True)

        def f():
            return ad.sum_all(ad.swiglu(x, wg, wv))

        assert ad.finite_diff_check(f, [x, wg, wv]) < 1e-4


class TestCrossEntropy:
    def test_uniform_logits_give_log_v(self):
        v = 11
        logits = ad.tensor(np.zeros((4, v)))
        loss = ad.softmax_cross_entropy(logits, [1, 5, 0, 10], [True] * 4)
        assert abs(loss.item() - math.log(v)) < 1e-6

    def test_monotone_in_correct_logit(self):
        prev = None
        for magnitude in (0.0, 1.0, 4.0, 16.0):
            row = np.zeros((1, 5))
            row[0, 2] = magnitude
            loss = ad.softmax_cross_entropy(ad.tensor(row), [2], [True]).item()
            if prev is not None:
                assert loss < prev
            prev = loss
        assert prev < 1e-6

    def test_two_way_value(self):
        logits = ad.tensor([[0.0, math.log(3.0)]])
        loss = ad.softmax_cross_entropy(logits, [1], [True])
        assert abs(loss.item() - (-math.log(0.75))) < 1e-6

    def test_masked_positions_do_not_contribute(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(1, 6, 9))
        targets = rng.integers(0, 9, size=(1, 6))
        mask = np.array([[False, True, False, True, True, False]])
        l1 = ad.softmax_cross_entropy(ad.tensor(base), targets, mask).item()
        noisy = base.copy()
        noisy[~np.broadcast_to(mask[..., None], noisy.shape)] += 100.0
        l2 = ad.softmax_cross_entropy(ad.tensor(noisy), targets, mask).item()
        assert l1 == pytest.approx(l2, rel=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(ad.tensor(np.zeros((2, 3))), [0, 3],
                                     [True, True])

    def test_all_masked_is_error(self):
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(ad.tensor(np.zeros((2, 3))), [0, 1],
                                     [False, False])

    def test_gradcheck(self):
        rng = np.random.default_rng(11)
        logits = t64(rng.normal(size=(5, 7)), requires_grad=True)
        targets = rng.integers(0, 7, size=5)
        mask = np.array([True, False, True, True, False])

        def f():
            return ad.softmax_cross_entropy(logits, targets, mask)

        assert ad.finite_diff_check(f, [logits]) < 1e-6


class TestEmbedding:
    def test_first_row(self):
        table = ad.tensor(np.arange(12.0).reshape(4, 3))
        out = ad.embedding_lookup(table, np.array([0]))
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 2.0]])

    def test_duplicate_ids_accumulate(self):
        table = t64(np.random.default_rng(0).normal(size=(4, 3)),
                    requires_grad=True)
        out = ad.embedding_lookup(table, np.array([2, 2]))
        ad.sum_all(out).backward()
        np.testing.assert_allclose(table.grad[2], 2.0)
        np.testing.assert_allclose(table.grad[[0, 1, 3]], 0.0)

    def test_round_trip_vs_direct_indexing(self):
        rng = np.random.default_rng(5)
        table = ad.tensor(rng.normal(size=(10, 4)))
        ids = rng.integers(0, 10, size=(3, 7))
        out = ad.embedding_lookup(table, ids)
        np.testing.assert_array_equal(out.data, table.data[ids])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_lookup(ad.tensor(np.zeros((3, 2))), np.array([3]))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = ad.tensor([1.5, -2.0], requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        state = ad.adam_init([p])
        before = p.data.copy()
        ad.adam_step([p], state)
        np.testing.assert_array_equal(p.data, before)

    def test_step_count_increments(self):
        p = ad.tensor([0.0], requires_grad=True)
        state = ad.adam_init([p])
        for expected in (1, 2, 3):
            p.grad = np.ones(1, dtype=np.float32)
            ad.adam_step([p], state)
            assert state.step_count == expected

    def test_first_step_magnitude_is_lr(self):
        p = ad.tensor([0.0], requires_grad=True)
        state = ad.adam_init([p], lr=1e-3)
        p.grad = np.ones(1, dtype=np.float32)
        ad.adam_step([p], state)
        assert abs(-p.data[0] - 1e-3) < 1e-8

    def test_missing_gradient_errors(self):
        p = ad.tensor([0.0], requires_grad=True)
        state = ad.adam_init([p])
        with pytest.raises(ValueError):
            ad.adam_step([p], state)

    def test_frozen_param_refuses_update(self):
        p = ad.tensor([0.0], requires_grad=True)
        state = ad.adam_init([p])
        p.grad = np.ones(1, dtype=np.float32)
        p.freeze()
        with pytest.raises(ad.FrozenTensorError):
            ad.adam_step([p], state)


class TestFiniteDiff:
    def test_quadratic(self):
        x = t64([3.0], requires_grad=True)

        def f():
            return ad.sum_all(ad.mul(x, x))

        assert ad.finite_diff_check(f, [x]) < 1e-8
        f().backward()
        assert abs(x.grad[0] - 6.0) < 1e-10

    def test_linear_exact(self):
        x = t64([1.0, -2.0, 0.5], requires_grad=True)
        w = t64([2.0, 3.0, -1.0])

        def f():
            return ad.sum_all(ad.mul(x, w))

        assert ad.finite_diff_check(f, [x]) < 1e-10


class TestInvariants:
    def test_frozen_tensor_mutation_refused(self):
        p = ad.tensor([1.0])
        p.freeze()
        with pytest.raises(ad.FrozenTensorError):
            p.assign(np.array([2.0], dtype=np.float32))

    def test_fingerprint_changes_with_content(self):
        a = ad.tensor([1.0, 2.0])
        b = ad.tensor([1.0, 2.0])
        assert ad.fingerprint([("x", a)]) == ad.fingerprint([("x", b)])
        b.data[0] = 9.0
        assert ad.fingerprint([("x", a)]) != ad.fingerprint([("x", b)])

    def test_strict_mode_raises_on_nonfinite(self):
        ad.set_strict_checks(True)
        try:
            with pytest.raises(ad.NonFiniteError):
                ad.tensor([np.inf])
        finally:
            ad.set_strict_checks(False)

    def test_nonfinite_logits_rejected(self):
        bad = ad.tensor(np.array([[np.nan, 0.0]]))
        with pytest.raises(ad.NonFiniteError):
            ad.softmax_cross_entropy(bad, [0], [True])

    def test_no_input_mutation(self):
        rng = np.random.default_rng(2)
        x = ad.tensor(rng.normal(size=(3, 4)).astype(np.float32))
        snapshot = x.data.copy()
        y = ad.softmax_last(ad.scale(ad.add(x, x), 0.5))
        ad.mean_all(y)
        np.testing.assert_array_equal(x.data, snapshot)

    def test_clip_gradients(self):
        p = ad.tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 10.0, dtype=np.float32)
        assert ad.clip_gradients([p], 10.0) is True
        assert abs(np.linalg.norm(p.grad) - 10.0) < 1e-4
        assert ad.clip_gradients([p], 50.0) is False


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_ops_gradcheck_random_shapes(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = t64(rng.normal(size=(m, n)), requires_grad=True)
    y = t64(rng.normal(size=(m, n)), requires_grad=True)

    def f():
        z = ad.add(ad.mul(x, y), ad.silu(x))
        z = ad.softmax_last(z)
        return ad.mean_all(ad.mul(z, ad.sigmoid(y)))

    assert ad.finite_diff_check(f, [x, y]) < 1e-4
