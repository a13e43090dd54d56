import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsclab import autodiff as ad
from gsclab.autodiff import ContractViolation, Tensor
from gsclab.gradcheck import check, numeric_grad, relative_error


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestTensor:
    def test_grad_buffer_matches_shape(self):
        t = leaf(np.ones((2, 3)))
        assert t.grad.shape == t.shape
        assert Tensor(np.ones(3)).grad is None

    def test_integer_input_uses_default_dtype(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_overflow_is_an_error(self):
        with pytest.raises(FloatingPointError):
            ad.exp(Tensor([1000.0]))

    def test_sqrt_rejects_negative(self):
        with pytest.raises(ContractViolation):
            ad.sqrt(Tensor([-1.0]))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        out = ad.conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)), padding=1)
        assert out.shape == (1, 3, 4, 4)
        assert not out.data.any()

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(1, 2, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((1, 3, 4, 5))
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    want[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
        got = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1).data
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.normal(size=(2, 3, 5, 5)))
        k = leaf(rng.normal(size=(4, 3, 3, 3)))
        b = leaf(rng.normal(size=4))
        err = check(lambda: ad.reduce_sum(ad.conv2d(x, k, b, padding=1)), [x, k, b])
        assert err < 1e-3

    @pytest.mark.parametrize("kshape, bshape", [((4, 2, 3, 3), (4,)), ((4, 3, 2, 2), (4,)), ((4, 3, 3, 3), (3,))])
    def test_shape_mismatch(self, kshape, bshape):
        with pytest.raises(ContractViolation):
            ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros(kshape)), Tensor(np.zeros(bshape)), 1)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor([0.0])).item() == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_sigmoid_of_log_composite_gradient(self):
        x = leaf(np.random.default_rng(4).uniform(0.2, 3.0, size=(3, 4)))
        assert check(lambda: ad.reduce_sum(ad.sigmoid(ad.log(x))), [x]) < 1e-3

    def test_log_clamps_probabilities(self):
        out = ad.log(Tensor([0.0, 1.0]), hi=1.0)
        np.testing.assert_allclose(out.data, [np.log(1e-7), 0.0])

    def test_broadcast_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
    def test_sigmoid_in_open_interval(self, x):
        y = ad.sigmoid(Tensor(x)).data
        assert np.all((y > 0) & (y < 1))


class TestSoftmax:
    def test_equal_logits(self):
        out = ad.softmax(Tensor(np.zeros((1, 4, 2, 2)))).data
        np.testing.assert_allclose(out, 0.25)

    def test_known_pair(self):
        out = ad.softmax(Tensor(np.array([[0.0, np.log(3.0)]])), axis=1).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(2, 3, 2, 2)))
        proj = rng.normal(size=x.shape)
        assert check(lambda: ad.reduce_sum(ad.mul(ad.softmax(x), proj)), [x]) < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 5, 3), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_normalised_and_shift_invariant(self, x, shift):
        p = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ad.softmax(Tensor(x + shift)).data, p, atol=1e-6)


class TestReductions:
    def test_constant_pools_to_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), 7.0))
        for axis in range(4):
            np.testing.assert_allclose(ad.pool_avg(x, axis).data, 7.0)

    def test_mean(self):
        assert ad.reduce_mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_mean_gradient(self):
        x = leaf([1.0, 2.0, 3.0])
        ad.backward(ad.reduce_mean(x))
        np.testing.assert_allclose(x.grad, 1 / 3)
        n = numeric_grad(lambda: float(x.data.mean()), x.data)
        np.testing.assert_allclose(n, 1 / 3, rtol=1e-6)

    def test_empty_axis(self):
        with pytest.raises(ContractViolation):
            ad.reduce_sum(Tensor(np.zeros((2, 0))), axis=1)


class TestBackward:
    def test_sum_gives_ones(self):
        w = leaf(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_independent_leaf_gets_zero(self):
        w, v = leaf([1.0, 2.0]), leaf([3.0])
        ad.backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(v.grad, [0.0])

    def test_repeated_calls_accumulate(self):
        w = leaf([1.0, 2.0])
        loss = ad.reduce_sum(ad.mul(w, w))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(w.grad, 4 * w.data)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractViolation):
            ad.backward(ad.mul(leaf([1.0, 2.0]), 2.0))

    def test_untaped_loss_rejected(self):
        with pytest.raises(ContractViolation):
            ad.backward(Tensor(1.0))

    def test_no_grad_records_nothing(self):
        w = leaf([1.0])
        with ad.no_grad():
            out = ad.mul(w, 3.0)
        assert out.is_leaf and not out.requires_grad

    def test_tape_visits_each_node_once_in_reverse(self):
        x = leaf([1.0, 2.0])
        a = ad.mul(x, x)
        b = ad.add(a, a)  # diamond: a is used twice
        loss = ad.reduce_sum(b)
        tape = ad.Tape.from_output(loss)
        assert tape.names() == ["mul", "add", "sum"]
        seqs = [t._node.seq for t in tape.records]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        loss.backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_bit_identical_across_runs(self):
        def run():
            rng = np.random.default_rng(11)
            x = leaf(rng.normal(size=(2, 3, 6, 6)))
            k = leaf(rng.normal(size=(4, 3, 3, 3)))
            b = leaf(rng.normal(size=4))
            loss = ad.reduce_mean(ad.softmax(ad.relu(ad.conv2d(x, k, b, 1))))
            loss.backward()
            return x.grad, k.grad, b.grad
        for g1, g2 in zip(run(), run()):
            assert g1.tobytes() == g2.tobytes()


class TestWorkerReduction:
    def test_thread_shards_sum_to_full_gradient_in_any_order(self):
        rng = np.random.default_rng(12)
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        b = leaf(rng.normal(size=3))
        shards = [rng.normal(size=(2, 2, 5, 5)) for _ in range(4)]

        def shard_grad(x):
            loss = ad.reduce_sum(ad.sigmoid(ad.conv2d(Tensor(x), w, b, 1)))
            return ad.grad(loss, [w, b])

        results = [None] * len(shards)

        def work(i):
            results[i] = shard_grad(shards[i])

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(shards))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        forward = ad.reduce_gradients(results)
        backward_order = ad.reduce_gradients(results[::-1])
        full = ad.grad(ad.reduce_sum(ad.sigmoid(ad.conv2d(Tensor(np.concatenate(shards)), w, b, 1))), [w, b])
        for f, r, g in zip(forward, backward_order, full):
            np.testing.assert_allclose(f, r, atol=1e-9, rtol=0)
            np.testing.assert_allclose(f, g, atol=1e-9, rtol=0)
        assert not w.grad.any()  # the functional path leaves .grad alone


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([5e-7]))[0] < 1e-3
    assert relative_error(np.array([1.0]), np.array([1.01]))[0] > 1e-3
