import math

import numpy as np
import pytest

from mixtune import ContrastiveBatch, StateError, SupportQueue, mixed_loss, nn_lookup, nnclr_loss, queue_push
from mixtune.numeric import central_diff_grad


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _filled_queue(rng, n, d, capacity=None):
    q = SupportQueue(capacity or max(n, 4))
    queue_push(q, _unit(rng, n, d))
    return q


def _eq1_term(nn_i, z_pos, l, tau):
    """Literal single-term evaluation: -log softmax over positives at l."""
    sims = np.array([float(nn_i @ zp) / tau for zp in z_pos])
    return -math.log(math.exp(sims[l]) / np.sum(np.exp(sims)))


class TestSupportQueue:
    def test_fifo_eviction(self):
        q = SupportQueue(3, dim=2)
        vecs = np.eye(2)[[0, 1, 0, 1]] * 1.0
        vecs = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
        queue_push(q, vecs)
        assert len(q) == 3
        np.testing.assert_array_equal(q.entries, vecs[1:])

    def test_push_batch_of_capacity(self):
        rng = np.random.default_rng(0)
        vecs = _unit(rng, 5, 3)
        q = SupportQueue(5)
        queue_push(q, vecs)
        np.testing.assert_array_equal(q.entries, vecs)

    def test_two_pushes_preserve_order(self):
        rng = np.random.default_rng(1)
        a, b = _unit(rng, 4, 3), _unit(rng, 4, 3)
        q = SupportQueue(8)
        queue_push(q, a)
        queue_push(q, b)
        np.testing.assert_array_equal(q.entries, np.vstack([a, b]))

    def test_never_exceeds_capacity_random_pushes(self):
        rng = np.random.default_rng(2)
        q = SupportQueue(17)
        pushed = []
        for _ in range(50):
            batch = _unit(rng, int(rng.integers(1, 9)), 4)
            pushed.extend(batch)
            queue_push(q, batch)
            assert len(q) <= 17
            np.testing.assert_array_equal(q.entries, np.array(pushed[-len(q):]))

    def test_rejects_unnormalized(self):
        q = SupportQueue(4)
        with pytest.raises(ValueError, match="unit-norm"):
            queue_push(q, np.array([[1.0, 1.0]]))

    def test_rejects_dim_change(self):
        q = SupportQueue(4)
        queue_push(q, np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError, match="dim"):
            queue_push(q, np.array([[1.0, 0.0, 0.0]]))


class TestNNLookup:
    def test_self_is_nearest(self):
        z = np.array([1.0, 0.0])
        q = SupportQueue(2)
        queue_push(q, np.stack([z, np.array([0.0, 1.0])]))
        np.testing.assert_allclose(nn_lookup(q, z, 1), z)

    def test_k_equals_entries_returns_normalized_mean(self):
        a = np.array([np.cos(0.3), np.sin(0.3)])
        b = np.array([np.cos(-0.3), np.sin(-0.3)])
        q = SupportQueue(2)
        queue_push(q, np.stack([a, b]))
        out = nn_lookup(q, np.array([1.0, 0.0]), 2)
        mean = (a + b) / 2
        np.testing.assert_allclose(out, mean / np.linalg.norm(mean), atol=1e-12)

    def test_dot_product_selection(self):
        q = SupportQueue(2)
        queue_push(q, np.array([[1.0, 0.0], [0.0, 1.0]]))
        out = nn_lookup(q, np.array([0.6, 0.8]), 1)
        np.testing.assert_array_equal(out, [0.0, 1.0])  # 0.8 > 0.6

    def test_tie_breaks_to_lowest_insertion_index(self):
        q = SupportQueue(3)
        queue_push(q, np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]))
        out = nn_lookup(q, np.array([0.0, 1.0]), 1)
        np.testing.assert_array_equal(out, [0.0, 1.0])
        # both copies tie; k=2 must pick indices 0 and 2, not the orthogonal one
        out2 = nn_lookup(q, np.array([0.0, 1.0]), 2)
        np.testing.assert_allclose(out2, [0.0, 1.0])

    def test_empty_queue_is_state_error(self):
        with pytest.raises(StateError):
            nn_lookup(SupportQueue(4), np.array([1.0, 0.0]), 1)

    def test_k_out_of_bounds(self):
        q = SupportQueue(4)
        queue_push(q, np.array([[1.0, 0.0]]))
        with pytest.raises(IndexError):
            nn_lookup(q, np.array([1.0, 0.0]), 2)


def _diag_cb(z, z_pos, tau):
    return ContrastiveBatch(z=z, z_pos=z_pos, y=np.eye(z.shape[0]), tau=tau)


class TestNnclrLoss:
    def test_uniform_similarities_give_log_batch(self):
        rng = np.random.default_rng(3)
        z_pos = np.tile(_unit(rng, 1, 6), (4, 1))  # identical positives
        z = _unit(rng, 4, 6)
        q = _filled_queue(rng, 8, 6)
        loss, _, _ = nnclr_loss(_diag_cb(z, z_pos, 0.2), q, 1)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_two_anchor_hand_value(self):
        # sims rows are [1, 0] and [0, 1] at tau=1 -> loss = ln(1 + e^-1)
        e = np.eye(2)
        q = SupportQueue(2)
        queue_push(q, e)
        loss, _, _ = nnclr_loss(_diag_cb(e, e, 1.0), q, 1)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)

    def test_temperature_flattens(self):
        rng = np.random.default_rng(4)
        z = _unit(rng, 4, 8)
        z_pos = _unit(rng, 4, 8)
        q = _filled_queue(rng, 6, 8)
        l1, _, _ = nnclr_loss(_diag_cb(z, z_pos, 0.1), q, 1)
        l2, _, _ = nnclr_loss(_diag_cb(z, z_pos, 0.2), q, 1)
        assert abs(l2 - math.log(4)) < abs(l1 - math.log(4))

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            _diag_cb(np.eye(2), np.eye(2), 0.0)

    def test_requires_one_hot_rows(self):
        rng = np.random.default_rng(5)
        q = _filled_queue(rng, 4, 3)
        cb = ContrastiveBatch(z=np.eye(3), z_pos=np.eye(3),
                              y=np.full((3, 3), 1 / 3), tau=1.0)
        with pytest.raises(ValueError, match="one-hot"):
            nnclr_loss(cb, q, 1)


class TestMixedLoss:
    def test_one_hot_equals_nnclr_bitwise(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
            z, z_pos = _unit(rng, b, d), _unit(rng, b, d)
            q = _filled_queue(rng, int(rng.integers(1, 12)), d)
            y = np.zeros((b, b))
            y[np.arange(b), rng.integers(0, b, size=b)] = 1.0
            tau = float(rng.uniform(0.05, 2.0))
            k = int(rng.integers(1, len(q) + 1))
            cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=tau)
            la, _, ga = nnclr_loss(cb, q, k)
            lb, _, gb = mixed_loss(cb, q, k)
            assert la == lb  # bit-for-bit
            np.testing.assert_array_equal(ga, gb)

    def test_two_term_hand_value(self):
        # per-anchor sims [1, 0], y = [0.5, 0.5], tau=1:
        # 0.5*ln(1+e^-1) + 0.5*(1 + ln(1+e^-1)) = ln(1+e^-1) + 0.5
        e = np.eye(2)
        q = SupportQueue(2)
        queue_push(q, e)
        cb = ContrastiveBatch(z=e, z_pos=e, y=np.full((2, 2), 0.5), tau=1.0)
        loss, _, _ = mixed_loss(cb, q, 1)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)) + 0.5, abs=1e-12)

    def test_uniform_similarities_any_labels(self):
        rng = np.random.default_rng(7)
        z_pos = np.tile(_unit(rng, 1, 5), (4, 1))
        z = _unit(rng, 4, 5)
        q = _filled_queue(rng, 5, 5)
        y = rng.dirichlet(np.ones(4), size=4)
        cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=0.15)
        loss, _, _ = mixed_loss(cb, q, 1)
        assert loss == pytest.approx(math.log(4), abs=1e-9)

    def test_row_sum_validation(self):
        rng = np.random.default_rng(8)
        q = _filled_queue(rng, 4, 3)
        cb = ContrastiveBatch(z=np.eye(3), z_pos=np.eye(3), y=np.eye(3), tau=1.0)
        cb.y = cb.y * 0.9  # mutate after construction
        with pytest.raises(ValueError, match="sum to 1"):
            mixed_loss(cb, q, 1)

    def test_construction_rejects_bad_rows(self):
        with pytest.raises(ValueError, match="sum to 1"):
            ContrastiveBatch(z=np.eye(2), z_pos=np.eye(2),
                             y=np.array([[0.5, 0.4], [0.0, 1.0]]), tau=1.0)

    def test_loss_nonnegative_and_floor(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            b, d = int(rng.integers(2, 7)), int(rng.integers(2, 10))
            cb = ContrastiveBatch(z=_unit(rng, b, d), z_pos=_unit(rng, b, d),
                                  y=rng.dirichlet(np.ones(b), size=b),
                                  tau=float(rng.uniform(0.05, 1.0)))
            q = _filled_queue(rng, 6, d)
            loss, _, _ = mixed_loss(cb, q, 1)
            assert loss >= 0.0

    def test_argmin_at_max_similarity(self):
        # over one-hot label positions, the loss is smallest at argmax sim
        rng = np.random.default_rng(10)
        d = 6
        z, z_pos = _unit(rng, 3, d), _unit(rng, 3, d)
        q = _filled_queue(rng, 5, d)
        losses = []
        sims_row0 = None
        for pos in range(3):
            y = np.eye(3)
            y[0] = 0.0
            y[0, pos] = 1.0
            cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=0.3)
            loss, _, _ = mixed_loss(cb, q, 1)
            losses.append(loss)
            if sims_row0 is None:
                nn0 = nn_lookup(q, z[0], 1)
                sims_row0 = z_pos @ nn0
        assert int(np.argmin(losses)) == int(np.argmax(sims_row0))

    def test_oracle_term_by_term_composition(self):
        # cross-entropy formulation == sum_l y[l] * (separate single-target
        # evaluations), composed anchor by anchor
        rng = np.random.default_rng(11)
        for _ in range(50):
            b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
            z, z_pos = _unit(rng, b, d), _unit(rng, b, d)
            q = _filled_queue(rng, int(rng.integers(2, 10)), d)
            y = rng.dirichlet(np.ones(b), size=b)
            tau = float(rng.uniform(0.1, 1.0))
            k = int(rng.integers(1, min(3, len(q)) + 1))
            cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=tau)
            loss, _, _ = mixed_loss(cb, q, k)
            oracle = np.mean([
                sum(y[i, l] * _eq1_term(nn_lookup(q, z[i], k), z_pos, l, tau) for l in range(b))
                for i in range(b)
            ])
            assert abs(loss - oracle) < 1e-10

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        for trial in range(5):
            b, d = 4, 5
            z, z_pos = _unit(rng, b, d), _unit(rng, b, d)
            q = _filled_queue(rng, 6, d)
            y = rng.dirichlet(np.ones(b), size=b)
            cb = ContrastiveBatch(z=z, z_pos=z_pos, y=y, tau=0.3)
            loss, d_z, d_z_pos = mixed_loss(cb, q, 1)

            def f():
                return mixed_loss(cb, q, 1)[0]

            fd_pos = central_diff_grad(f, cb.z_pos)
            np.testing.assert_allclose(d_z_pos, fd_pos, rtol=1e-5, atol=1e-9)
            fd_z = central_diff_grad(f, cb.z)
            # lookup is a constant in differentiation: both sides vanish
            np.testing.assert_array_equal(d_z, np.zeros_like(d_z))
            np.testing.assert_allclose(fd_z, np.zeros_like(fd_z), atol=1e-9)
