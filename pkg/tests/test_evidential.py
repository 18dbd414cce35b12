import numpy as np
import pytest
from hypothesis import given, strategies as st

from otal import diffcore as dc
from otal.diffcore import finite_difference_check, tensor
from otal.evidential import (
    EvidentialOutput,
    MibState,
    bin_index,
    edl_grad_closed_form,
    edl_loss,
    edl_loss_batch,
    edl_nll,
    grad_norms_batch,
    influence_value,
    mib_edl_loss,
    mib_update_and_weight,
    mib_update_batch,
    one_hot,
    weighted_edl_loss,
)


class TestEvidentialOutput:
    def test_derived_quantities(self):
        out = EvidentialOutput(np.array([3.0, 1.0, 0.0]))
        assert np.array_equal(out.alpha, [4.0, 2.0, 1.0])
        assert out.strength == 7.0
        assert out.uncertainty == 3.0 / 7.0
        assert np.allclose(out.expected_prob, [4 / 7, 2 / 7, 1 / 7])
        assert abs(np.sum(out.expected_prob) - 1.0) < 1e-15

    def test_zero_evidence_is_maximally_uncertain(self):
        out = EvidentialOutput(np.zeros(5))
        assert out.uncertainty == 1.0

    def test_negative_evidence_rejected(self):
        with pytest.raises(ValueError):
            EvidentialOutput(np.array([1.0, -0.1]))

    @given(st.lists(st.floats(0, 1e3), min_size=2, max_size=21))
    def test_uncertainty_bounds(self, ev):
        out = EvidentialOutput(np.array(ev))
        assert 0.0 < out.uncertainty <= 1.0
        assert abs(np.sum(out.expected_prob) - 1.0) < 1e-12


class TestEdlLoss:
    def test_zero_evidence_gives_log_k(self):
        out = EvidentialOutput(np.zeros(3))
        assert abs(edl_loss(out, 1) - 1.0986122886681098) < 1e-12

    def test_hand_computed_two_class(self):
        out = EvidentialOutput(np.array([3.0, 1.0]))
        assert abs(edl_loss(out, 1) - 0.4054651081081644) < 1e-12

    def test_confident_correct_prediction_near_zero(self):
        out = EvidentialOutput(np.array([100.0, 0.0, 0.0]))
        assert abs(edl_loss(out, 1) - 0.019608471388376337) < 1e-12

    def test_label_out_of_range(self):
        out = EvidentialOutput(np.zeros(3))
        with pytest.raises(ValueError):
            edl_loss(out, 0)
        with pytest.raises(ValueError):
            edl_loss(out, 4)

    @given(
        st.lists(st.floats(0, 1e3), min_size=2, max_size=8),
        st.integers(1, 8),
    )
    def test_nonnegative(self, ev, label):
        if label > len(ev):
            label = 1
        out = EvidentialOutput(np.array(ev))
        assert edl_loss(out, label) >= 0.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        alpha = rng.uniform(1.0, 50.0, size=(20, 4))
        labels = rng.integers(1, 5, size=20)
        vec = edl_loss_batch(alpha, labels)
        for i in range(20):
            ref = edl_loss(EvidentialOutput(alpha[i] - 1.0), int(labels[i]))
            assert abs(vec[i] - ref) < 1e-12

    def test_tensor_route_matches_values(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(8, 5))
        labels = rng.integers(1, 6, size=8)
        loss = edl_nll(tensor(z), one_hot(labels, 5))
        ref = edl_loss_batch(np.exp(z) + 1.0, labels)
        assert np.allclose(loss.values, ref, rtol=1e-12)


class TestClosedFormGradient:
    def test_zero_evidence_is_stationary(self):
        out = EvidentialOutput(np.zeros(3))
        for label in (1, 2, 3):
            assert np.array_equal(edl_grad_closed_form(out, label), np.zeros(3))

    def test_hand_computed_case(self):
        out = EvidentialOutput(np.array([3.0, 1.0]))
        g = edl_grad_closed_form(out, 1)
        assert abs(g[0] - (-0.08333333333333331)) < 1e-15
        assert g[1] == 0.0

    @given(
        st.lists(st.floats(0, 1e3), min_size=2, max_size=21),
        st.data(),
    )
    def test_off_label_entries_zero_and_magnitude_bounded(self, ev, data):
        label = data.draw(st.integers(1, len(ev)))
        out = EvidentialOutput(np.array(ev))
        g = edl_grad_closed_form(out, label)
        mask = np.ones(len(ev), dtype=bool)
        mask[label - 1] = False
        assert np.all(g[mask] == 0.0)
        assert 0.0 <= abs(g[label - 1]) < 1.0

    @given(
        st.integers(2, 8),
        st.data(),
    )
    def test_matches_ones_direction_derivative_of_autodiff(self, k, data):
        # the closed form collapses the chain rule through S into a single
        # per-entry value; that equals the sum over logit coordinates of the
        # true gradient, i.e. the derivative along the all-ones direction
        z_list = data.draw(
            st.lists(st.floats(-6, 6), min_size=k, max_size=k)
        )
        label = data.draw(st.integers(1, k))
        z = np.array(z_list, dtype=np.float64).reshape(1, k)
        zt = tensor(z, requires_grad=True)
        loss = dc.sum_(edl_nll(zt, one_hot([label], k)))
        dc.backward(loss)
        autodiff_dir = float(np.sum(zt.grad))

        out = EvidentialOutput(np.exp(z[0]))
        g = edl_grad_closed_form(out, label)[label - 1]
        assert abs(autodiff_dir - g) <= 1e-10 * max(1.0, abs(g))

    def test_grad_norms_batch_matches_scalar(self):
        rng = np.random.default_rng(2)
        alpha = rng.uniform(1.0, 100.0, size=(30, 5))
        labels = rng.integers(1, 6, size=30)
        gn = grad_norms_batch(alpha, labels)
        for i in range(30):
            g = edl_grad_closed_form(EvidentialOutput(alpha[i] - 1.0), int(labels[i]))
            assert abs(gn[i] - np.sum(np.abs(g))) < 1e-15


class TestInfluenceValue:
    def test_zero_features(self):
        assert influence_value(np.array([0.5, -0.2]), np.zeros(4)) == 0.0

    def test_hand_computed(self):
        w = influence_value(np.array([-1 / 12, 0.0]), np.array([1.0, -2.0]))
        assert abs(w - 0.25) < 1e-12

    @given(
        st.lists(st.floats(-1, 1), min_size=1, max_size=8),
        st.lists(st.floats(-10, 10), min_size=1, max_size=16),
    )
    def test_factorization_equals_entrywise_l1(self, g, h):
        g = np.array(g)
        h = np.array(h)
        entrywise = float(np.sum(np.abs(np.outer(h, g))))
        fact = influence_value(g, h)
        assert abs(fact - entrywise) <= 1e-12 * max(1.0, entrywise)


class TestMibState:
    def test_initial_weights_are_one(self):
        state = MibState(num_bins=50)
        assert np.all(state.weights == 1.0)
        assert state.weights.shape == (50,)

    def test_epsilon_validated(self):
        with pytest.raises(ValueError):
            MibState(epsilon=1.5)

    def test_bin_boundaries_go_low(self):
        assert bin_index(0.0, 50) == 0
        assert bin_index(0.02, 50) == 0  # exact right edge of bin 0
        assert bin_index(0.020000001, 50) == 1
        assert bin_index(1.0, 50) == 49

    def test_bin_index_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            bin_index(-0.01, 50)
        with pytest.raises(ValueError):
            bin_index(1.01, 50)

    def test_momentum_one_keeps_unit_weight(self):
        state = MibState(epsilon=1.0, num_bins=10)
        for it in range(5):
            w = mib_update_and_weight(state, 0.3, 7.0, iteration=it)
            assert w == 1.0
        assert np.all(state.weights == 1.0)

    def test_hard_update(self):
        state = MibState(epsilon=0.0, num_bins=10)
        w = mib_update_and_weight(state, 0.45, 0.5, iteration=0)
        assert w == 0.5

    def test_momentum_update_value(self):
        state = MibState(epsilon=0.99, num_bins=10)
        w = mib_update_and_weight(state, 0.45, 0.5, iteration=0)
        assert abs(w - 0.995) < 1e-15

    def test_warmup_returns_ones_without_touching_state(self):
        state = MibState(epsilon=0.5, num_bins=10, warmup_start=100)
        w = mib_update_batch(state, [0.1, 0.9], [5.0, 3.0], iteration=99)
        assert np.array_equal(w, [1.0, 1.0])
        assert np.all(state.weights == 1.0)
        w = mib_update_batch(state, [0.1], [5.0], iteration=100)
        assert w[0] == 0.5 * 1.0 + 0.5 * 5.0

    def test_empty_bins_keep_previous_weight(self):
        state = MibState(epsilon=0.0, num_bins=4)
        mib_update_batch(state, [0.1], [2.0], iteration=0)
        assert state.weights[0] == 2.0
        mib_update_batch(state, [0.9], [3.0], iteration=1)
        assert state.weights[0] == 2.0  # untouched bin retained
        assert state.weights[3] == 3.0

    def test_batch_mean_within_bin(self):
        state = MibState(epsilon=0.0, num_bins=2)
        w = mib_update_batch(state, [0.1, 0.2, 0.8], [1.0, 3.0, 10.0], iteration=0)
        assert w[0] == 2.0 and w[1] == 2.0 and w[2] == 10.0


class TestMibEdlLoss:
    def _batch(self, seed, n=6, k=4, d=5):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, k))
        labels = rng.integers(1, k + 1, size=n)
        feats = rng.normal(size=(n, d))
        return z, labels, feats

    def test_empty_batch_flag(self):
        state = MibState()
        loss, matched = mib_edl_loss(
            tensor(np.zeros((0, 4))), np.zeros(0, dtype=int), np.zeros((0, 5)), state, 0
        )
        assert not matched
        assert loss.item() == 0.0

    def test_momentum_one_equals_plain_mean(self):
        z, labels, feats = self._batch(3)
        state = MibState(epsilon=1.0)
        loss, matched = mib_edl_loss(tensor(z), labels, feats, state, iteration=50)
        assert matched
        plain = float(np.mean(edl_loss_batch(np.exp(z) + 1.0, labels)))
        assert loss.item() == plain

    def test_weighted_combination(self):
        losses = tensor(np.array([0.4, 0.2]))
        out = weighted_edl_loss(losses, np.array([1.0, 2.0]))
        assert abs(out.item() - 0.4) < 1e-15

    def test_permutation_invariance(self):
        z, labels, feats = self._batch(7)
        perm = np.random.default_rng(0).permutation(len(labels))
        s1 = MibState(epsilon=0.9)
        s2 = MibState(epsilon=0.9)
        l1, _ = mib_edl_loss(tensor(z), labels, feats, s1, 0)
        l2, _ = mib_edl_loss(tensor(z[perm]), labels[perm], feats[perm], s2, 0)
        assert abs(l1.item() - l2.item()) <= 1e-12 * max(1.0, abs(l1.item()))
        assert np.allclose(s1.weights, s2.weights, rtol=1e-12)

    def test_weighted_gradient_scales_closed_form(self):
        # row-sum of the true logit gradient must equal weight/N times the
        # closed-form per-sample value
        z, labels, feats = self._batch(11)
        n, k = z.shape
        state = MibState(epsilon=0.5)
        zt = tensor(z, requires_grad=True)
        loss, _ = mib_edl_loss(zt, labels, feats, state, iteration=0)
        dc.backward(loss)
        weights = state.weights[
            [int(np.ceil(g * state.num_bins)) - 1 if g > 0 else 0
             for g in grad_norms_batch(np.exp(z) + 1.0, labels)]
        ]
        for i in range(n):
            g = edl_grad_closed_form(EvidentialOutput(np.exp(z[i])), int(labels[i]))
            expect = weights[i] / n * g[labels[i] - 1]
            got = float(np.sum(zt.grad[i]))
            assert abs(got - expect) <= 1e-10 * max(1.0, abs(expect))

    def test_weighted_loss_gradient_matches_finite_differences(self):
        z, labels, feats = self._batch(13)
        state = MibState(epsilon=0.5)
        # freeze weights first so the probe differentiates a fixed function
        gnorm = grad_norms_batch(np.exp(z) + 1.0, labels)
        omegas = gnorm * np.sum(np.abs(feats), axis=1)
        weights = mib_update_batch(state, gnorm, omegas, iteration=0)
        onehot = one_hot(labels, z.shape[1])

        def f(t):
            return weighted_edl_loss(edl_nll(t, onehot), weights)

        assert finite_difference_check(f, tensor(z), step=1e-5) < 1e-4
