import math

import numpy as np
import pytest

from rtbsim.core import FeatureVector, seeded_rng
from rtbsim.landscape import WinFunction, build_survival_table
from rtbsim.response import (
    FmModel,
    FtrlState,
    LinearModel,
    ProbitState,
    ResponseError,
    auc,
    bagging_predict,
    bgd_step,
    bid_aware_weight,
    eta_schedule,
    fit_bagged,
    fm_predict,
    fm_score,
    fm_score_naive,
    ftrl_step,
    gbdt_fit,
    gbdt_from_json,
    gbdt_lr_features,
    gbdt_to_json,
    load_response_model,
    log_loss,
    lr_predict,
    lr_sgd_step,
    model_predict,
    probit_predict,
    probit_step,
    sigmoid,
    split_gain,
    tree_leaf,
    tree_predict,
    _loss_grads,
)


def fv(indices, dim=16):
    return FeatureVector(indices=tuple(sorted(indices)), dimension=dim)


class TestLogisticRegression:
    def test_zero_weights_half(self):
        m = LinearModel.zeros(16)
        assert lr_predict(m, fv([2, 5])) == 0.5

    def test_saturation(self):
        m = LinearModel.zeros(16)
        m.weights[3] = 30.0
        assert lr_predict(m, fv([3])) == pytest.approx(1.0, abs=1e-9)

    def test_single_weight_ln3(self):
        m = LinearModel.zeros(16)
        m.weights[3] = math.log(3)  # sigma(ln 3) = 3/4
        assert lr_predict(m, fv([3])) == pytest.approx(0.75)

    def test_sgd_step_arithmetic(self):
        m = LinearModel.zeros(16, lam=0.0)
        lr_sgd_step(m, fv([4]), 1, eta=0.1)
        assert m.weights[4] == pytest.approx(0.05)  # eta * (1 - 0.5)

    def test_zero_gradient_when_saturated(self):
        m = LinearModel.zeros(16, lam=0.0)
        m.weights[4] = 40.0
        before = m.weights.copy()
        lr_sgd_step(m, fv([4]), 1, eta=0.1)
        assert np.allclose(m.weights, before, atol=1e-12)

    def test_pure_decay_on_empty_input(self):
        m = LinearModel.zeros(16, lam=0.5)
        m.weights[:] = 1.0
        lr_sgd_step(m, fv([]), 0, eta=0.1)
        assert np.allclose(m.weights, 0.95)

    def test_gradient_matches_finite_differences(self):
        # d(-log lik)/dw_i on active coords is (y_hat - y)
        rng = seeded_rng(3)
        m = LinearModel.zeros(8)
        m.weights[:] = rng.normal(size=8) * 0.3
        x = fv([1, 5, 7], dim=8)
        y = 1
        p = lr_predict(m, x)
        for i in x.indices:
            eps = 1e-6
            m.weights[i] += eps
            up = -math.log(lr_predict(m, x))
            m.weights[i] -= 2 * eps
            down = -math.log(lr_predict(m, x))
            m.weights[i] += eps
            fd = (up - down) / (2 * eps)
            assert fd == pytest.approx(p - y, rel=1e-5)

    def test_eta_schedule(self):
        assert eta_schedule(0.2, 1) == 0.2
        assert eta_schedule(0.2, 4) == 0.1
        assert eta_schedule(1.0, 100) == pytest.approx(0.1)

    def test_json_round_trip(self):
        m = LinearModel.zeros(16, lam=0.1)
        m.weights[3] = 1.5
        m2 = LinearModel.from_json(m.to_json())
        assert np.array_equal(m.weights, m2.weights)
        assert m2.lam == 0.1


class TestFtrl:
    def test_l1_dead_zone_exact_zero(self):
        state = FtrlState(lam1=1.0)
        state.z[3] = 0.9  # |z| <= lam1
        assert state.weight(3) == 0.0

    def test_all_zero_stream(self):
        state = FtrlState(lam1=0.5)
        for _ in range(10):
            ftrl_step(state, fv([]), 0)
        assert state.z == {} and state.n == {}

    def test_two_step_hand_trace(self):
        # lam1=0, alpha=0.1, beta=1; single always-on feature, labels 1, 0
        state = FtrlState(lam1=0.0, alpha=0.1, beta=1.0)
        x = fv([0], dim=1)

        _, w1 = ftrl_step(state, x, 1)
        # step 1: w=0, p=0.5, g=-0.5, sigma=(sqrt(0.25)-0)/0.1=5, z=-0.5, n=0.25
        # w1 = -(0.1 / (1 + 0.5)) * -0.5 = 1/30
        assert state.z[0] == pytest.approx(-0.5)
        assert state.n[0] == pytest.approx(0.25)
        assert w1[0] == pytest.approx(1.0 / 30.0)

        _, w2 = ftrl_step(state, x, 0)
        # step 2: p = sigmoid(1/30), g = p, sigma = (sqrt(0.25+g^2)-0.5)/0.1
        p = sigmoid(1.0 / 30.0)
        sigma = (math.sqrt(0.25 + p * p) - 0.5) / 0.1
        z2 = -0.5 + p - sigma * (1.0 / 30.0)
        n2 = 0.25 + p * p
        assert state.z[0] == pytest.approx(z2)
        assert state.n[0] == pytest.approx(n2)
        assert w2[0] == pytest.approx(-(0.1 / (1.0 + math.sqrt(n2))) * z2)

    def test_untouched_coordinates_stay_zero(self):
        state = FtrlState(lam1=0.1)
        for _ in range(5):
            ftrl_step(state, fv([2, 3]), 1)
        assert state.weight(7) == 0.0
        assert 7 not in state.z

    def test_sparser_than_sgd_on_noise(self):
        # L1 dead zone zeroes noise features that SGD leaves non-zero
        rng = seeded_rng(9)
        dim = 40
        state = FtrlState(lam1=1.0, alpha=0.1, beta=1.0)
        sgd = LinearModel.zeros(dim)
        t = 0
        for _ in range(400):
            noise = tuple(sorted(rng.choice(np.arange(2, dim), size=3, replace=False).tolist()))
            x = fv((0,) + noise, dim=dim)
            y = int(rng.random() < 0.5)  # labels independent of features
            t += 1
            ftrl_step(state, x, y)
            lr_sgd_step(sgd, x, y, eta_schedule(0.2, t))
        ftrl_zeros = sum(1 for i in range(dim) if state.weight(i) == 0.0)
        sgd_zeros = sum(1 for i in range(dim) if sgd.weights[i] == 0.0)
        assert ftrl_zeros > sgd_zeros


class TestProbit:
    def test_fresh_state_update(self):
        state = ProbitState.prior(8, prior_var=1.0)
        probit_step(state, fv([2], dim=8), +1)
        # theta=0, alpha = (1/sqrt(2)) N(0)/Phi(0) ~ 0.5642
        assert state.mu[2] == pytest.approx(0.5641895835, abs=1e-9)
        assert state.var[2] < 1.0  # observation shrinks variance

    def test_label_flip_negates_update(self):
        a = ProbitState.prior(8, 1.0)
        b = ProbitState.prior(8, 1.0)
        probit_step(a, fv([2], dim=8), +1)
        probit_step(b, fv([2], dim=8), -1)
        assert a.mu[2] == pytest.approx(-b.mu[2])

    def test_empty_input_no_change(self):
        state = ProbitState.prior(4, 1.0)
        mu, var = state.mu.copy(), state.var.copy()
        probit_step(state, fv([], dim=4), +1)
        assert np.array_equal(state.mu, mu) and np.array_equal(state.var, var)

    def test_variance_stays_positive(self):
        state = ProbitState.prior(4, prior_var=5.0)
        for _ in range(200):
            probit_step(state, fv([1], dim=4), +1)
        assert np.all(state.var > 0)

    def test_label_domain(self):
        with pytest.raises(ResponseError):
            probit_step(ProbitState.prior(4), fv([1], dim=4), 0)

    def test_predict_half_at_prior(self):
        state = ProbitState.prior(4, 1.0)
        assert probit_predict(state, fv([1], dim=4)) == 0.5


class TestFactorisationMachine:
    def test_reduces_to_lr_when_v_zero(self):
        rng = seeded_rng(1)
        w = rng.normal(size=16)
        fm = FmModel(w0=0.2, w=w.copy(), v=np.zeros((16, 4)))
        lr = LinearModel.zeros(16)
        lr.weights = w
        x = fv([2, 9, 14])
        assert fm_predict(fm, x) == pytest.approx(sigmoid(0.2 + float(w[[2, 9, 14]].sum())))
        assert fm_score(fm, x) - 0.2 == pytest.approx(math.log(lr_predict(lr, x) / (1 - lr_predict(lr, x))))

    def test_two_field_matrix_factorisation(self):
        # exactly two active features: score = w0 + w_u + w_i + <v_u, v_i>
        rng = seeded_rng(2)
        fm = FmModel(w0=0.1, w=rng.normal(size=16), v=rng.normal(size=(16, 3)))
        u, i = 3, 11
        score = fm_score(fm, fv([u, i]))
        expected = 0.1 + fm.w[u] + fm.w[i] + float(fm.v[u] @ fm.v[i])
        assert score == pytest.approx(expected, abs=1e-12)

    def test_fast_equals_naive(self):
        rng = seeded_rng(3)
        for _ in range(20):
            fm = FmModel(w0=float(rng.normal()), w=rng.normal(size=16), v=rng.normal(size=(16, 2)))
            idx = sorted(rng.choice(16, size=3, replace=False).tolist())
            x = fv(idx)
            assert fm_score(fm, x) == pytest.approx(fm_score_naive(fm, x), abs=1e-12)


class TestTrees:
    def test_single_leaf_constant(self):
        data = [(fv([1]), 2.0), (fv([2]), 2.0)]
        model = gbdt_fit(data, k=1, loss="squared", max_depth=2)
        assert model.trees[0].is_leaf
        for x in (fv([1]), fv([5]), fv([])):
            assert tree_predict(model.trees[0], x) == pytest.approx(2.0)

    def test_depth_one_routing(self):
        data = [(fv([3]), 1.0)] * 6 + [(fv([]), -1.0)] * 6
        model = gbdt_fit(data, k=1, loss="squared", max_depth=1)
        tree = model.trees[0]
        assert tree.feature == 3
        assert tree_predict(tree, fv([3])) == pytest.approx(1.0)
        assert tree_predict(tree, fv([])) == pytest.approx(-1.0)

    def test_route_matches_manual_traversal(self):
        rng = seeded_rng(4)
        data = [
            (fv(sorted(set(rng.integers(0, 6, size=3).tolist()))), float(rng.normal()))
            for _ in range(40)
        ]
        model = gbdt_fit(data, k=1, loss="squared", max_depth=3)
        tree = model.trees[0]
        for x, _ in data:
            node = tree
            active = set(x.indices)
            while not node.is_leaf:
                node = node.present if node.feature in active else node.absent
            assert tree_predict(tree, x) == node.weight


class TestGbdt:
    def test_leaf_weight_mean_residual(self):
        data = [(fv([]), 1.0), (fv([]), 3.0)]
        model = gbdt_fit(data, k=1, lam=0.0, loss="squared")
        assert model.trees[0].weight == pytest.approx(2.0)

    def test_leaf_weight_regularised(self):
        data = [(fv([]), 1.0), (fv([]), 3.0)]
        model = gbdt_fit(data, k=1, lam=2.0, loss="squared")
        assert model.trees[0].weight == pytest.approx(4.0 / 3.0)  # sum r / (|I| + lam/2)

    def test_greedy_split_matches_enumeration(self):
        rng = seeded_rng(6)
        for _ in range(10):
            data = []
            for _ in range(20):
                active = tuple(sorted({int(f) for f in rng.integers(0, 3, size=2)}))
                signal = 1.5 if 0 in active else -0.5
                data.append((fv(active, dim=3), signal + float(rng.normal()) * 0.3))
            lam, gamma = 0.5, 0.01
            y = np.array([t for _, t in data])
            g, h = _loss_grads("squared", y, np.zeros(len(data)))
            best = (0.0, None)
            for f in range(3):
                gl = sum(g[i] for i, (x, _) in enumerate(data) if f in x.indices)
                hl = sum(h[i] for i, (x, _) in enumerate(data) if f in x.indices)
                gain = split_gain(gl, hl, float(g.sum()) - gl, float(h.sum()) - hl, lam, gamma)
                if gain > best[0]:
                    best = (gain, f)
            model = gbdt_fit(data, k=1, lam=lam, gamma=gamma, loss="squared", max_depth=1)
            assert model.trees[0].feature == best[1]

    def test_training_loss_non_increasing(self):
        rng = seeded_rng(7)
        data = [
            (fv(sorted(set(rng.integers(0, 8, size=3).tolist())), dim=8), float(rng.normal()))
            for _ in range(60)
        ]
        model = gbdt_fit(data, k=8, lam=0.0, loss="squared", max_depth=2)
        assert all(b <= a + 1e-9 for a, b in zip(model.train_losses, model.train_losses[1:]))

    def test_constant_labels_single_leaf(self):
        data = [(fv([i % 3]), 1.0) for i in range(10)]
        model = gbdt_fit(data, k=2, loss="squared")
        assert model.trees[0].is_leaf

    def test_logistic_loss_prediction_in_unit_interval(self):
        rng = seeded_rng(8)
        data = [
            (fv([int(i % 4)], dim=4), float(rng.random() < (0.2 + 0.15 * (i % 4))))
            for i in range(80)
        ]
        model = gbdt_fit(data, k=5, lam=1.0, loss="logistic", max_depth=2)
        for x, _ in data:
            assert 0.0 < model.predict(x) < 1.0

    def test_json_round_trip(self):
        rng = seeded_rng(9)
        data = [(fv([int(rng.integers(0, 4))], dim=4), float(rng.normal())) for _ in range(30)]
        model = gbdt_fit(data, k=3, lam=0.5, loss="squared", max_depth=2)
        restored = gbdt_from_json(__import__("json").loads(gbdt_to_json(model)))
        for x, _ in data:
            assert restored.predict(x) == pytest.approx(model.predict(x))


class TestBagging:
    def test_identical_models_average_unchanged(self):
        data = [(fv([]), 2.0)] * 4
        model = gbdt_fit(data, k=1, loss="squared")
        assert bagging_predict([model, model, model], fv([])) == pytest.approx(2.0)

    def test_two_value_average(self):
        class Stub:
            def __init__(self, v):
                self.v = v

            def predict(self, x):
                return self.v

        assert bagging_predict([Stub(0.2), Stub(0.4)], fv([])) == pytest.approx(0.3)

    def test_bootstrap_reproducible(self):
        rng1, rng2 = seeded_rng(5), seeded_rng(5)
        data = [(fv([i % 4], dim=4), float(i % 2)) for i in range(30)]
        fit = lambda sample: gbdt_fit(sample, k=1, loss="squared", max_depth=1)
        m1 = fit_bagged(fit, data, 3, rng1)
        m2 = fit_bagged(fit, data, 3, rng2)
        for a, b in zip(m1, m2):
            assert a.predict(fv([1], dim=4)) == b.predict(fv([1], dim=4))


class TestGbdtLrFeatures:
    def test_reference_leaf_encoding(self):
        rng = seeded_rng(10)
        data = [
            (fv(sorted(set(rng.integers(0, 6, size=2).tolist())), dim=6), float(rng.normal()))
            for _ in range(50)
        ]
        model = gbdt_fit(data, k=3, loss="squared", max_depth=2)
        x = data[0][0]
        encoded = gbdt_lr_features(model, x)
        assert len(encoded.indices) == 3  # one active index per tree
        # flat indices decode back to each tree's leaf
        offset = 0
        for tree, idx in zip(model.trees, encoded.indices):
            leaf = tree_leaf(tree, x)
            assert idx == offset + leaf.leaf_id
            offset += tree.leaf_count()
        assert encoded.dimension == offset

    def test_single_leaf_trees_constant_encoding(self):
        data = [(fv([]), 1.0)] * 5
        model = gbdt_fit(data, k=2, loss="squared")
        a = gbdt_lr_features(model, fv([1]))
        b = gbdt_lr_features(model, fv([3]))
        assert a.indices == b.indices

    def test_encoding_injective_over_leaves(self):
        rng = seeded_rng(11)
        data = [
            (fv(sorted(set(rng.integers(0, 5, size=2).tolist())), dim=5), float(rng.normal()))
            for _ in range(60)
        ]
        model = gbdt_fit(data, k=4, loss="squared", max_depth=2)
        seen = {}
        for x, _ in data:
            enc = gbdt_lr_features(model, x).indices
            leaves = tuple(tree_leaf(t, x).leaf_id for t in model.trees)
            if enc in seen:
                assert seen[enc] == leaves
            seen[enc] = leaves


class TestBidAware:
    def test_weight_inverse(self, eight_record_log):
        win = WinFunction.kaplan_meier(build_survival_table(eight_record_log))
        assert bid_aware_weight(win, 2) == pytest.approx(3.5)  # 1 / (2/7)

    def test_weight_of_certain_win(self):
        win = WinFunction("counting", observed_prices=[1])
        assert bid_aware_weight(win, 10) == 1.0

    def test_low_probability_scales(self):
        win = WinFunction.parametric(9.0)  # w(1) = 0.1
        assert bid_aware_weight(win, 1.0) == pytest.approx(10.0)

    def test_zero_win_prob_errors(self, eight_record_log):
        win = WinFunction.kaplan_meier(build_survival_table(eight_record_log))
        with pytest.raises(ResponseError):
            bid_aware_weight(win, 1)

    def test_bgd_reduces_to_sgd_at_full_win(self):
        win = WinFunction("counting", observed_prices=[1])
        a = LinearModel.zeros(8)
        b = LinearModel.zeros(8)
        bgd_step(a, fv([2], dim=8), 1, bid=50.0, win=win, eta=0.1)
        lr_sgd_step(b, fv([2], dim=8), 1, eta=0.1)
        assert np.array_equal(a.weights, b.weights)

    def test_bgd_skips_zero_win_instances(self, eight_record_log):
        win = WinFunction.kaplan_meier(build_survival_table(eight_record_log))
        m = LinearModel.zeros(8)
        bgd_step(m, fv([2], dim=8), 1, bid=1, win=win, eta=0.1)
        assert m.skipped_zero_win == 1
        assert np.all(m.weights == 0.0)

    def test_saturated_decay_only(self):
        win = WinFunction.parametric(1.0)
        m = LinearModel.zeros(8, lam=0.5)
        m.weights[:] = 1.0
        m.weights[2] = 40.0  # saturates the prediction on x={2}
        bgd_step(m, fv([2], dim=8), 1, bid=5.0, win=win, eta=0.1)
        assert m.weights[3] == pytest.approx(0.95)

    def test_expected_reweighted_gradient_unbiased(self):
        # enumerate a finite outcome space: sum_x p(x) w(b_x) * iw * grad
        # equals the full-data gradient
        win = WinFunction.parametric(10.0)
        cells = [(fv([0], dim=2), 4.0, 0.3), (fv([0, 1], dim=2), 30.0, 0.7)]
        m = LinearModel.zeros(2)
        m.weights[:] = (0.2, -0.4)

        def grad(x, y):
            p = lr_predict(m, x)
            g = np.zeros(2)
            g[list(x.indices)] = y - p
            return g

        full = np.zeros(2)
        reweighted = np.zeros(2)
        for x, bid, px in cells:
            p_click = 0.25
            for y, py in ((1, p_click), (0, 1 - p_click)):
                full += px * py * grad(x, y)
                reweighted += px * py * win(bid) * bid_aware_weight(win, bid) * grad(x, y)
        assert np.allclose(full, reweighted, atol=1e-12)


class TestEvaluation:
    def test_auc_perfect(self):
        assert auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_auc_constant_half(self):
        assert auc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_log_loss_balanced_half(self):
        assert log_loss([0, 1, 0, 1], [0.5] * 4) == pytest.approx(math.log(2.0))

    def test_auc_needs_both_classes(self):
        with pytest.raises(ResponseError):
            auc([1, 1], [0.3, 0.4])

    def test_model_dispatch(self):
        m = LinearModel.zeros(4)
        m.weights[1] = 1.0
        restored = load_response_model(m.to_json())
        assert model_predict(restored, fv([1], dim=4)) == pytest.approx(sigmoid(1.0))
