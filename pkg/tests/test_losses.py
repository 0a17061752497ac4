import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import numeric_grads, rel_error, worst_rel_error
from fedxrec.losses import (
    Fusion,
    LossConfig,
    MixedItems,
    cosine_sim_scaled,
    infonce,
    inter_loss,
    intra_losses,
    prediction_loss,
    total_loss,
)
from fedxrec.model import init_params

LOG2 = math.log(2.0)


def toy_params(n_users=5, n_items=10, d=8, seed=0, scale=30.0):
    p = init_params(n_users, n_items, d=d, seed=seed, hidden=(6, 4))
    p.user_emb *= scale
    p.item_emb *= scale
    # Nonzero biases keep dead units off the ReLU kink, where finite differences disagree.
    rng = np.random.default_rng([seed, 1])
    p.layers = [(w, 0.1 * rng.standard_normal(b.shape)) for w, b in p.layers]
    return p


def direct_infonce(anchors, cands, tau):
    """Row i's positive is cands[i]; every other row is a negative."""
    total = 0.0
    for i, a in enumerate(anchors):
        logits = [cosine_sim_scaled(a, c, tau) for c in cands]
        total += -logits[i] + math.log(sum(math.exp(z) for z in logits))
    return total / len(anchors)


class TestCosine:
    def test_self_similarity(self):
        x = np.array([0.3, -2.0, 5.0])
        assert cosine_sim_scaled(x, x, 0.2) == pytest.approx(5.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_sim_scaled(np.array([1.0, 0.0]), np.array([0.0, 3.0]), 0.1) == 0.0

    def test_scalar_example(self):
        got = cosine_sim_scaled(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 0.5)
        assert got == pytest.approx(2 * 11 / (math.sqrt(5) * 5), abs=1e-12)
        assert got == pytest.approx(1.96774, abs=1e-5)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_sim_scaled(np.zeros(3), np.ones(3), 0.1)


class TestInfoNCE:
    def test_negative_equal_to_positive_gives_log2(self):
        rng = np.random.default_rng(0)
        a, p = rng.standard_normal(8), rng.standard_normal(8)
        loss, _ = infonce(a, p, [p], 0.1)
        assert loss == pytest.approx(LOG2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, p, negs = rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal((3, 8))
        tau = 0.5
        _, g = infonce(a, p, negs, tau)
        h = 1e-5

        def fd(x):
            out = np.zeros_like(x)
            for idx in np.ndindex(*x.shape):
                old = x[idx]
                x[idx] = old + h
                up = infonce(a, p, negs, tau)[0]
                x[idx] = old - h
                down = infonce(a, p, negs, tau)[0]
                x[idx] = old
                out[idx] = (up - down) / (2 * h)
            return out

        assert rel_error(g["anchor"], fd(a)) <= 1e-4
        assert rel_error(g["positive"], fd(p)) <= 1e-4
        assert rel_error(g["negatives"], fd(negs)) <= 1e-4

    def test_loss_decreases_as_positive_moves_toward_anchor(self):
        a = np.array([1.0, 0.0])
        negs = np.array([[0.0, 1.0], [-1.0, 0.2]])
        losses = [infonce(a, np.array([math.cos(t), math.sin(t)]), negs, 0.3)[0]
                  for t in np.linspace(1.5, 0.0, 8)]
        assert all(x > y for x, y in zip(losses, losses[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 2.0))
    def test_scale_invariance(self, seed, tau):
        rng = np.random.default_rng(seed)
        a, p, negs = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal((2, 4))
        base = infonce(a, p, negs, tau)[0]
        assert infonce(7.3 * a, p, 7.3 * negs, tau)[0] == pytest.approx(base, rel=1e-10, abs=1e-12)
        assert base >= 0

    def test_needs_a_negative(self):
        with pytest.raises(ValueError):
            infonce(np.ones(2), np.ones(2), np.zeros((0, 2)), 0.1)


class TestIntra:
    def test_identical_reviews_give_log2(self):
        p = toy_params(n_users=2, n_items=2, d=4)
        h = np.ones((2, 4))
        l_u, l_v, _ = intra_losses(p, h, h, np.array([0, 1]), np.array([0, 1]), LossConfig())
        assert l_u == pytest.approx(LOG2, abs=1e-12)
        assert l_v == pytest.approx(LOG2, abs=1e-12)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(3)
        p = toy_params(n_users=4, n_items=4, d=6, seed=3)
        hu, hv = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        cfg = LossConfig(tau=0.2)
        users = np.array([2, 0, 3, 1, 0])
        l_u, l_v, _ = intra_losses(p, hu, hv, users, np.arange(4), cfg)
        assert l_u == pytest.approx(direct_infonce(p.user_emb, hu, 0.2), abs=1e-10)
        assert l_v == pytest.approx(direct_infonce(p.item_emb, hv, 0.2), abs=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        p = toy_params(n_users=5, n_items=6, d=8, seed=4)
        hu, hv = rng.standard_normal((5, 8)), rng.standard_normal((6, 8))
        users, items = np.array([0, 1, 3, 4]), np.array([5, 2, 1])
        cfg = LossConfig(tau=0.3)
        _, _, g = intra_losses(p, hu, hv, users, items, cfg)

        def f():
            lu, lv, _ = intra_losses(p, hu, hv, users, items, cfg)
            return lu + lv

        num = numeric_grads(f, p, names={"user_emb", "item_emb"})
        assert worst_rel_error(g, num) <= 1e-4

    def test_zero_review_rows_are_excluded(self):
        p = toy_params(n_users=3, n_items=2, d=4)
        hu = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0.0, 0, 0, 0]])
        _, _, g = intra_losses(p, hu, np.eye(2, 4), np.arange(3), np.arange(2), LossConfig())
        assert np.all(g["user_emb"][2] == 0)

    def test_single_member_batch_rejected(self):
        p = toy_params(n_users=2, n_items=2, d=4)
        with pytest.raises(ValueError, match="two distinct"):
            intra_losses(p, np.eye(2, 4), np.eye(2, 4), np.array([0, 0]), np.array([1]), LossConfig())


class TestInter:
    def test_identical_prototypes_give_log_batch(self):
        p = toy_params(n_users=6, d=4)
        targets = np.tile(np.array([1.0, -2.0, 0.5, 3.0]), (6, 1))
        loss, _ = inter_loss(p, targets, np.ones(6, bool), np.arange(6), LossConfig())
        assert loss == pytest.approx(math.log(6), abs=1e-12)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(8)
        p = toy_params(n_users=3, d=5, seed=8)
        targets = rng.standard_normal((3, 5))
        loss, g = inter_loss(p, targets, np.ones(3, bool), np.array([0, 1, 2]), LossConfig(tau=0.1))
        assert loss == pytest.approx(direct_infonce(p.user_emb, targets, 0.1), abs=1e-10)
        assert set(g) == {"user_emb"}

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        p = toy_params(n_users=5, d=8, seed=9)
        targets = rng.standard_normal((5, 8))
        users = np.array([4, 0, 2, 3])
        cfg = LossConfig(tau=0.2)
        _, g = inter_loss(p, targets, np.ones(5, bool), users, cfg)
        num = numeric_grads(lambda: inter_loss(p, targets, np.ones(5, bool), users, cfg)[0], p, names={"user_emb"})
        assert worst_rel_error(g, num) <= 1e-4

    def test_missing_prototype_names_user(self):
        p = toy_params(n_users=3, d=4)
        has = np.array([True, False, True])
        with pytest.raises(KeyError, match="bob"):
            inter_loss(p, np.ones((3, 4)), has, np.arange(3), LossConfig(), user_ids=["al", "bob", "cy"])


class TestPrediction:
    def test_half_predictor_gives_log2(self):
        p = toy_params()
        p.layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers]
        loss, _ = prediction_loss(p, np.array([0, 1]), MixedItems.plain([2, 3]), MixedItems.plain([4, 5]))
        assert loss == pytest.approx(LOG2, abs=1e-12)

    def test_full_gradient_matches_finite_differences(self):
        p = toy_params(n_users=4, n_items=9, d=8, seed=11, scale=40.0)
        users = np.array([0, 1, 3, 1])
        pos = MixedItems(np.array([0, 2, 4, 6]), np.array([0.7, 0.6, 0.8, 0.5]),
                         np.array([[1, 3, -1], [-1, -1, -1], [5, 7, 8], [0, -1, -1]]))
        neg = MixedItems(np.array([8, 7, 5, 1]), np.array([0.65, 0.9, 0.7, 0.75]),
                         np.array([[2, -1, -1], [3, 4, 6], [-1, -1, -1], [0, 2, -1]]))
        _, g = prediction_loss(p, users, pos, neg)
        num = numeric_grads(lambda: prediction_loss(p, users, pos, neg)[0], p)
        assert worst_rel_error(g, num) <= 1e-4

    def test_fusion_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        p = toy_params(n_users=3, n_items=5, d=4, seed=12)
        fusion = Fusion(user_side=rng.standard_normal((3, 4)), user_mask=np.array([True, False, True]),
                        item_side=rng.standard_normal((5, 4)))
        users = np.array([0, 1, 2])
        pos, neg = MixedItems.plain([0, 1, 2]), MixedItems.plain([3, 4, 0])
        _, g = prediction_loss(p, users, pos, neg, fusion)
        num = numeric_grads(lambda: prediction_loss(p, users, pos, neg, fusion)[0], p,
                            names={"user_emb", "item_emb"})
        assert worst_rel_error(g, num) <= 1e-4

    def test_better_predictions_lower_the_loss(self):
        p = init_params(1, 2, d=2, seed=0, hidden=(2,))
        p.layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers]
        p.item_emb[:] = [[1.0, 0.0], [-1.0, 0.0]]
        losses = []
        for s in [0.0, 1.0, 4.0, 16.0, 64.0]:
            # Logit = s * item_x routed through one ReLU pair.
            p.layers[0][0][:] = [[0, 0], [0, 0], [s, -s], [0, 0]]
            p.layers[1][0][:] = [[1.0], [-1.0]]
            losses.append(prediction_loss(p, np.array([0]), MixedItems.plain([0]), MixedItems.plain([1]))[0])
        assert losses[0] == pytest.approx(LOG2)
        assert all(x > y for x, y in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_clamped_probabilities_stay_finite(self):
        p = toy_params(n_users=2, n_items=2, d=2)
        p.layers[-1] = (p.layers[-1][0], np.array([1e4]))
        loss, g = prediction_loss(p, np.array([0]), MixedItems.plain([0]), MixedItems.plain([1]))
        # Both rows saturate at 1 - 1e-7; the negative one pays -log(1e-7).
        assert loss == pytest.approx((-math.log(1 - 1e-7) - math.log(1e-7)) / 2, rel=1e-9)
        assert all(np.all(np.isfinite(v)) for v in g.values())


class TestTotal:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.gamma, cfg.alpha) == (0.2, 0.05)

    def test_linear_combination(self):
        g = {"user_emb": np.ones((2, 2))}
        out = total_loss(1.0, g, 0.5, 0.25, {"user_emb": np.full((2, 2), 2.0)}, 3.0,
                         {"user_emb": np.full((2, 2), 4.0)}, LossConfig(gamma=0.2, alpha=0.05))
        assert out.total == pytest.approx(1.0 + 0.2 * 0.75 + 0.05 * 3.0, abs=1e-12)
        assert np.allclose(out.grads["user_emb"], 1.0 + 0.2 * 2.0 + 0.05 * 4.0)
        assert np.all(g["user_emb"] == 1.0)

    def test_zero_weights_leave_prediction_loss(self):
        g = {"user_emb": np.ones((1, 2))}
        out = total_loss(0.8, g, 5.0, 6.0, {"user_emb": np.ones((1, 2))}, 7.0, None, LossConfig(gamma=0, alpha=0))
        assert out.total == 0.8 and np.array_equal(out.grads["user_emb"], g["user_emb"])

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            total_loss(float("nan"), {})

    def test_total_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        p = toy_params(n_users=5, n_items=8, d=4, seed=13)
        hu, hv = rng.standard_normal((5, 4)), rng.standard_normal((8, 4))
        targets = rng.standard_normal((5, 4))
        cfg = LossConfig(tau=0.5, gamma=0.3, alpha=0.7)
        users = np.array([0, 1, 2, 4])
        pos = MixedItems(np.array([0, 1, 2, 3]), np.full(4, 0.7), np.array([[4, 5], [-1, -1], [6, -1], [7, 0]]))
        neg = MixedItems.plain([7, 6, 5, 4])

        def parts():
            l_prd, g_prd = prediction_loss(p, users, pos, neg)
            lu, lv, g_intra = intra_losses(p, hu, hv, users, pos.anchor, cfg)
            li, g_inter = inter_loss(p, targets, np.ones(5, bool), users, cfg)
            return total_loss(l_prd, g_prd, lu, lv, g_intra, li, g_inter, cfg)

        g = parts().grads
        num = numeric_grads(lambda: parts().total, p)
        assert worst_rel_error(g, num) <= 1e-4

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError):
            LossConfig(alpha=-1.0)
