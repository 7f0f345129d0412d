"""Loss values, analytic gradients vs finite differences, batch reduction."""

import numpy as np
import pytest

from dcembed.losses import (
    BatchLossResult,
    BetaParam,
    LossConfig,
    ProxyBank,
    batch_loss,
    margin_loss,
    proxy_nca_loss,
    triplet_loss,
)


def unit(rng, dim=4):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def numeric_grad(f, vec, step=1e-6):
    g = np.zeros_like(vec)
    for i in range(len(vec)):
        orig = vec[i]
        vec[i] = orig + step
        hi = f()
        vec[i] = orig - step
        lo = f()
        vec[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(analytic, numeric):
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(np.asarray(analytic) - numeric).max() / denom


def random_rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


class TestTripletLoss:
    def test_inactive_hinge(self):
        a = np.array([1.0, 0.0])
        p = a.copy()
        n = np.array([-1.0, 0.0])  # d(a,n)=2
        loss, ga, gp, gn = triplet_loss(a, p, n, alpha=0.2)
        assert loss == 0.0
        assert (ga == 0).all() and (gp == 0).all() and (gn == 0).all()

    def test_coincident_triple_gives_alpha(self):
        a = np.array([0.6, 0.8])
        loss, *_ = triplet_loss(a, a, a, alpha=0.2)
        assert loss == pytest.approx(0.2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 30:
            a, p, n = unit(rng), unit(rng), unit(rng)
            slack = np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + 0.5
            if abs(slack) < 1e-3:  # too close to the kink for FD
                continue
            loss, ga, gp, gn = triplet_loss(a, p, n, alpha=0.5)
            for vec, g in ((a, ga), (p, gp), (n, gn)):
                num = numeric_grad(lambda: triplet_loss(a, p, n, 0.5)[0], vec)
                assert rel_err(g, num) <= 1e-4
            checked += 1

    def test_positive_grad_negates_anchor_positive_term(self):
        # split the anchor gradient: the d(a,p)^2 part is 2(a-p) = -grad_p
        rng = np.random.default_rng(1)
        a, p, n = unit(rng), unit(rng), unit(rng)
        loss, ga, gp, gn = triplet_loss(a, p, n, alpha=5.0)  # surely active
        np.testing.assert_allclose(gp, -2.0 * (a - p), atol=1e-12)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(2)
        a, p, n = unit(rng), unit(rng), unit(rng)
        q = random_rotation(rng, 4)
        l0 = triplet_loss(a, p, n, 0.3)[0]
        l1 = triplet_loss(q @ a, q @ p, q @ n, 0.3)[0]
        assert abs(l0 - l1) <= 1e-10


class TestMarginLoss:
    def test_positive_pair_inside_boundary_inactive(self):
        # d=1.0: [0.2 + (1.0 - 1.2)]_+ = 0
        xi = np.array([1.0, 0.0])
        xj = np.array([0.5, np.sqrt(0.75)])
        loss, gi, gj, gb = margin_loss(xi, xj, "positive", 0.2, 1.2)
        assert loss == 0.0 and gb == 0.0

    def test_negative_pair_too_close_penalized(self):
        # d=1.0: [0.2 - (1.0 - 1.2)]_+ = 0.4
        xi = np.array([1.0, 0.0])
        xj = np.array([0.5, np.sqrt(0.75)])
        loss, gi, gj, gb = margin_loss(xi, xj, "negative", 0.2, 1.2)
        assert loss == pytest.approx(0.4)
        assert gb == pytest.approx(1.0)

    def test_beta_gradient_sign(self):
        xi, xj = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        # active positive pair: larger beta shrinks the loss
        loss, _, _, gb = margin_loss(xi, xj, "positive", 2.0, 0.5)
        assert loss > 0 and gb == -1.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 30:
            xi, xj = unit(rng), unit(rng)
            relation = "positive" if rng.integers(2) else "negative"
            y = 1.0 if relation == "positive" else -1.0
            d = np.linalg.norm(xi - xj)
            if abs(0.4 + y * (d - 1.0)) < 1e-3 or d < 1e-3:
                continue
            loss, gi, gj, gb = margin_loss(xi, xj, relation, 0.4, 1.0)
            for vec, g in ((xi, gi), (xj, gj)):
                num = numeric_grad(
                    lambda: margin_loss(xi, xj, relation, 0.4, 1.0)[0], vec
                )
                assert rel_err(g, num) <= 1e-4
            beta_arr = np.array([1.0])
            num_b = numeric_grad(
                lambda: margin_loss(xi, xj, relation, 0.4, beta_arr[0])[0], beta_arr
            )
            assert rel_err(np.array([gb]), num_b) <= 1e-4
            checked += 1

    def test_coincident_pair_zero_subgradient(self):
        x = np.array([1.0, 0.0])
        loss, gi, gj, gb = margin_loss(x, x.copy(), "negative", 0.2, 1.2)
        assert loss == pytest.approx(1.4)
        assert (gi == 0).all() and (gj == 0).all()

    def test_bad_relation_rejected(self):
        with pytest.raises(ValueError):
            margin_loss(np.zeros(2), np.zeros(2), "friends", 0.2, 1.2)


class TestProxyNca:
    def test_equidistant_two_classes_zero_loss(self):
        bank = ProxyBank([0, 1], [[1.0, 0.0], [0.0, 1.0]])
        x = np.array([1.0, 1.0]) / np.sqrt(2)
        loss, _, _ = proxy_nca_loss(x, 0, bank)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_on_proxy_with_antipodal_negative(self):
        bank = ProxyBank([0, 1], [[1.0, 0.0], [-1.0, 0.0]])
        loss, _, _ = proxy_nca_loss(np.array([1.0, 0.0]), 0, bank)
        assert loss == pytest.approx(-4.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            vecs = np.stack([unit(rng) for _ in range(4)])
            bank = ProxyBank([0, 1, 2, 3], vecs)
            x = unit(rng)
            loss, gx, gp = proxy_nca_loss(x, 1, bank)
            num_x = numeric_grad(lambda: proxy_nca_loss(x, 1, bank)[0], x)
            assert rel_err(gx, num_x) <= 1e-4
            for r in range(4):
                num_p = numeric_grad(
                    lambda: proxy_nca_loss(x, 1, bank)[0], bank.vectors[r]
                )
                assert rel_err(gp[r], num_p) <= 1e-4

    def test_missing_proxy_rejected(self):
        bank = ProxyBank([0, 1], np.eye(2))
        with pytest.raises(ValueError, match="no proxy"):
            proxy_nca_loss(np.array([1.0, 0.0]), 7, bank)

    def test_single_class_rejected(self):
        bank = ProxyBank([0], [[1.0, 0.0]])
        with pytest.raises(ValueError, match=">= 2"):
            proxy_nca_loss(np.array([1.0, 0.0]), 0, bank)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(5)
        vecs = np.stack([unit(rng) for _ in range(3)])
        x = unit(rng)
        q = random_rotation(rng, 4)
        l0 = proxy_nca_loss(x, 2, ProxyBank([0, 1, 2], vecs))[0]
        l1 = proxy_nca_loss(q @ x, 2, ProxyBank([0, 1, 2], vecs @ q.T))[0]
        assert abs(l0 - l1) <= 1e-10


class TestProxyBank:
    def test_from_centroids_unit_length(self):
        rng = np.random.default_rng(6)
        emb = rng.normal(size=(12, 3))
        labels = np.repeat([4, 7, 9], 4)
        bank = ProxyBank.from_centroids(emb, labels)
        np.testing.assert_array_equal(bank.classes, [4, 7, 9])
        np.testing.assert_allclose(np.linalg.norm(bank.vectors, axis=1), 1.0)

    def test_centroid_direction_preserved(self):
        emb = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 1.0]])
        bank = ProxyBank.from_centroids(emb, [0, 0, 1])
        np.testing.assert_allclose(bank.vectors[0], [1.0, 0.0])

    def test_duplicate_classes_rejected(self):
        with pytest.raises(ValueError):
            ProxyBank([1, 1], np.eye(2))


class TestBetaParam:
    def test_global_mode_single_value(self):
        b = BetaParam(1.2)
        assert b.value_for(99) == 1.2
        assert b.values.shape == (1,)

    def test_per_class_lookup(self):
        b = BetaParam(1.2, mode="per_class", classes=[3, 8])
        b.values[1] = 2.0
        assert b.value_for(8) == 2.0
        with pytest.raises(ValueError):
            b.value_for(5)


class TestBatchLoss:
    def cfg(self, kind, **kw):
        return LossConfig(kind=kind, **kw)

    def test_single_triplet_equals_pointwise(self):
        rng = np.random.default_rng(7)
        emb = np.stack([unit(rng) for _ in range(3)])
        labels = np.array([0, 0, 1])
        res = batch_loss(emb, labels, self.cfg("triplet", alpha=0.5), [(0, 1, 2)])
        direct = triplet_loss(emb[0], emb[1], emb[2], 0.5)
        assert res.loss == pytest.approx(direct[0])
        np.testing.assert_allclose(res.grad_embeddings[0], direct[1])

    def test_two_disjoint_triplets_mean(self):
        rng = np.random.default_rng(8)
        emb = np.stack([unit(rng) for _ in range(6)])
        labels = np.array([0, 0, 1, 2, 2, 3])
        res = batch_loss(emb, labels, self.cfg("triplet", alpha=0.5),
                         [(0, 1, 2), (3, 4, 5)])
        l1 = triplet_loss(emb[0], emb[1], emb[2], 0.5)[0]
        l2 = triplet_loss(emb[3], emb[4], emb[5], 0.5)[0]
        assert res.loss == pytest.approx((l1 + l2) / 2)

    def test_shared_anchor_grads_accumulate(self):
        rng = np.random.default_rng(9)
        emb = np.stack([unit(rng) for _ in range(4)])
        labels = np.array([0, 0, 1, 2])
        tuples = [(0, 1, 2), (0, 1, 3)]
        res = batch_loss(emb, labels, self.cfg("triplet", alpha=5.0), tuples)
        g1 = triplet_loss(emb[0], emb[1], emb[2], 5.0)[1]
        g2 = triplet_loss(emb[0], emb[1], emb[3], 5.0)[1]
        np.testing.assert_allclose(res.grad_embeddings[0], (g1 + g2) / 2)

    def test_empty_tuples_degenerate(self):
        emb = np.eye(3)
        res = batch_loss(emb, np.array([0, 1, 2]), self.cfg("triplet"), [])
        assert res.degenerate and res.loss == 0.0
        assert (res.grad_embeddings == 0).all()

    def test_margin_counts_both_pairs(self):
        rng = np.random.default_rng(10)
        emb = np.stack([unit(rng) for _ in range(3)])
        labels = np.array([0, 0, 1])
        beta = BetaParam(1.0)
        res = batch_loss(emb, labels, self.cfg("margin", alpha=0.4), [(0, 1, 2)],
                         beta=beta)
        lp = margin_loss(emb[0], emb[1], "positive", 0.4, 1.0)[0]
        ln = margin_loss(emb[0], emb[2], "negative", 0.4, 1.0)[0]
        assert res.loss == pytest.approx((lp + ln) / 2)
        assert res.n_terms == 2

    def test_margin_per_class_beta_routing(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        labels = np.array([3, 3, 5, 5])
        beta = BetaParam(1.2, mode="per_class", classes=[3, 5])
        res = batch_loss(emb, labels, self.cfg("margin"), [(0, 1, 2), (2, 3, 0)],
                         beta=beta)
        # anchor 0 has class 3, anchor 2 has class 5: both rows touched
        assert res.beta_grad.shape == (2,)

    def test_proxy_batch_mean_over_points(self):
        rng = np.random.default_rng(11)
        emb = np.stack([unit(rng) for _ in range(4)])
        labels = np.array([0, 1, 0, 1])
        bank = ProxyBank.from_centroids(emb, labels)
        res = batch_loss(emb, labels, self.cfg("proxy_nca"), [], proxies=bank)
        direct = np.mean([proxy_nca_loss(emb[i], labels[i], bank)[0] for i in range(4)])
        assert res.loss == pytest.approx(direct)
        assert res.n_terms == 4

    def test_proxy_single_class_degenerate(self):
        emb = np.eye(2)
        bank = ProxyBank([0], [[1.0, 0.0]])
        res = batch_loss(emb, np.array([0, 0]), self.cfg("proxy_nca"), [],
                         proxies=bank)
        assert res.degenerate

    def test_result_flags(self):
        r = BatchLossResult(0.0, np.zeros((1, 2)), 0)
        assert r.degenerate
        r2 = BatchLossResult(0.5, np.zeros((1, 2)), 3)
        assert not r2.degenerate
