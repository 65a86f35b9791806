import numpy as np
import pytest

from m3id.errors import ContractViolation
from m3id.gradcheck import gradient_check
from m3id.losses import (
    AlphaSchedule,
    BaselineDistillConfig,
    MixupConfig,
    VanillaKDConfig,
    alpha_at,
    attention_transfer_loss,
    bag_softmax,
    bce_loss,
    draw_mixup_lambda,
    kd_loss,
    mixup,
    similarity_preserving_loss,
    total_loss,
    vanilla_kd_loss,
)
from m3id.tensor import Tensor, backward


def kl_oracle(p, q):
    # plain elementwise sum, independent of the library's composition
    acc = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            acc += pi * (np.log(pi) - np.log(max(qi, 1e-12)))
    return acc


class TestBagSoftmax:
    def test_uniform_for_equal_scores(self):
        d = bag_softmax(np.full(8, 0.37))
        np.testing.assert_allclose(d.probs.data, np.full(8, 0.125), atol=1e-15)

    def test_single_instance_is_certain(self):
        d = bag_softmax(np.array([0.42]))
        np.testing.assert_array_equal(d.probs.data, [1.0])

    def test_closed_form_two_scores(self):
        d = bag_softmax(np.array([0.0, 1.0]))
        np.testing.assert_allclose(d.probs.data, [0.26894142137, 0.73105857863], atol=1e-10)

    def test_batched_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        d = bag_softmax(rng.random((5, 8)))
        np.testing.assert_allclose(d.probs.data.sum(axis=1), np.ones(5), atol=1e-6)
        assert np.all(d.probs.data > 0)

    def test_empty_bag_rejected(self):
        with pytest.raises(ContractViolation):
            bag_softmax(np.empty(0))

    def test_nonfinite_scores_rejected(self):
        with pytest.raises(ContractViolation):
            bag_softmax(np.array([0.5, np.nan]))


class TestKDLoss:
    def test_identical_distributions_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d = bag_softmax(rng.random(8))
            assert abs(kd_loss(d, d).item()) <= 1e-12

    def test_closed_form(self):
        p_t = Tensor(np.array([0.75, 0.25]))
        p_s = Tensor(np.array([0.25, 0.75]))
        want = 0.5 * np.log(3.0)
        assert abs(kd_loss(p_t, p_s).item() - want) <= 1e-12

    def test_matches_oracle_and_nonneg(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m = rng.integers(2, 9)
            p = bag_softmax(rng.random(m)).probs
            q = bag_softmax(rng.random(m)).probs
            got = kd_loss(p, q).item()
            assert got >= 0.0
            assert abs(got - kl_oracle(p.data, q.data)) <= 1e-12

    def test_batch_mean_reduction(self):
        rng = np.random.default_rng(3)
        a = bag_softmax(rng.random((4, 6)))
        b = bag_softmax(rng.random((4, 6)))
        per_bag = [kd_loss(Tensor(a.probs.data[i]), Tensor(b.probs.data[i])).item() for i in range(4)]
        assert abs(kd_loss(a, b).item() - np.mean(per_bag)) <= 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        p = bag_softmax(rng.random(8)).probs
        q = bag_softmax(rng.random(8)).probs
        perm = rng.permutation(8)
        base = kd_loss(p, q).item()
        permuted = kd_loss(Tensor(p.data[perm]), Tensor(q.data[perm])).item()
        assert abs(base - permuted) <= 1e-12

    def test_mismatched_bags_rejected(self):
        with pytest.raises(ContractViolation):
            kd_loss(Tensor(np.full(4, 0.25)), Tensor(np.full(8, 0.125)))

    def test_single_instance_bag_zero_gradient(self):
        scores = Tensor(np.array([[0.3], [0.9]]), requires_grad=True)
        student = bag_softmax(scores)
        teacher = bag_softmax(np.array([[0.7], [0.1]]))
        loss = kd_loss(teacher, student)
        assert loss.item() == 0.0
        backward(loss)
        np.testing.assert_array_equal(scores.grad, np.zeros((2, 1)))

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        raw = Tensor(rng.random((3, 5)), requires_grad=True)
        teacher = bag_softmax(rng.random((3, 5)))
        report = gradient_check(lambda: kd_loss(teacher, bag_softmax(raw)), {"raw": raw})
        assert report.ok, report.failures


class TestBCELoss:
    def test_perfect_prediction_zero(self):
        pred = Tensor(np.array([0.0, 1.0, 1.0]))
        assert bce_loss(pred, np.array([0.0, 1.0, 1.0])).item() <= 1e-10

    def test_half_prediction_is_ln2(self):
        pred = Tensor(np.array([0.5, 0.5]))
        assert abs(bce_loss(pred, np.array([0.0, 1.0])).item() - np.log(2.0)) <= 1e-12

    def test_matches_per_sample_oracle(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0.01, 0.99, 16)
        y = rng.integers(0, 2, 16).astype(float)
        want = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert abs(bce_loss(Tensor(p), y).item() - want) <= 1e-12

    def test_soft_targets_accepted(self):
        v = bce_loss(Tensor(np.array([0.7])), np.array([0.3])).item()
        want = -(0.3 * np.log(0.7) + 0.7 * np.log(0.3))
        assert abs(v - want) <= 1e-12

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            bce_loss(Tensor(np.array([0.5])), np.array([1.5]))

    def test_gradient_check(self):
        rng = np.random.default_rng(7)
        p = Tensor(rng.uniform(0.2, 0.8, 6), requires_grad=True)
        y = rng.uniform(0, 1, 6)
        report = gradient_check(lambda: bce_loss(p, y), {"p": p})
        assert report.ok, report.failures


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(0.5, 0.1, 20.0) == 2.5
        assert total_loss(0.5, 0.1, 150.0) == 15.5

    def test_alpha_zero_is_bce(self):
        bce = Tensor(np.array(0.37))
        out = total_loss(bce, Tensor(np.array(9.9)), 0.0)
        assert out.item() == bce.item()

    def test_negative_alpha_rejected(self):
        with pytest.raises(ContractViolation):
            total_loss(0.5, 0.1, -1.0)


class TestAlphaSchedule:
    def test_cosine_endpoints_exact(self):
        s = AlphaSchedule("cosine", 20.0, 40)
        assert abs(alpha_at(s, 0) - 0.0) <= 1e-12
        assert abs(alpha_at(s, 40) - 20.0) <= 1e-12
        assert abs(alpha_at(s, 20) - 10.0) <= 1e-12

    def test_linear(self):
        s = AlphaSchedule("linear", 20.0, 40)
        assert abs(alpha_at(s, 10) - 5.0) <= 1e-12
        assert alpha_at(s, 0) == 0.0
        assert alpha_at(s, 40) == 20.0

    def test_constant(self):
        s = AlphaSchedule("constant", 150.0, 40)
        assert all(alpha_at(s, t) == 150.0 for t in range(41))

    def test_cosine_monotone_grid(self):
        s = AlphaSchedule("cosine", 20.0, 1000)
        vals = [alpha_at(s, t) for t in range(1001)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 20.0 for v in vals)

    def test_out_of_range_rejected(self):
        s = AlphaSchedule("cosine", 20.0, 40)
        with pytest.raises(ContractViolation):
            alpha_at(s, 41)
        with pytest.raises(ContractViolation):
            alpha_at(s, -1)

    def test_bad_kind_rejected(self):
        with pytest.raises(ContractViolation):
            AlphaSchedule("exponential", 20.0, 40)


class TestVanillaKD:
    def test_identical_logits_zero(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((4, 2))
        assert vanilla_kd_loss(Tensor(z), Tensor(z.copy()), 2.0).item() <= 1e-12

    def test_closed_form_two_class(self):
        t = Tensor(np.array([[2.0, 0.0]]))
        s = Tensor(np.array([[0.0, 2.0]]))
        pt = np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum()
        ps = np.exp([0.0, 2.0]) / np.exp([0.0, 2.0]).sum()
        want = kl_oracle(pt, ps)
        assert abs(vanilla_kd_loss(t, s, 1.0).item() - want) <= 1e-10

    def test_high_temperature_softens(self):
        # the divergence itself (loss / T^2) vanishes as both distributions
        # flatten toward uniform; the T^2 factor deliberately compensates
        rng = np.random.default_rng(9)
        t = Tensor(rng.standard_normal((6, 2)) * 3)
        s = Tensor(rng.standard_normal((6, 2)) * 3)
        kl_sharp = vanilla_kd_loss(t, s, 1.0).item()
        kl_soft = vanilla_kd_loss(t, s, 100.0).item() / 100.0 ** 2
        assert kl_soft < kl_sharp
        assert kl_soft < 1e-2

    def test_config_validation(self):
        assert VanillaKDConfig().temperature == 1.0
        with pytest.raises(ContractViolation):
            VanillaKDConfig(temperature=0.0)
        with pytest.raises(ContractViolation):
            vanilla_kd_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), 0.0)

    def test_shape_contract(self):
        with pytest.raises(ContractViolation):
            vanilla_kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), 1.0)


def at_oracle(t_maps, s_maps):
    acc = 0.0
    for tm, sm in zip(t_maps, s_maps):
        at = (tm ** 2).sum(axis=1).reshape(tm.shape[0], -1)
        as_ = (sm ** 2).sum(axis=1).reshape(sm.shape[0], -1)
        at = at / np.linalg.norm(at, axis=1, keepdims=True)
        as_ = as_ / np.linalg.norm(as_, axis=1, keepdims=True)
        acc += np.mean(np.sum((as_ - at) ** 2, axis=1))
    return acc


class TestAttentionTransfer:
    def test_identical_maps_zero(self):
        rng = np.random.default_rng(10)
        maps = [rng.standard_normal((2, 4, 3, 3, 3)) for _ in range(3)]
        loss = attention_transfer_loss([Tensor(m) for m in maps], [Tensor(m.copy()) for m in maps])
        assert loss.item() <= 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((2, 4, 3, 3, 3))
        loss = attention_transfer_loss([Tensor(m)], [Tensor(5.0 * m)])
        assert loss.item() <= 1e-12

    def test_matches_oracle_and_range(self):
        rng = np.random.default_rng(12)
        t_maps = [rng.standard_normal((3, 4, 2, 3, 2)) for _ in range(3)]
        s_maps = [rng.standard_normal((3, 6, 2, 3, 2)) for _ in range(3)]  # channels may differ
        got = attention_transfer_loss([Tensor(m) for m in t_maps], [Tensor(m) for m in s_maps]).item()
        assert abs(got - at_oracle(t_maps, s_maps)) <= 1e-10
        assert 0.0 <= got <= 4.0 * 3

    def test_tap_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            attention_transfer_loss([Tensor(np.ones((2, 3, 4, 4, 4)))],
                                    [Tensor(np.ones((2, 3, 2, 2, 2)))])

    def test_gradient_check(self):
        rng = np.random.default_rng(13)
        s = Tensor(rng.standard_normal((2, 3, 2, 2, 2)), requires_grad=True)
        t_map = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))
        report = gradient_check(lambda: attention_transfer_loss([t_map], [s]), {"s": s})
        assert report.ok, report.failures


def sp_oracle(t_acts, s_acts):
    def norm_gram(a):
        g = a @ a.T
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    b = t_acts.shape[0]
    return np.sum((norm_gram(s_acts) - norm_gram(t_acts)) ** 2) / (b * b)


class TestSimilarityPreserving:
    def test_identical_zero(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((4, 8))
        assert similarity_preserving_loss(Tensor(a), Tensor(a.copy())).item() <= 1e-12

    def test_global_scale_invariance(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((4, 8))
        assert similarity_preserving_loss(Tensor(a), Tensor(3.0 * a)).item() <= 1e-12

    def test_matches_gram_oracle(self):
        rng = np.random.default_rng(16)
        t = rng.standard_normal((4, 8))
        s = rng.standard_normal((4, 16))
        got = similarity_preserving_loss(Tensor(t), Tensor(s)).item()
        assert abs(got - sp_oracle(t, s)) <= 1e-10

    def test_small_batch_rejected(self):
        with pytest.raises(ContractViolation):
            similarity_preserving_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))

    def test_gradient_check(self):
        rng = np.random.default_rng(17)
        s = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        t = Tensor(rng.standard_normal((3, 4)))
        report = gradient_check(lambda: similarity_preserving_loss(t, s), {"s": s})
        assert report.ok, report.failures

    def test_config_defaults(self):
        cfg = BaselineDistillConfig()
        assert cfg.at_weight == 1000.0 and cfg.sp_weight == 100.0
        assert cfg.at_taps == ("res_out", "a2n0", "a2n1") and cfg.sp_tap == "fc1"


class TestMixup:
    def test_lambda_one_keeps_a(self):
        a = (np.ones((1, 4, 4, 4)), np.arange(13.0), 1.0)
        b = (np.zeros((1, 4, 4, 4)), np.zeros(13), 0.0)
        vol, clin, y = mixup(a, b, 1.0)
        np.testing.assert_array_equal(vol, a[0])
        np.testing.assert_array_equal(clin, a[1])
        assert y == 1.0

    def test_half_mix_soft_label(self):
        a = (np.zeros((1, 2, 2, 2)), None, 0.0)
        b = (np.ones((1, 2, 2, 2)), None, 1.0)
        vol, clin, y = mixup(a, b, 0.5)
        assert y == 0.5 and clin is None
        np.testing.assert_array_equal(vol, np.full((1, 2, 2, 2), 0.5))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(18)
        va, vb = rng.standard_normal((1, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        ca, cb = rng.standard_normal(13), rng.standard_normal(13)
        vol, clin, y = mixup((va, ca, 1.0), (vb, cb, 0.0), 0.3)
        np.testing.assert_allclose(vol, 0.3 * va + 0.7 * vb, atol=1e-12)
        np.testing.assert_allclose(clin, 0.3 * ca + 0.7 * cb, atol=1e-12)
        assert abs(y - 0.3) <= 1e-12

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            mixup((np.ones(3), None, 0.0), (np.ones(4), None, 1.0), 0.5)
        with pytest.raises(ContractViolation):
            mixup((np.ones(3), None, 0.0), (np.ones(3), np.ones(13), 1.0), 0.5)
        with pytest.raises(ContractViolation):
            mixup((np.ones(3), None, 0.0), (np.ones(3), None, 1.0), 1.5)
        with pytest.raises(ContractViolation):
            MixupConfig(beta_param=0.0)

    def test_lambda_distribution_in_range(self):
        rng = np.random.default_rng(19)
        lams = [draw_mixup_lambda(rng, 0.2) for _ in range(500)]
        assert all(0.0 <= l <= 1.0 for l in lams)
        # Beta(0.2, 0.2) piles mass near the endpoints
        assert np.mean([l < 0.1 or l > 0.9 for l in lams]) > 0.5
