import numpy as np
import pytest

from stict import ict
from stict import tensor as T
from stict.tensor import Tensor

from conftest import lcs_oracle, warp_oracle


class TestLcsPlan:
    def test_hand_worked_row(self):
        # 1-channel 1x3 strip [1, -1, 0.5]: the center (-1) correlates
        # -1 with the left pixel and -0.5 with the right, so it partners left
        feat = np.array([1.0, -1.0, 0.5]).reshape(1, 1, 1, 3)
        plan = ict.lcs_plan(feat, 3, np.random.default_rng(0))
        assert plan.partner_flat[0, 1] == 0

    def test_constant_feature_tie_break(self):
        feat = np.ones((1, 2, 4, 4))
        plan = ict.lcs_plan(feat, 3, np.random.default_rng(0))
        assert plan.partner_flat.reshape(4, 4)[0, 0] == 1  # first raster neighbor
        assert plan.partner_flat.reshape(4, 4)[2, 2] == 1 * 4 + 1  # top-left of window

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        feat = rng.standard_normal((1, 8, 6, 6))
        plan = ict.lcs_plan(feat, 3, np.random.default_rng(1))
        assert np.array_equal(plan.partner_flat, lcs_oracle(feat, 3))

    def test_oracle_many_instances(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            d = rng.choice([3, 5])
            h = int(rng.integers(d, 9))
            w = int(rng.integers(d, 9))
            feat = rng.standard_normal((2, 4, h, w))
            plan = ict.lcs_plan(feat, int(d), np.random.default_rng(seed + 100))
            assert np.array_equal(plan.partner_flat, lcs_oracle(feat, int(d)))

    def test_window_validation(self):
        feat = np.zeros((1, 1, 4, 4))
        with pytest.raises(ValueError):
            ict.lcs_plan(feat, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            ict.lcs_plan(feat, 5, np.random.default_rng(0))

    def test_random_scheme_in_window(self):
        rng = np.random.default_rng(3)
        feat = rng.standard_normal((2, 3, 5, 5))
        plan = ict.lcs_plan(feat, 3, rng, scheme="ri-feature")
        part = plan.partner_flat.reshape(2, 5, 5)
        for b in range(2):
            for i in range(5):
                for j in range(5):
                    pi, pj = divmod(part[b, i, j], 5)
                    assert max(abs(pi - i), abs(pj - j)) <= 1
                    assert (pi, pj) != (i, j)

    def test_lambda_in_unit_interval(self, rng):
        plan = ict.lcs_plan(rng.standard_normal((1, 2, 6, 6)), 3, rng)
        assert plan.lam.min() >= 0.0 and plan.lam.max() <= 1.0


class TestApplyShuffle:
    def test_hand_worked_row(self):
        feat = np.array([1.0, -1.0, 0.5]).reshape(1, 1, 1, 3)
        plan = ict.lcs_plan(feat, 3, np.random.default_rng(0))
        out = ict.apply_shuffle(Tensor(feat), plan)
        assert out.data[0, 0, 0, 1] == 1.0

    def test_no_self_partner(self, rng):
        feat = rng.standard_normal((1, 4, 6, 6))
        plan = ict.lcs_plan(feat, 3, rng)
        flat = np.arange(36)
        assert not (plan.partner_flat[0] == flat).any()

    def test_deterministic_and_source_unchanged(self, rng):
        feat = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        t = Tensor(feat.copy())
        plan = ict.lcs_plan(feat, 3, np.random.default_rng(5))
        a = ict.apply_shuffle(t, plan)
        b = ict.apply_shuffle(t, plan)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(t.data, feat)

    def test_extent_mismatch(self, rng):
        plan = ict.lcs_plan(rng.standard_normal((1, 2, 4, 4)), 3, rng)
        with pytest.raises(T.ShapeError):
            ict.apply_shuffle(Tensor(np.zeros((1, 2, 6, 6))), plan)

    def test_gradient_scatters_back(self, rng):
        feat = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
        plan = ict.lcs_plan(feat.data, 3, rng)
        report = T.gradcheck(lambda: T.reduce(T.multiply(ict.apply_shuffle(feat, plan), feat), "sum"), [feat])
        assert report.passed, str(report)


class TestMix:
    def test_identity_extremes(self, rng):
        f = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        s = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        ones = np.ones((1, 1, 4, 4), dtype=np.float32)
        assert np.array_equal(ict.mix(f, s, ones).data, f.data)
        assert np.array_equal(ict.mix(f, s, 0.0 * ones).data, s.data)

    def test_halfway(self):
        f = Tensor(np.full((1, 1, 1, 1), 2.0))
        s = Tensor(np.full((1, 1, 1, 1), 4.0))
        lam = np.full((1, 1, 1, 1), 0.5)
        assert ict.mix(f, s, lam).data[0, 0, 0, 0] == 3.0

    def test_linearity(self, rng):
        f = rng.standard_normal((1, 2, 3, 3))
        s = rng.standard_normal((1, 2, 3, 3))
        lam = rng.random((1, 1, 3, 3))
        a = 2.5
        left = ict.mix(Tensor(a * f, dtype=np.float64), Tensor(a * s, dtype=np.float64), lam)
        right = ict.mix(Tensor(f, dtype=np.float64), Tensor(s, dtype=np.float64), lam)
        assert np.allclose(left.data, a * right.data, atol=1e-12)

    def test_rejects_bad_lambda(self, rng):
        f = Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            ict.mix(f, f, np.full((1, 1, 2, 2), 1.5))


class TestMixPlanValidation:
    def test_self_partner_rejected(self):
        lam = np.full((1, 1, 2, 2), 0.5)
        part = np.arange(4)[None, :].copy()
        with pytest.raises(ValueError):
            ict.MixPlan(part, lam, 3, "si")

    def test_out_of_bounds_rejected(self):
        lam = np.full((1, 1, 2, 2), 0.5)
        part = np.full((1, 4), 9)
        with pytest.raises(ValueError):
            ict.MixPlan(part, lam, 3, "si")

    def test_lam_upsampling_is_nearest(self):
        lam = np.arange(4, dtype=float).reshape(1, 1, 2, 2) / 4
        part = np.array([[1, 0, 3, 2]])
        plan = ict.MixPlan(part, lam, 3, "si")
        up = plan.lam_at((4, 4))
        assert up.shape == (1, 1, 4, 4)
        assert np.array_equal(up[0, 0, :2, :2], np.full((2, 2), lam[0, 0, 0, 0], dtype=np.float32))


class TestTemporalTarget:
    def _triplet(self, frames, flows_b, flows_f, lam_t=0.5):
        return ict.FrameTriplet(
            prev=frames[0], cur=frames[1], next=frames[2],
            flow_bwd=ict.FlowField(flows_b), flow_fwd=ict.FlowField(flows_f),
            lam_t=lam_t,
        )

    def test_static_identity(self, rng):
        frame = rng.random((1, 3, 8, 8)).astype(np.float32)
        pred = rng.random((1, 1, 8, 8)).astype(np.float32)
        zero = np.zeros((1, 2, 8, 8), dtype=np.float32)
        trip = self._triplet([frame] * 3, zero, zero)
        target = ict.temporal_target(Tensor(pred), Tensor(pred), trip)
        assert np.allclose(target.data, pred)

    def test_halfway_blend(self, rng):
        frame = rng.random((1, 3, 4, 4)).astype(np.float32)
        zero = np.zeros((1, 2, 4, 4), dtype=np.float32)
        trip = self._triplet([frame] * 3, zero, zero)
        a = rng.random((1, 1, 4, 4)).astype(np.float32)
        b = rng.random((1, 1, 4, 4)).astype(np.float32)
        target = ict.temporal_target(Tensor(a), Tensor(b), trip)
        assert np.allclose(target.data, (a + b) / 2)

    def test_matches_warp_oracle_composition(self, rng):
        frame = rng.random((2, 3, 6, 6)).astype(np.float32)
        fb = (rng.standard_normal((2, 2, 6, 6)) * 1.5).astype(np.float32)
        ff = (rng.standard_normal((2, 2, 6, 6)) * 1.5).astype(np.float32)
        trip = self._triplet([frame] * 3, fb, ff, lam_t=0.3)
        a = rng.random((2, 1, 6, 6)).astype(np.float64)
        b = rng.random((2, 1, 6, 6)).astype(np.float64)
        target = ict.temporal_target(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), trip)
        expect = 0.3 * warp_oracle(a, fb) + 0.7 * warp_oracle(b, ff)
        assert np.abs(target.data - expect).max() < 1e-12

    def test_target_is_constant(self, rng):
        frame = rng.random((1, 3, 4, 4)).astype(np.float32)
        zero = np.zeros((1, 2, 4, 4), dtype=np.float32)
        trip = self._triplet([frame] * 3, zero, zero)
        p = Tensor(rng.random((1, 1, 4, 4)).astype(np.float32), requires_grad=True)
        target = ict.temporal_target(p, p, trip)
        assert not target.requires_grad

    def test_triplet_validation(self, rng):
        frame = rng.random((1, 3, 4, 4)).astype(np.float32)
        zero = np.zeros((1, 2, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            self._triplet([frame] * 3, zero, zero, lam_t=1.5)
        with pytest.raises(T.ShapeError):
            self._triplet([frame, frame, rng.random((1, 3, 6, 6)).astype(np.float32)], zero, zero)
