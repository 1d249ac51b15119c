import numpy as np
import pytest

from stict import losses
from stict import tensor as T
from stict.sanet import ModelOutputs
from stict.tensor import Tensor

from conftest import ppa_oracle


def _binary_mask(rng, shape):
    return (rng.random(shape) > 0.5).astype(np.float64)


class TestPpaLoss:
    def test_perfect_prediction_near_zero(self, rng):
        gt = _binary_mask(rng, (1, 1, 8, 8))
        loss = losses.ppa_loss(Tensor(gt, dtype=np.float64), gt)
        assert loss.item() <= 2 * losses.PPA_EPS * 6 * 10  # generous epsilon budget

    def test_interior_weight_is_one(self):
        gt = np.ones((1, 1, 16, 16))
        w = 1 + 5 * np.abs(losses.box_mean(gt, 7) - gt)
        assert w[0, 0, 8, 8] == 1.0

    def test_matches_two_loop_oracle(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            pred = r.random((2, 1, 16, 16))
            gt = _binary_mask(r, (2, 1, 16, 16))
            loss = losses.ppa_loss(Tensor(pred, dtype=np.float64), gt, weight_window=7)
            assert abs(loss.item() - ppa_oracle(pred, gt, 7)) < 1e-10

    def test_rejects_non_binary(self, rng):
        pred = Tensor(rng.random((1, 1, 4, 4)))
        with pytest.raises(ValueError):
            losses.ppa_loss(pred, rng.random((1, 1, 4, 4)))

    def test_gradient(self, rng):
        pred = Tensor(rng.random((1, 1, 6, 6)) * 0.8 + 0.1, requires_grad=True, dtype=np.float64)
        gt = _binary_mask(rng, (1, 1, 6, 6))
        report = T.gradcheck(lambda: losses.ppa_loss(pred, gt), [pred])
        assert report.passed, str(report)


def _const_outputs(value, shape=(1, 1, 8, 8)):
    m = lambda: Tensor(np.full(shape, value))
    return ModelOutputs([m(), m(), m()], m(), [m(), m(), m()], m())


class TestSupervisedLoss:
    def test_unit_components_weight_sum(self, monkeypatch, rng):
        # stub the per-map loss at 1.0 to expose the aggregation weights
        monkeypatch.setattr(losses, "ppa_loss", lambda p, g, weight_window=7: Tensor(np.float64(1.0)))
        out = _const_outputs(0.5)
        gt = _binary_mask(rng, (1, 1, 8, 8))
        total = losses.supervised_loss(out, gt)
        assert total.item() == pytest.approx(2.75, abs=1e-12)

    def test_perfect_prediction(self, rng):
        gt = _binary_mask(rng, (1, 1, 8, 8))
        out = ModelOutputs(*[
            [Tensor(gt.copy()) for _ in range(3)], Tensor(gt.copy()),
            [Tensor(gt.copy()) for _ in range(3)], Tensor(gt.copy()),
        ])
        assert losses.supervised_loss(out, gt).item() < 1e-4

    def test_copied_refiner_doubles_decoder(self, rng):
        gt = _binary_mask(rng, (1, 1, 8, 8))
        maps = [Tensor(rng.random((1, 1, 8, 8))) for _ in range(4)]
        shared = ModelOutputs(maps[:3], maps[3], maps[:3], maps[3])
        dec_only = sum(
            losses.ppa_loss(m, gt).item() / 2 ** (i + 1) for i, m in enumerate(maps[:3])
        ) + 0.5 * losses.ppa_loss(maps[3], gt).item()
        assert losses.supervised_loss(shared, gt).item() == pytest.approx(2 * dec_only, rel=1e-10)


class TestConsistencyLosses:
    def test_sic_zero_when_student_matches_blend(self, rng):
        tp = rng.random((1, 1, 8, 8))
        ts = rng.random((1, 1, 8, 8))
        lam = rng.random((1, 1, 8, 8))
        student = Tensor(lam * tp + (1 - lam) * ts, dtype=np.float64)
        assert losses.sic_loss(student, Tensor(tp), Tensor(ts), lam).item() < 1e-15

    def test_sic_lambda_one_reduces_to_teacher(self, rng):
        tp = rng.random((1, 1, 4, 4))
        ts = rng.random((1, 1, 4, 4))
        student = Tensor(rng.random((1, 1, 4, 4)), dtype=np.float64)
        a = losses.sic_loss(student, Tensor(tp), Tensor(ts), np.ones((1, 1, 4, 4)))
        b = np.mean((student.data - tp) ** 2)
        assert a.item() == pytest.approx(b, rel=1e-12)

    def test_sic_matches_mse_oracle(self, rng):
        student = Tensor(rng.random((2, 1, 6, 6)), dtype=np.float64)
        tp, ts = rng.random((2, 1, 6, 6)), rng.random((2, 1, 6, 6))
        lam = rng.random((2, 1, 6, 6))
        got = losses.sic_loss(student, Tensor(tp), Tensor(ts), lam).item()
        target = lam * tp + (1 - lam) * ts
        want = float(np.mean((student.data - target) ** 2))
        assert got == pytest.approx(want, rel=1e-12)

    def test_tic_shifted_step_edge(self):
        # step edge with the boundary moved one column: MSE = column mass / n
        a = np.zeros((1, 1, 4, 4))
        a[:, :, :, 2:] = 1.0
        b = np.zeros((1, 1, 4, 4))
        b[:, :, :, 1:] = 1.0
        loss = losses.tic_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        assert loss.item() == pytest.approx(4 / 16)

    def test_tic_gradient_only_to_student(self, rng):
        student = Tensor(rng.random((1, 1, 4, 4)), requires_grad=True, dtype=np.float64)
        target = Tensor(rng.random((1, 1, 4, 4)))
        loss = losses.tic_loss(student, target)
        loss.backward()
        assert student.grad is not None and target.grad is None

    def test_sc_average_and_zero_cases(self, rng):
        shape = (1, 1, 4, 4)
        teacher = [Tensor(np.full(shape, v)) for v in (0.0, 0.3, 0.6)]
        favg = np.full(shape, 0.3)
        students = [Tensor(favg.copy(), dtype=np.float64) for _ in range(3)]
        assert losses.sc_loss(students, teacher).item() < 1e-15
        identical = [Tensor(np.full(shape, 0.4, dtype=np.float64)) for _ in range(3)]
        assert losses.sc_loss(identical, identical).item() == 0.0

    def test_sc_needs_three(self, rng):
        m = Tensor(rng.random((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            losses.sc_loss([m, m], [m, m, m])


class TestRamp:
    def test_endpoints(self):
        w = losses.LossWeights()
        assert losses.ramp(w.t_max, w) == 1.0
        assert losses.ramp(0, w) == pytest.approx(np.exp(-5.0))
        assert losses.ramp(w.t_max // 2, w) == pytest.approx(np.exp(-1.25))

    def test_clamped_beyond_tmax(self):
        w = losses.LossWeights()
        assert losses.ramp(25, w) == w.beta_max

    def test_monotone_nondecreasing(self):
        w = losses.LossWeights()
        vals = [losses.ramp(t, w) for t in range(w.t_max + 1)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            losses.ramp(-1, losses.LossWeights())


class TestTotalLoss:
    def test_hand_sum(self):
        w = losses.LossWeights()
        total, bd = losses.total_loss(
            Tensor(np.float64(1.0)), Tensor(np.float64(0.1)),
            Tensor(np.float64(0.1)), Tensor(np.float64(0.1)), 1.0, w,
        )
        assert total.item() == pytest.approx(1.3)
        assert bd.total == pytest.approx(1.3)

    def test_beta_zero(self):
        w = losses.LossWeights()
        total, _ = losses.total_loss(
            Tensor(np.float64(2.0)), Tensor(np.float64(9.0)), None, None, 0.0, w
        )
        assert total.item() == 2.0

    def test_eta_zero_excludes_term(self):
        w = losses.LossWeights(eta_tic=0.0)
        total, bd = losses.total_loss(
            Tensor(np.float64(1.0)), None, Tensor(np.float64(5.0)), None, 1.0, w
        )
        assert total.item() == 1.0
        assert bd.tic == 5.0  # recorded but unweighted

    def test_non_finite_named(self):
        w = losses.LossWeights()
        bad = Tensor(np.float64(1.0))
        bad.data = np.array(np.inf)  # simulate a diverged component
        with pytest.raises(T.NonFiniteError, match="L_tic"):
            losses.total_loss(Tensor(np.float64(1.0)), None, bad, None, 1.0, w)

    def test_breakdown_invariant(self, rng):
        w = losses.LossWeights(eta_sic=2.0, eta_tic=0.5, eta_sc=3.0)
        parts = [Tensor(np.float64(v)) for v in rng.random(4)]
        beta = 0.37
        total, bd = losses.total_loss(parts[0], parts[1], parts[2], parts[3], beta, w)
        expect = bd.sup + beta * (2.0 * bd.sic + 0.5 * bd.tic + 3.0 * bd.sc)
        assert bd.total == pytest.approx(expect, rel=1e-12)
