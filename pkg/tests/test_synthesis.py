import numpy as np
import pytest

from ddnfl import errors
from ddnfl.certify import check_certificate
from ddnfl.network import ImitationLoss, assemble_N
from ddnfl.plant import ExperimentData, PlantModel, StateBox, collect
from ddnfl.sectors import loop_transform, sector_context
from ddnfl.synthesis import (TRACE_FIELDS, ConstraintPenalty, ExpertSpec, SynthesisConfig,
                             augmented_lagrangian_value, generate_expert_demos, lqr_gain,
                             synthesize, ul_matrix, write_trace)

from conftest import random_controller, small_controller


def fd_gradient(f, nn, h=1e-6):
    theta = nn.flat()
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(nn.with_flat(theta + e)) - f(nn.with_flat(theta - e))) / (2 * h)
    return g


class TestExpert:
    def test_expensive_control_gives_zero_gain(self):
        K = lqr_gain(np.array([[0.5]]), np.array([[1.0]]), np.eye(1), 1e8 * np.eye(1))
        assert abs(K[0, 0]) < 1e-6

    def test_unstable_scalar_is_stabilised(self):
        K = ExpertSpec(Q=1.0, R=1.0).gain(PlantModel([[2.0]], [[1.0]]))
        assert abs(2.0 + K[0, 0]) < 1.0
        # scalar Riccati: X = 4X - 4X^2/(1+X) + 1 -> X = 2 + sqrt(5)
        X = 2.0 + np.sqrt(5.0)
        assert K[0, 0] == pytest.approx(-2.0 * X / (1.0 + X))

    def test_unstabilisable_pair(self):
        with pytest.raises(errors.ExpertSynthesisFailed):
            lqr_gain(np.array([[2.0]]), np.array([[0.0]]), np.eye(1), np.eye(1))

    def test_explicit_gain(self):
        assert ExpertSpec(K=[[-0.3, 0.1]]).gain(None).shape == (1, 2)

    def test_demos_deterministic(self):
        plant = PlantModel([[0.9, 0.1], [0.0, 0.8]], [[0.0], [1.0]])
        box = StateBox.symmetric([1.0, 2.0])
        a = generate_expert_demos(plant, box, ExpertSpec(), 50, seed=3)
        b = generate_expert_demos(plant, box, ExpertSpec(), 50, seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert box.contains(a[0]).all() if np.ndim(box.contains(a[0])) else box.contains(a[0])


@pytest.fixture
def scalar_problem():
    plant = PlantModel([[0.5]], [[1.0]])
    box = StateBox([-1.0], [1.0])
    data = collect(plant, 8, seed=0, box=box)
    return plant, box, data


class TestAugmentedLagrangian:
    def test_exact_equality_reduces_to_loss(self, scalar_problem):
        plant, box, data = scalar_problem
        nn = small_controller([[[0.4]], [[-0.3]]])
        ctx = sector_context(nn, box)
        Nt = loop_transform(assemble_N(nn), ctx)
        Q1, q2 = np.eye(1) * 2.0, np.ones(1)
        S_pinv = np.linalg.pinv(np.vstack([data.U0, data.X0]))
        L1 = S_pinv @ np.vstack([Nt.Nt_pix @ Q1, Q1])
        L2 = S_pinv @ np.vstack([Nt.Nt_piz * q2, np.zeros((1, 1))])
        values = (Q1, q2, L1, L2, Nt.Nt_nux @ Q1, Nt.Nt_nuz * q2)
        loss = ImitationLoss(np.array([[0.5], [-1.0]]), np.array([[0.1], [0.2]]))
        cfg = SynthesisConfig(eta1=3.0, eta2=0.0)
        value = augmented_lagrangian_value(nn, ctx, values, None, cfg, data, loss)
        assert value == pytest.approx(3.0 * loss.value(nn), abs=1e-10)

    def test_hand_computed_scalar(self, scalar_problem):
        _, box, data = scalar_problem
        nn = small_controller([[[0.4]], [[-0.3]]])
        ctx = sector_context(nn, box)
        Nt = loop_transform(assemble_N(nn), ctx).full
        T = data.T
        Q1, q2 = np.eye(1), np.array([2.0])
        L1, L2 = np.full((T, 1), 0.1), np.full((T, 1), -0.2)
        L3, L4 = np.array([[0.3]]), np.array([[0.05]])
        Y = np.array([[1.0, -2.0], [0.5, 3.0]])
        cfg = SynthesisConfig(eta1=0.0, eta2=5.0, rho=7.0)
        uL = data.U0 @ np.hstack([L1, L2])
        R = np.array([[Nt[0, 0] * 1.0 - uL[0, 0], Nt[0, 1] * 2.0 - uL[0, 1]],
                      [Nt[1, 0] * 1.0 - 0.3, Nt[1, 1] * 2.0 - 0.05]])
        expected = float(np.sum(Y * R) + 3.5 * np.sum(R**2))
        value = augmented_lagrangian_value(nn, ctx, (Q1, q2, L1, L2, L3, L4), Y, cfg, data)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_log_det_term(self, scalar_problem):
        _, box, data = scalar_problem
        nn = small_controller([[[0.4]], [[-0.3]]])
        ctx = sector_context(nn, box)
        T = data.T
        base = (np.eye(1), np.ones(1), np.zeros((T, 1)), np.zeros((T, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        scaled = (np.eye(1) * np.e,) + base[1:]
        cfg = SynthesisConfig(eta1=0.0, eta2=2.0, rho=1e-9)
        v0 = augmented_lagrangian_value(nn, ctx, base, None, cfg, data)
        v1 = augmented_lagrangian_value(nn, ctx, scaled, None, cfg, data)
        assert v1 - v0 == pytest.approx(-2.0, abs=1e-6)

    def test_domain_error(self, scalar_problem):
        _, box, data = scalar_problem
        nn = small_controller([[[0.4]], [[-0.3]]])
        T = data.T
        bad = (-np.eye(1), np.ones(1), np.zeros((T, 1)), np.zeros((T, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        with pytest.raises(errors.DomainError):
            augmented_lagrangian_value(nn, sector_context(nn, box), bad, None, SynthesisConfig(), data)

    @pytest.mark.parametrize("sizes", [[1, 2, 1], [2, 4, 3, 1], [3, 3, 2, 2]])
    def test_penalty_gradient_fd(self, rng, sizes):
        n_x, n_u = sizes[0], sizes[-1]
        nn = random_controller(rng, sizes)
        box = StateBox.symmetric(np.ones(n_x))
        ctx = sector_context(nn, box)
        T, n_phi = 12, nn.n_phi
        data = ExperimentData(rng.normal(size=(n_u, T)), rng.normal(size=(n_x, T)), rng.normal(size=(n_x, T)))
        G = rng.normal(size=(n_x, n_x))
        Q1, q2 = G @ G.T + np.eye(n_x), rng.uniform(0.5, 2, n_phi)
        UL = ul_matrix(data, rng.normal(size=(T, n_x)), rng.normal(size=(T, n_phi)),
                       rng.normal(size=(n_phi, n_x)), rng.normal(size=(n_phi, n_phi)))
        pen = ConstraintPenalty(ctx, Q1, q2, UL, rng.normal(size=UL.shape), rho=10.0)
        analytic = np.concatenate([g.ravel() for g in pen(nn)[1]])
        numeric = fd_gradient(pen.value, nn)
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


class TestSynthesize:
    def scalar_cfg(self, **kw):
        base = dict(eta1=100.0, eta2=1.0, inner_epochs=100, pretrain_epochs=500,
                    expert=ExpertSpec(Q=1.0, R=1.0), demo_count=100)
        base.update(kw)
        return SynthesisConfig(**base)

    def test_scalar_end_to_end(self, scalar_problem):
        plant, box, data = scalar_problem
        cfg = self.scalar_cfg()
        demos = generate_expert_demos(plant, box, cfg.expert, cfg.demo_count, seed=0)
        result = synthesize(data, box, [1, 2, 1], cfg, demos)
        assert result.converged and result.verified
        assert len(result.trace) <= 20
        report = check_certificate(result.certificate, data, box, plant, result.controller, samples=200)
        assert report.ok, report

    def test_multiplier_update_is_exact(self):
        plant = PlantModel([[1.1]], [[1.0]])
        box = StateBox([-1.0], [1.0])
        data = collect(plant, 8, seed=1, box=box)
        cfg = self.scalar_cfg(sigma=1e-12, max_outer_iters=3, inner_epochs=5)
        demos = generate_expert_demos(plant, box, cfg.expert, cfg.demo_count, seed=1)
        # positive feedback: not certifiable, so the loop has to run
        start = small_controller([[[2.0], [-1.5]], [[1.0, -1.0]]])
        with pytest.raises(errors.NotConverged) as info:
            synthesize(data, box, [1, 2, 1], cfg, demos, initial=start)
        result = info.value.result
        assert not result.converged and result.certificate is None
        Ys, Rs = result.multipliers, result.residuals
        assert len(Rs) == 3
        for k, R in enumerate(Rs):
            np.testing.assert_allclose(Ys[k + 1] - Ys[k], cfg.rho * R, rtol=0, atol=1e-9 * cfg.rho)

    def test_deterministic(self, scalar_problem):
        plant, box, data = scalar_problem
        cfg = self.scalar_cfg()
        demos = generate_expert_demos(plant, box, cfg.expert, cfg.demo_count, seed=0)
        a = synthesize(data, box, [1, 2, 1], cfg, demos)
        b = synthesize(data, box, [1, 2, 1], cfg, demos)
        assert len(a.trace) == len(b.trace)
        np.testing.assert_allclose(a.controller.flat(), b.controller.flat(), atol=1e-6)

    def test_not_persistently_exciting(self, scalar_problem):
        plant, box, _ = scalar_problem
        bad = ExperimentData(np.zeros((1, 6)), np.zeros((1, 6)), np.zeros((1, 6)))
        with pytest.raises(errors.NotPersistentlyExciting):
            synthesize(bad, box, [1, 2, 1], self.scalar_cfg(), (np.zeros((1, 1)), np.zeros((1, 1))))

    def test_architecture_mismatch(self, scalar_problem):
        plant, box, data = scalar_problem
        with pytest.raises(errors.InvalidDimensions):
            synthesize(data, box, [2, 2, 1], self.scalar_cfg(), (np.zeros((1, 2)), np.zeros((1, 1))))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthesisConfig(rho=0.0)
        with pytest.raises(ValueError):
            SynthesisConfig(eta1=-1.0)
        assert isinstance(SynthesisConfig(expert={"Q": 1.0}).expert, ExpertSpec)


def test_trace_csv(tmp_path, scalar_problem):
    plant, box, data = scalar_problem
    cfg = SynthesisConfig(eta2=1.0, inner_epochs=20, pretrain_epochs=100, demo_count=50,
                          expert=ExpertSpec(Q=1.0, R=1.0))
    demos = generate_expert_demos(plant, box, cfg.expert, 50, seed=0)
    result = synthesize(data, box, [1, 2, 1], cfg, demos)
    write_trace(result.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].split(",") == TRACE_FIELDS
    assert len(lines) == len(result.trace) + 1
