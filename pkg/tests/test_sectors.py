import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddnfl.errors import InvalidInterval, InvalidMultiplier
from ddnfl.network import BlockMatrixN, assemble_N, forward
from ddnfl.plant import StateBox
from ddnfl.sectors import (SectorContext, loop_transform, loop_transform_jvp, loop_transform_vjp,
                           normalized_activation, preactivation_bounds, sector_context,
                           stacked_sector_qc, tanh_sector, transformed)

from conftest import random_controller, small_controller


def transformed_outputs(Nt, ctx, x, nu, omega):
    """u and nu recovered from the transformed system driven by the normalised activation."""
    z = normalized_activation(nu, omega, ctx)
    return Nt.full @ np.concatenate([x, z])


class TestBounds:
    def test_zero_first_layer(self):
        nn = small_controller([np.zeros((2, 2)), np.ones((1, 2))])
        lo, hi = preactivation_bounds(nn, StateBox.symmetric([1.0, 1.0]))
        assert not np.any(lo) and not np.any(hi)

    def test_hand_interval(self):
        nn = small_controller([[[1.0, 1.0]], [[1.0]]])
        lo, hi = preactivation_bounds(nn, StateBox.symmetric([1.0, 1.0]))
        assert (lo[0], hi[0]) == (-2.0, 2.0)

    def test_contains_zero(self, rng):
        nn = random_controller(rng, [3, 4, 4, 1])
        lo, hi = preactivation_bounds(nn, StateBox([-1, -2, -0.5], [2, 1, 0.5]))
        assert np.all(lo <= 0) and np.all(hi >= 0)

    @pytest.mark.parametrize("sizes", [[2, 5, 1], [4, 10, 10, 1], [3, 4, 3, 5, 2]])
    def test_monte_carlo_soundness(self, rng, sizes):
        nn = random_controller(rng, sizes, scale=2.0)
        box = StateBox(-rng.uniform(0.5, 3, sizes[0]), rng.uniform(0.5, 3, sizes[0]))
        lo, hi = preactivation_bounds(nn, box)
        nu = forward(nn, box.sample(rng, 10_000))[1]
        assert np.all(nu >= lo - 1e-12) and np.all(nu <= hi + 1e-12)


class TestTanhSector:
    def test_symmetric_unit(self):
        alpha, beta = tanh_sector(-1.0, 1.0)
        assert alpha == pytest.approx(0.7615941559557649, abs=1e-12)
        assert beta == 1.0

    def test_degenerate(self):
        assert tanh_sector(0.0, 0.0) == (1.0, 1.0)

    def test_asymmetric_uses_larger_endpoint(self):
        alpha, _ = tanh_sector(-2.0, 1.0)
        assert alpha == pytest.approx(np.tanh(2.0) / 2.0)

    def test_interval_must_contain_zero(self):
        with pytest.raises(InvalidInterval):
            tanh_sector(0.5, 1.0)
        with pytest.raises(InvalidInterval):
            tanh_sector(-1.0, -0.1)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 8.0), st.floats(0.0, 8.0))
    def test_sector_inequality_on_grid(self, a, b):
        alpha, beta = tanh_sector(-a, b)
        v = np.linspace(-a, b, 2001)
        w = np.tanh(v)
        assert 0 < alpha <= beta == 1.0
        assert np.all((w - alpha * v) * (beta * v - w) >= -1e-12)

    def test_elementwise(self):
        alpha, beta = tanh_sector(np.array([-1.0, 0.0, -2.0]), np.array([1.0, 0.0, 1.0]))
        np.testing.assert_allclose(alpha, [np.tanh(1.0), 1.0, np.tanh(2.0) / 2])
        np.testing.assert_array_equal(beta, np.ones(3))


class TestStackedQC:
    def test_zero_multiplier(self):
        ctx = SectorContext(-np.ones(3), np.ones(3), np.full(3, 0.5), np.ones(3))
        assert not np.any(stacked_sector_qc(ctx, np.zeros(3)))

    def test_unit_case(self):
        ctx = SectorContext(-np.ones(1), np.ones(1), np.ones(1), np.ones(1))
        np.testing.assert_array_equal(stacked_sector_qc(ctx, [1.0]), [[-2.0, 2.0], [2.0, -2.0]])

    def test_negative_multiplier(self):
        ctx = SectorContext(-np.ones(2), np.ones(2), np.full(2, 0.5), np.ones(2))
        with pytest.raises(InvalidMultiplier):
            stacked_sector_qc(ctx, [1.0, -0.1])

    def test_nonnegative_on_samples(self, rng):
        lo, hi = -rng.uniform(0.1, 4, 5), rng.uniform(0.1, 4, 5)
        alpha, beta = tanh_sector(lo, hi)
        ctx = SectorContext(lo, hi, alpha, beta)
        M = stacked_sector_qc(ctx, rng.uniform(0, 3, 5))
        nu = rng.uniform(lo, hi, size=(10_000, 5))
        v = np.hstack([nu, np.tanh(nu)])
        assert np.min(np.einsum("ij,jk,ik->i", v, M, v)) >= -1e-10


class TestLoopTransform:
    def test_identity_sector_is_fixed_point(self, rng):
        nn = random_controller(rng, [3, 4, 5, 2])
        N = assemble_N(nn)
        Nt = loop_transform(N, SectorContext.identity(nn.n_phi))
        np.testing.assert_array_equal(Nt.full, N.full)

    def test_scalar_hand_computation(self):
        # one neuron, sector [0.5, 1]: d1 = 0.25, d2 = 0.75
        nn = small_controller([[[2.0]], [[3.0]]])
        ctx = SectorContext(np.array([-1.0]), np.array([1.0]), np.array([0.5]), np.array([1.0]))
        Nt = loop_transform(assemble_N(nn), ctx)
        np.testing.assert_allclose(Nt.full, [[3.0 * 0.75 * 2.0, 3.0 * 0.25], [2.0, 0.0]])

    @pytest.mark.parametrize("sizes", [[2, 4, 1], [4, 10, 10, 1], [3, 3, 4, 2, 2]])
    def test_behavioural_equivalence(self, rng, sizes):
        nn = random_controller(rng, sizes, scale=1.5)
        box = StateBox.symmetric(rng.uniform(0.5, 3, sizes[0]))
        ctx, Nt = transformed(nn, box)
        X = box.sample(rng, 1000)
        U, NU, OM = forward(nn, X)
        for x, u, nu, om in zip(X, U, NU, OM):
            out = transformed_outputs(Nt, ctx, x, nu, om)
            np.testing.assert_allclose(out, np.concatenate([u, nu]), atol=1e-10)

    def test_normalised_activation_in_unit_sector(self, rng):
        nn = random_controller(rng, [3, 6, 6, 1], scale=2.0)
        box = StateBox.symmetric([1.0, 2.0, 1.0])
        ctx = sector_context(nn, box)
        _, nu, om = forward(nn, box.sample(rng, 5000))
        z = normalized_activation(nu, om, ctx)
        # sector [-1, 1]: (z + nu)(nu - z) >= 0
        assert np.min((z + nu) * (nu - z)) >= -1e-10

    def test_c4_strictly_lower_triangular(self, rng):
        nn = random_controller(rng, [3, 4, 5, 6, 1])
        ctx = sector_context(nn, StateBox.symmetric([1.0, 1.0, 1.0]))
        C4 = assemble_N(nn).N_nuw * ctx.center
        assert not np.any(np.triu(C4))


class TestTransformDerivatives:
    def setup_problem(self, rng):
        nn = random_controller(rng, [3, 4, 5, 2], scale=1.2)
        ctx = sector_context(nn, StateBox.symmetric([1.0, 1.5, 0.5]))
        return assemble_N(nn), ctx, nn.layer_sizes

    def test_jvp_matches_fd(self, rng):
        N, ctx, _ = self.setup_problem(rng)
        dN = BlockMatrixN.from_full(rng.normal(size=N.full.shape), N.n_x, N.n_pi)
        h = 1e-6
        plus = loop_transform(BlockMatrixN.from_full(N.full + h * dN.full, N.n_x, N.n_pi), ctx).full
        minus = loop_transform(BlockMatrixN.from_full(N.full - h * dN.full, N.n_x, N.n_pi), ctx).full
        np.testing.assert_allclose(loop_transform_jvp(N, ctx, dN), (plus - minus) / (2 * h),
                                   rtol=1e-6, atol=1e-8)

    def test_vjp_is_adjoint_of_jvp(self, rng):
        N, ctx, _ = self.setup_problem(rng)
        dN = BlockMatrixN.from_full(rng.normal(size=N.full.shape), N.n_x, N.n_pi)
        G = rng.normal(size=N.full.shape)
        lhs = np.sum(G * loop_transform_jvp(N, ctx, dN))
        rhs = np.sum(loop_transform_vjp(N, ctx, G).full * dN.full)
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sector_context_round_trip(rng):
    nn = random_controller(rng, [2, 3, 1])
    ctx = sector_context(nn, StateBox.symmetric([1.0, 1.0]))
    back = SectorContext.from_dict(ctx.to_dict())
    np.testing.assert_array_equal(back.alpha, ctx.alpha)
    np.testing.assert_array_equal(back.nu_hi, ctx.nu_hi)
