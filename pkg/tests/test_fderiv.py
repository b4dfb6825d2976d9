"""Derivative estimator contracts: backward update, path update, signed measures."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import pfgrad
from pfgrad import oracle
from pfgrad.fderiv import (
    DegenerateBackwardRowError,
    PathScoreTable,
    SignedParticleMeasure,
    TBarTable,
    estimator_hooks,
    init_path_scores,
    init_tbar,
    update_path_scores,
    update_tbar,
    zeta_from_tbar,
    zeta_path,
)
from pfgrad.harness import simulate
from pfgrad.models import Theta
from pfgrad.smc import ParticleCloud, init_cloud
from pfgrad.testfns import IndicatorEq

from conftest import HMM_THETA


def random_tables(rng, model, theta, n, time=4):
    if model.n_states is not None:
        xp = rng.integers(0, model.n_states, n)
        xc = rng.integers(0, model.n_states, n)
    else:
        xp, xc = rng.normal(size=n), rng.normal(size=n)
    prev = ParticleCloud(time=time, particles=xp)
    cur = ParticleCloud(time=time + 1, particles=xc, ancestors=rng.integers(0, n, n))
    table = TBarTable(time=time, values=rng.normal(size=(n, theta.dim)))
    return prev, cur, table


class TestUpdateTbar:
    def test_zero_scores_propagate(self, theta_free_hmm):
        model, theta = theta_free_hmm
        rng = np.random.default_rng(0)
        prev, cur, _ = random_tables(rng, model, theta, 30)
        table = TBarTable(time=4, values=np.zeros((30, 2)))
        out = update_tbar(model, theta, prev, cur, 1, table)
        np.testing.assert_array_equal(out.values, np.zeros((30, 2)))

    def test_single_particle_collapse(self, sv_model):
        model, theta = sv_model
        prev = ParticleCloud(time=0, particles=np.array([0.3]))
        cur = ParticleCloud(time=1, particles=np.array([0.5]), ancestors=np.array([0]))
        start = init_tbar(model, theta, prev)
        out, weights = update_tbar(model, theta, prev, cur, 0.2, start, return_weights=True)
        expected = (
            start.values[0]
            + model.grad_log_observation(theta, 0.2, 0.3)
            + model.grad_log_transition(theta, 0.3, 0.5)
        )
        np.testing.assert_allclose(out.values[0], expected, atol=1e-14)
        np.testing.assert_array_equal(weights.matrix, [[1.0]])

    def test_grouped_equals_generic(self, hmm3):
        model, theta = hmm3
        rng = np.random.default_rng(3)
        prev, cur, table = random_tables(rng, model, theta, 60)
        a, wa = update_tbar(model, theta, prev, cur, 1, table, method="grouped", return_weights=True)
        b, wb = update_tbar(model, theta, prev, cur, 1, table, method="generic", return_weights=True)
        np.testing.assert_allclose(a.values, b.values, atol=1e-13)
        np.testing.assert_allclose(wa.matrix, wb.matrix, atol=1e-13)

    def test_rows_stochastic(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(4)
        prev, cur, table = random_tables(rng, model, theta, 80)
        _, weights = update_tbar(model, theta, prev, cur, 0.1, table, return_weights=True)
        np.testing.assert_allclose(weights.matrix.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(weights.matrix >= 0)

    def test_weights_invariant_to_logdensity_shifts(self, sv_model):
        model, theta = sv_model

        class Shifted(type(model)):
            def transition_logdensity(self, t, xp, xc):
                return super().transition_logdensity(t, xp, xc) + 2.5

            def transition_pair_terms(self, t, xp, xc):
                logq, grads = super().transition_pair_terms(t, xp, xc)
                return logq + 2.5, grads

            def observation_logdensity(self, t, y, x):
                return super().observation_logdensity(t, y, x) - 1.3

        rng = np.random.default_rng(5)
        prev, cur, table = random_tables(rng, model, theta, 50)
        _, w0 = update_tbar(model, theta, prev, cur, 0.3, table, return_weights=True)
        _, w1 = update_tbar(Shifted(), theta, prev, cur, 0.3, table, return_weights=True)
        np.testing.assert_allclose(w0.matrix, w1.matrix, atol=1e-12)

    def test_degenerate_row_raises_with_location(self, sv_model):
        model, theta = sv_model

        class Dead(type(model)):
            def transition_pair_terms(self, t, xp, xc):
                logq, grads = super().transition_pair_terms(t, xp, xc)
                return np.full_like(np.broadcast_to(logq, np.broadcast_shapes(np.shape(xp), np.shape(xc))), -np.inf), grads

        rng = np.random.default_rng(6)
        prev, cur, table = random_tables(rng, model, theta, 10)
        with pytest.raises(DegenerateBackwardRowError) as err:
            update_tbar(Dead(), theta, prev, cur, 0.3, table)
        assert err.value.time == 5 and err.value.row == 0

    def test_alignment_checks(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(7)
        prev, cur, table = random_tables(rng, model, theta, 10)
        with pytest.raises(ValueError):
            update_tbar(model, theta, prev, prev, 0.3, table)
        with pytest.raises(ValueError):
            update_tbar(model, theta, prev, cur, 0.3, TBarTable(time=9, values=table.values))

    def test_mean_matches_exact_conditional_expectation(self, hmm3):
        # eta-weighted mean of the table against the exact recursion,
        # within five standard errors over replications
        model, theta = hmm3
        _, ys = simulate(model, theta, 20, np.random.default_rng(555))
        state = oracle.exact_hmm_init(model, theta)
        for y in ys:
            state = oracle.exact_hmm_step(model, theta, state, y)
        truth = state.eta @ state.tbar
        reps, n = 100, 5000
        means = np.empty((reps, 2))
        for r, ss in enumerate(np.random.SeedSequence(77).spawn(reps)):
            rng = np.random.default_rng(ss)
            cloud = init_cloud(model, theta, n, rng)
            table = init_tbar(model, theta, cloud)
            for y in ys:
                cloud, table = pfgrad.fderiv.advance_backward(model, theta, cloud, table, y, rng)
            means[r] = table.values.mean(axis=0)
        se = means.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(means.mean(axis=0) - truth) < 5 * se)


class TestPathScores:
    def test_initialization_is_initial_score(self, sv_model):
        model, theta = sv_model
        cloud = init_cloud(model, theta, 40, np.random.default_rng(1))
        table = init_path_scores(model, theta, cloud)
        np.testing.assert_array_equal(
            table.values, pfgrad.score_increment(model, theta, 0, None, None, cloud.particles)
        )

    def test_zero_scores_resample_the_table(self, theta_free_hmm):
        model, theta = theta_free_hmm
        rng = np.random.default_rng(2)
        prev, cur, _ = random_tables(rng, model, theta, 25)
        table = PathScoreTable(time=4, values=rng.normal(size=(25, 2)))
        out = update_path_scores(model, theta, prev, cur, 1, table)
        np.testing.assert_array_equal(out.values, table.values[cur.ancestors])

    def test_missing_ancestors_rejected(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(3)
        prev, cur, _ = random_tables(rng, model, theta, 10)
        cur = ParticleCloud(time=cur.time, particles=cur.particles, ancestors=None)
        table = PathScoreTable(time=4, values=np.zeros((10, 3)))
        with pytest.raises(ValueError, match="ancestor"):
            update_path_scores(model, theta, prev, cur, 0.3, table)

    def test_both_estimators_consistent_at_time_one(self, hmm3):
        model, theta = hmm3
        _, ys = simulate(model, theta, 1, np.random.default_rng(556))
        state = oracle.exact_hmm_step(model, theta, oracle.exact_hmm_init(model, theta), ys[0])
        truth = oracle.exact_zeta_phi(state, IndicatorEq(0))
        reps, n = 60, 20_000
        vals = {"backward": np.empty((reps, 2)), "path": np.empty((reps, 2))}
        for name in vals:
            init_table, advance, zeta_of = estimator_hooks(name)
            for r, ss in enumerate(np.random.SeedSequence(99).spawn(reps)):
                rng = np.random.default_rng(ss)
                cloud = init_cloud(model, theta, n, rng)
                table = init_table(model, theta, cloud)
                cloud, table = advance(model, theta, cloud, table, ys[0], rng)
                vals[name][r] = zeta_of(cloud, table).evaluate(IndicatorEq(0))
        for name, arr in vals.items():
            se = arr.std(axis=0, ddof=1) / np.sqrt(reps)
            assert np.all(np.abs(arr.mean(axis=0) - truth) < 5 * se), name
        gap = np.abs(vals["backward"].mean(axis=0) - vals["path"].mean(axis=0))
        pooled = np.sqrt(vals["backward"].var(axis=0, ddof=1) / reps + vals["path"].var(axis=0, ddof=1) / reps)
        assert np.all(gap < 5 * pooled)


class TestSignedMeasure:
    def test_centering_and_constants(self, hmm3):
        model, theta = hmm3
        rng = np.random.default_rng(4)
        cloud = init_cloud(model, theta, 200, rng)
        table = TBarTable(time=0, values=rng.normal(size=(200, 2)))
        zeta = zeta_from_tbar(cloud, table)
        np.testing.assert_allclose(zeta.evaluate(lambda x: np.ones_like(x, dtype=float)), 0.0, atol=1e-12)
        np.testing.assert_allclose(zeta.total_mass(), 0.0, atol=1e-12)

    def test_identical_table_rows_give_zero_measure(self, hmm3):
        model, theta = hmm3
        cloud = init_cloud(model, theta, 50, np.random.default_rng(5))
        table = TBarTable(time=0, values=np.tile([1.5, -2.0], (50, 1)))
        zeta = zeta_from_tbar(cloud, table)
        np.testing.assert_array_equal(zeta.signed_weights, 0.0)

    def test_exact_value_at_moderate_horizon(self, hmm3):
        model, theta = hmm3
        _, ys = simulate(model, theta, 20, np.random.default_rng(555))
        state = oracle.exact_hmm_init(model, theta)
        for y in ys:
            state = oracle.exact_hmm_step(model, theta, state, y)
        truth = oracle.exact_zeta_phi(state, IndicatorEq(0))
        reps, n = 100, 5000
        vals = np.empty((reps, 2))
        for r, ss in enumerate(np.random.SeedSequence(78).spawn(reps)):
            rng = np.random.default_rng(ss)
            cloud = init_cloud(model, theta, n, rng)
            table = init_tbar(model, theta, cloud)
            for y in ys:
                cloud, table = pfgrad.fderiv.advance_backward(model, theta, cloud, table, y, rng)
            vals[r] = zeta_from_tbar(cloud, table).evaluate(IndicatorEq(0))
        se = vals.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(vals.mean(axis=0) - truth) < 5 * se)

    @given(
        hnp.arrays(np.float64, (17, 2), elements=st.floats(-50, 50)),
        st.floats(-3, 3),
        st.floats(-5, 5),
    )
    @settings(max_examples=50, deadline=None)
    def test_affine_equivariance(self, values, a, c):
        particles = np.linspace(-1, 1, 17)
        cloud = ParticleCloud(time=0, particles=particles)
        zeta = zeta_from_tbar(cloud, TBarTable(time=0, values=values))

        def phi(x):
            return np.sin(3 * np.asarray(x, dtype=float))

        lhs = zeta.evaluate(lambda x: a * phi(x) + c)
        rhs = a * zeta.evaluate(phi)
        scale = max(1.0, np.abs(values).max() * (abs(a) + abs(c)))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * scale)

    def test_zeta_path_mirrors_zeta_from_tbar(self, sv_model):
        model, theta = sv_model
        cloud = init_cloud(model, theta, 30, np.random.default_rng(6))
        values = np.random.default_rng(7).normal(size=(30, 3))
        a = zeta_from_tbar(cloud, TBarTable(time=0, values=values))
        b = zeta_path(cloud, PathScoreTable(time=0, values=values))
        np.testing.assert_array_equal(a.signed_weights, b.signed_weights)


def test_backward_fixed_point_of_exact_recursion(hmm3):
    model, theta = hmm3
    _, ys = simulate(model, theta, 30, np.random.default_rng(31))
    assert oracle.backward_fixed_point_gap(model, theta, ys) < 1e-12


def test_derivative_error_decays_at_root_n(rate_curve):
    fit = rate_curve.zeta_fit
    assert fit is not None
    assert -0.6 <= fit.slope <= -0.4
