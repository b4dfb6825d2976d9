"""Online estimation contracts: schedules, increments, ascent steps, batch gradient."""

import numpy as np
import pytest

import pfgrad
from pfgrad import oracle
from pfgrad.fderiv import estimator_hooks, zeta_from_tbar
from pfgrad.harness import simulate
from pfgrad.models import Theta
from pfgrad.rml import (
    ClampBox,
    PredictiveLikelihoodCollapseError,
    StepSizeSchedule,
    default_clamp,
    exact_rml_step,
    init_exact_rml,
    init_rml,
    iter_increments,
    offline_gradient,
    rml_step,
    score_increment_estimate,
)
from pfgrad.smc import init_cloud

from conftest import AR_THETA, HMM_THETA


class TestStepSizeSchedule:
    def test_constant_allows_frozen_runs(self):
        assert StepSizeSchedule.constant(0.0).gamma(5) == 0.0
        assert StepSizeSchedule.constant(1e-4).gamma(10**6) == 1e-4
        with pytest.raises(ValueError):
            StepSizeSchedule.constant(-0.1)

    def test_flat_then_decay_reference_configuration(self):
        sched = StepSizeSchedule.flat_then_decay(0.01, 100_000, 50_000, 0.6)
        assert sched.gamma(0) == 0.01
        assert sched.gamma(100_000) == 0.01
        assert sched.gamma(100_001) == pytest.approx((100_001 - 50_000) ** -0.6)
        assert sched.gamma(200_000) == pytest.approx((150_000) ** -0.6)

    def test_decay_exponent_must_be_summable(self):
        with pytest.raises(ValueError):
            StepSizeSchedule.flat_then_decay(0.01, 100, 50, 0.5)
        with pytest.raises(ValueError):
            StepSizeSchedule.flat_then_decay(0.01, 100, 50, 1.1)
        with pytest.raises(ValueError):
            StepSizeSchedule.flat_then_decay(0.01, 100, 200, 0.6)

    def test_table_repeats_last_entry(self):
        sched = StepSizeSchedule.from_table([0.3, 0.2, 0.1])
        assert sched.gamma(0) == 0.3 and sched.gamma(2) == 0.1 and sched.gamma(99) == 0.1
        with pytest.raises(ValueError):
            StepSizeSchedule.from_table([0.3, 0.0])

    def test_parse_round_trip(self):
        for spec in ("constant:0.0001", "flat-then-decay:0.01,100000,50000,0.6", "table:0.3,0.2"):
            sched = StepSizeSchedule.parse(spec)
            again = StepSizeSchedule.parse(sched.spec_string())
            assert sched == again
        with pytest.raises(ValueError):
            StepSizeSchedule.parse("bogus:1")


class TestClamp:
    def test_defaults_keep_domain_open(self, sv_model):
        model, _ = sv_model
        box = default_clamp(model)
        vals, hit = box.clamp(np.array([2.0, -1.0, 5.0]))
        assert hit
        model.check_theta(Theta(vals, AR_THETA.names))

    def test_no_change_inside_box(self):
        box = ClampBox(lo=np.array([-1.0]), hi=np.array([1.0]))
        vals, hit = box.clamp(np.array([0.3]))
        assert not hit and vals[0] == 0.3


class TestScoreIncrementEstimate:
    def test_zero_when_nothing_depends_on_theta(self, theta_free_hmm):
        model, theta = theta_free_hmm
        rng = np.random.default_rng(0)
        cloud = init_cloud(model, theta, 100, rng)
        table = pfgrad.init_tbar(model, theta, cloud)
        inc = score_increment_estimate(model, theta, cloud, zeta_from_tbar(cloud, table), 1)
        np.testing.assert_array_equal(inc, 0.0)

    def test_collapse_raises(self, hmm3):
        model, theta = hmm3

        class Dead(type(model)):
            def observation_logdensity(self, t, y, x):
                return np.full(np.shape(x), -np.inf)

        dead = Dead(3)
        cloud = init_cloud(dead, theta, 50, np.random.default_rng(1))
        table = pfgrad.init_tbar(dead, theta, cloud)
        with pytest.raises(PredictiveLikelihoodCollapseError):
            score_increment_estimate(dead, theta, cloud, zeta_from_tbar(cloud, table), 0)

    def test_invariant_to_particle_relabeling(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(2)
        cloud = init_cloud(model, theta, 400, rng)
        table = pfgrad.init_tbar(model, theta, cloud)
        inc = score_increment_estimate(model, theta, cloud, zeta_from_tbar(cloud, table), 0.4)
        perm = np.random.default_rng(3).permutation(400)
        cloud_p = pfgrad.ParticleCloud(time=0, particles=cloud.particles[perm])
        table_p = pfgrad.TBarTable(time=0, values=table.values[perm])
        inc_p = score_increment_estimate(model, theta, cloud_p, zeta_from_tbar(cloud_p, table_p), 0.4)
        np.testing.assert_allclose(inc, inc_p, rtol=1e-12)


class TestRmlStep:
    def test_zero_step_freezes_theta_but_advances_state(self, hmm3):
        model, theta = hmm3
        rng = np.random.default_rng(4)
        state = init_rml(model, theta, 100, rng)
        sched = StepSizeSchedule.constant(0.0)
        for y in [0, 1, 2]:
            state = rml_step(model, state, y, sched, rng)
        np.testing.assert_array_equal(state.theta.values, theta.values)
        assert state.n_seen == 3 and state.time == 2 and state.prev_y == 2

    def test_theta_stays_in_domain_under_huge_steps(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(5)
        _, ys = simulate(model, theta, 30, rng)
        state = init_rml(model, theta, 64, rng)
        sched = StepSizeSchedule.constant(50.0)  # absurd on purpose
        for y in ys:
            state = rml_step(model, state, y, sched, rng)
            model.check_theta(state.theta)
        assert state.clamp_events > 0

    def test_path_estimator_variant_runs(self, sv_model):
        model, theta = sv_model
        rng = np.random.default_rng(6)
        _, ys = simulate(model, theta, 20, rng)
        state = init_rml(model, theta, 64, rng, estimator="path")
        for y in ys:
            state = rml_step(model, state, y, StepSizeSchedule.constant(1e-3), rng)
        assert state.n_seen == 20
        assert np.all(np.isfinite(state.theta.values))


class TestOfflineGradient:
    def test_single_observation_uses_initial_terms_only(self, hmm3):
        model, theta = hmm3
        rng = np.random.default_rng(7)
        grad = offline_gradient(model, theta, [1], 4000, rng)
        # uniform initial law: the derivative measure is zero at time 0, so
        # the increment reduces to the cloud-averaged observation gradient
        state = oracle.exact_hmm_init(model, theta)
        truth = oracle.exact_score_increment(model, theta, state, 1)
        assert grad.shape == (2,)
        np.testing.assert_allclose(grad, truth, atol=0.05)
        with pytest.raises(ValueError):
            offline_gradient(model, theta, [], 100, rng)

    def test_matches_exact_evidence_gradient_hmm(self, hmm3):
        model, theta = hmm3
        _, ys = simulate(model, theta, 10, np.random.default_rng(8))
        truth, _, _ = oracle.exact_hmm_score(model, theta, ys)
        reps = 40
        grads = np.empty((reps, 2))
        for r, ss in enumerate(np.random.SeedSequence(123).spawn(reps)):
            grads[r] = offline_gradient(model, theta, ys, 2000, np.random.default_rng(ss))
        se = grads.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(grads.mean(axis=0) - truth) < 5 * se)

    def test_matches_tangent_kalman_lgssm(self, lgssm_model):
        model, theta = lgssm_model
        _, ys = simulate(model, theta, 8, np.random.default_rng(9))
        truth, _, _ = oracle.tangent_kalman_score(model, theta, ys)
        reps = 40
        grads = np.empty((reps, 3))
        for r, ss in enumerate(np.random.SeedSequence(124).spawn(reps)):
            grads[r] = offline_gradient(model, theta, ys, 1500, np.random.default_rng(ss))
        se = grads.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(grads.mean(axis=0) - truth) < 5 * se)

    def test_increment_stream_sums_to_gradient(self, hmm3):
        model, theta = hmm3
        _, ys = simulate(model, theta, 6, np.random.default_rng(10))
        a = offline_gradient(model, theta, ys, 500, np.random.default_rng(42))
        b = np.sum(list(iter_increments(model, theta, ys, 500, np.random.default_rng(42))), axis=0)
        np.testing.assert_allclose(a, b, atol=1e-13)


class TestExactRml:
    def test_particle_run_tracks_exact_run(self, hmm3):
        # soft statistical bound: the particle trajectory stays within ten
        # times the exact trajectory's own path length
        model, theta = hmm3
        _, ys = simulate(model, theta, 1000, np.random.default_rng(13))
        sched = StepSizeSchedule.constant(0.05)
        theta0 = theta.replace(np.array([0.3, 0.6]))
        exact = init_exact_rml(model, theta0)
        rng = np.random.default_rng(14)
        particle = init_rml(model, theta0, 5000, rng)
        deviation, path_len = 0.0, 0.0
        prev = theta0.values.copy()
        for y in ys:
            exact = exact_rml_step(model, exact, y, sched)
            particle = rml_step(model, particle, y, sched, rng)
            path_len += np.abs(exact.theta.values - prev).max()
            prev = exact.theta.values.copy()
            deviation = max(deviation, np.abs(exact.theta.values - particle.theta.values).max())
        assert deviation < 10 * path_len

    def test_exact_run_recovers_generating_parameter(self, hmm3):
        model, theta = hmm3
        _, ys = simulate(model, theta, 30_000, np.random.default_rng(88))
        sched = StepSizeSchedule.flat_then_decay(0.2, 5000, 2500, 0.6)
        state = init_exact_rml(model, theta.replace(np.array([0.0, 0.3])))
        tail = np.empty((1000, 2))
        for k, y in enumerate(ys):
            state = exact_rml_step(model, state, y, sched)
            if k >= len(ys) - 1000:
                tail[k - (len(ys) - 1000)] = state.theta.values
        converged = tail.mean(axis=0)
        assert np.all(np.abs(converged - theta.values) < 0.05)
