from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conftest import random_instance
from hybrid_pdp import (
    ClassicalHistory,
    FluorescenceParams,
    PureHybridState,
    build_fluorescence,
    build_model,
    build_telegraph,
    closed_form_propagator,
    discriminate_initial_state,
    next_jump_distribution,
    photon_count_probs,
    waiting_time_density,
)
from hybrid_pdp.applications import (
    GROUND,
    count_curves,
    default_mesh_step,
    laplace_identity_check,
    no_count_probability,
    reconstruct_chain,
    telegraph_occupation,
)
from hybrid_pdp.engine import jump_distribution
from hybrid_pdp.errors import InconsistentHistoryError, PreconditionError, ValidationError

seeds = st.integers(0, 2**32 - 1)
A = np.array([[0, 0], [1, 0]], dtype=complex)
EXCITED = np.array([1, 0], dtype=complex)
TIMES = (0.1, 0.5, 1.0, 2.0, 5.0)


class TestTelegraph:
    def test_closed_form_instance(self):
        p1, p2 = telegraph_occupation(1.0, math.log(2) / 2)
        assert p1 == pytest.approx(0.75, abs=1e-15) and p2 == pytest.approx(0.25, abs=1e-15)

    def test_initial_and_total(self):
        for lam in (0.1, 1.0, 7.0):
            t = np.linspace(0, 3, 31)
            p1, p2 = telegraph_occupation(lam, t)
            assert p1[0] == 1.0
            assert np.abs(p1 + p2 - 1).max() <= 1e-15

    def test_rejects_nonpositive_rate(self):
        with pytest.raises(ValidationError):
            build_telegraph(0.0)


class TestFluorescenceModel:
    def test_rates(self, fluorescence):
        for n in (0, 3, 17):
            assert np.allclose(fluorescence.jump_operator(n), np.diag([1.0, 0.0]), atol=1e-15)

    def test_every_jump_resets_and_counts(self, fluorescence):
        rng = np.random.default_rng(0)
        for n in (0, 2, 9):
            v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            d = jump_distribution(fluorescence, PureHybridState.normalized(n, v))
            assert d[n + 1] == 1.0 and d.sum() == 1.0

    def test_propagator_matches_expm(self, fluo_params):
        K = -1j * fluo_params.effective_hamiltonian()
        for t in TIMES:
            assert np.abs(scipy.linalg.expm(t * K) - closed_form_propagator(fluo_params, t)).max() <= 1e-8

    def test_oscillation_frequency(self):
        # the closed form is a propagator only with this frequency
        p = FluorescenceParams(1.0, 2.0)
        assert p.mu == pytest.approx(0.5 * math.sqrt(3.75), rel=1e-15)

    def test_truncated_chain(self, fluo_params):
        m = build_fluorescence(fluo_params, n_max=4)
        assert m.n_sectors == 5 and m.outgoing(4) == ()

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            FluorescenceParams(-1.0, 1.0)
        with pytest.raises(ValidationError):
            build_fluorescence(FluorescenceParams(0.0, 1.0))
        with pytest.raises(PreconditionError):
            closed_form_propagator(FluorescenceParams(4.0, 1.0), 1.0)


class TestClosedFormPropagator:
    def test_identity_at_zero(self, fluo_params):
        assert np.allclose(closed_form_propagator(fluo_params, 0.0), np.eye(2), atol=1e-15)

    def test_undamped_is_unitary(self):
        p = FluorescenceParams(0.0, 1.3)
        for t in (0.2, 1.0, 40.0):
            U = closed_form_propagator(p, t)
            assert np.abs(U.conj().T @ U - np.eye(2)).max() <= 1e-13

    def test_vectorised(self, fluo_params):
        Us = closed_form_propagator(fluo_params, np.array(TIMES))
        assert Us.shape == (5, 2, 2)
        assert np.array_equal(Us[2], closed_form_propagator(fluo_params, 1.0))


class TestWaitingTimeDensity:
    def test_zeros(self, fluo_params):
        for k in (1, 2, 3):
            assert waiting_time_density(fluo_params, k * math.pi / fluo_params.mu) <= 1e-15

    def test_normalised(self, fluo_params):
        total, _ = integrate.quad(lambda t: waiting_time_density(fluo_params, t), 0, math.inf,
                                  epsabs=1e-12, limit=500)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_is_minus_derivative_of_survival(self, fluo_params):
        h = 1e-5
        for t in (0.3, 1.1, 2.7, 6.0):
            fd = -(no_count_probability(fluo_params, t + h) - no_count_probability(fluo_params, t - h)) / (2 * h)
            assert abs(fd - waiting_time_density(fluo_params, t)) <= 1e-8

    def test_explicit_formula(self):
        # f = gamma Omega^2 / (4 mu^2) sin^2(mu t) exp(-gamma t / 2)
        for g, om in ((1.0, 2.0), (0.5, 3.0), (2.0, 1.5)):
            p = FluorescenceParams(g, om)
            t = np.linspace(0, 8, 33)
            ref = g * om**2 / (4 * p.mu**2) * np.sin(p.mu * t) ** 2 * np.exp(-g * t / 2)
            assert np.abs(waiting_time_density(p, t) - ref).max() <= 1e-13

    def test_overdamped_falls_back_to_expm(self):
        p = FluorescenceParams(4.0, 1.0)
        total, _ = integrate.quad(lambda t: waiting_time_density(p, t), 0, math.inf, limit=500)
        assert total == pytest.approx(1.0, abs=1e-6)


class TestPhotonCounts:
    def test_zero_count_term(self, fluo_params):
        for t in (0.5, 3.0):
            p = photon_count_probs(fluo_params, t, 3)
            assert p[0] == pytest.approx(float(no_count_probability(fluo_params, t)), abs=1e-12)

    def test_one_count_is_convolution(self, fluo_params):
        t = 3.0
        ref, _ = integrate.quad(
            lambda s: float(no_count_probability(fluo_params, t - s)) * waiting_time_density(fluo_params, s),
            0, t, epsabs=1e-12, limit=200)
        assert photon_count_probs(fluo_params, t, 1)[1] == pytest.approx(ref, abs=1e-6)

    def test_complete(self, fluo_params):
        for t in (1.0, 3.0, 5.0):
            assert photon_count_probs(fluo_params, t, 15).sum() == pytest.approx(1.0, abs=1e-5)

    def test_zero_time(self, fluo_params):
        assert photon_count_probs(fluo_params, 0.0, 3).tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_mesh_step(self, fluo_params):
        assert default_mesh_step(fluo_params) == pytest.approx(min(0.01, math.pi / (20 * fluo_params.mu)))
        mesh, curves = count_curves(fluo_params, 2.0, 2, 0.3)
        assert mesh[-1] == 2.0 and curves.shape == (3, len(mesh))


class TestLaplaceIdentity:
    def test_zero_count(self, fluo_params):
        assert laplace_identity_check(fluo_params, [0.5, 2.0], n_values=(0,)) == 0.0

    def test_low_orders(self, fluo_params):
        assert laplace_identity_check(fluo_params, [0.5, 1.0, 2.0], n_values=(1,)) <= 1e-5
        assert laplace_identity_check(fluo_params, [0.5, 1.0, 2.0], n_values=(1, 2, 3)) <= 1e-5

    def test_mesh_refinement(self, fluo_params):
        devs = [laplace_identity_check(fluo_params, [1.0], h=h) for h in (0.04, 0.02, 0.01)]
        assert devs[0] >= 3 * devs[1] and devs[1] >= 3 * devs[2]


def _two_channel():
    return build_model([np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))],
                       {(1, 0): A, (2, 0): math.sqrt(2) * A})


class TestNextJump:
    def test_fluorescence(self, fluorescence, ground):
        hist = ClassicalHistory((0.0, 1.3, 2.0), (0, 1, 2))
        d = next_jump_distribution(fluorescence, ground, hist)
        assert d[3] == pytest.approx(1.0, abs=1e-6)
        assert np.abs(np.delete(d, 3)).max() == 0.0

    def test_telegraph(self, telegraph):
        d = next_jump_distribution(telegraph, PureHybridState(0, np.array([1.0 + 0j])),
                                   ClassicalHistory((0.0,), (0,)))
        assert d[1] == pytest.approx(1.0, abs=1e-6) and d[0] == 0.0

    def test_two_channel_branching(self):
        d = next_jump_distribution(_two_channel(), PureHybridState(0, EXCITED), ClassicalHistory((0.0,), (0,)))
        assert np.allclose(d, [0, 1 / 3, 2 / 3], atol=1e-7)

    def test_conditioning_on_elapsed_time(self):
        # a dark component survives forever, so waiting without a jump lowers the total
        m = build_model([np.zeros((2, 2)), np.zeros((2, 2))], {(1, 0): A})
        x = PureHybridState.normalized(0, [1.0, 1.0])
        hist = ClassicalHistory((0.0,), (0,))
        assert next_jump_distribution(m, x, hist)[1] == pytest.approx(0.5, abs=1e-7)
        later = next_jump_distribution(m, x, hist, t=2.0)[1]
        assert later == pytest.approx(math.exp(-2) / (math.exp(-2) + 1), abs=1e-7)
        with pytest.raises(PreconditionError):
            next_jump_distribution(m, x, ClassicalHistory((0.0, 1.0), (0, 1)), t=0.5)

    @given(seeds)
    @settings(max_examples=20)
    def test_subprobability(self, seed):
        m, x = random_instance(seed)
        d = next_jump_distribution(m, x, ClassicalHistory((0.0,), (x.sector,)))
        assert np.all(d >= 0) and d.sum() <= 1 + 1e-9


class TestHistories:
    def test_validation(self):
        with pytest.raises(ValidationError):
            ClassicalHistory((0.0, 1.0, 1.0), (0, 1, 2))
        with pytest.raises(ValidationError):
            ClassicalHistory((0.5,), (0,))
        assert ClassicalHistory.from_pairs([(0.0, 0), (1.0, 1)]).sectors == (0, 1)

    def test_impossible_history(self, fluorescence, ground):
        with pytest.raises(InconsistentHistoryError):
            reconstruct_chain(fluorescence, ground, ClassicalHistory((0.0, 1.0), (0, 2)))
        with pytest.raises(InconsistentHistoryError):
            reconstruct_chain(fluorescence, ground, ClassicalHistory((0.0,), (1,)))


class TestDiscrimination:
    def test_single_candidate(self, fluorescence, ground):
        s = discriminate_initial_state(fluorescence, [ground], ClassicalHistory((0.0, 0.7), (0, 1)))
        assert s.tolist() == [1.0]

    def test_impossible_observation(self):
        # only the excited candidate can reach sector 1
        m = build_model([np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))],
                        {(1, 0): A, (2, 0): np.array([[0, 1], [0, 0]], dtype=complex)})
        cands = [PureHybridState(0, EXCITED), PureHybridState(0, GROUND)]
        s = discriminate_initial_state(m, cands, ClassicalHistory((0.0, 0.4), (0, 1)))
        assert s.tolist() == [1.0, 0.0]

    def test_early_click_favours_excited(self, fluorescence, ground):
        cands = [PureHybridState(0, EXCITED), ground]
        s = discriminate_initial_state(fluorescence, cands, ClassicalHistory((0.0, 0.1), (0, 1)))
        assert s[0] > s[1]
        assert s.sum() == pytest.approx(1.0)

    def test_all_impossible(self, fluorescence, ground):
        with pytest.raises(InconsistentHistoryError):
            discriminate_initial_state(fluorescence, [ground], ClassicalHistory((0.0, 0.5), (0, 3)))
