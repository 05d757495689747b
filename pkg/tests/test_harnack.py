import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidekit.grid import Grid, GridFunction, Mask
from slidekit.operators import EllipticityParams, PreconditionError
from slidekit.harnack import (
    Ball,
    barrier_check,
    barrier_derivatives,
    covering_step,
    decay_iteration,
    derive_constants,
    dyadic_ball_family,
    holder_decay,
    truncate,
    verify_density,
    verify_measure_lemma,
    weak_harnack,
    weak_Leps,
)

from conftest import sample

P1 = EllipticityParams(1.0, 1.0)
DC = derive_constants(2, P1)


def _params(rho):
    return EllipticityParams(1.0, 1.0, rho=rho)


# --- constants -------------------------------------------------------------


def test_constants_closed_forms():
    assert (DC.Gamma, DC.rho0, DC.p, DC.C0) == (3.0, 24.0, 3, 7 / 3)
    assert DC.M == 129
    assert DC.mu == pytest.approx((128 / 1032) ** 2 / 16, rel=1e-14)
    assert DC.theta == pytest.approx(DC.mu / 25, rel=1e-15)
    assert DC.eps0 == DC.eps / 2
    assert DC.sigma_source == "empirical"


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(0.1, 2), extra=st.floats(0, 3), dLam=st.floats(0.01, 2), b0=st.floats(0, 1), n=st.integers(1, 3))
def test_constants_monotone_and_bounded(lam, extra, dLam, b0, n):
    Lam = lam + extra
    a = derive_constants(n, EllipticityParams(lam, Lam, b0))
    b = derive_constants(n, EllipticityParams(lam, Lam + dLam, b0))
    c = derive_constants(n, EllipticityParams(lam * 1.5, Lam * 1.5, b0))
    assert b.Gamma >= a.Gamma
    assert 0 < a.mu <= 4.0**-n
    assert 0 < a.eps0 < a.eps
    assert a.p * lam >= 2 * (n - 1) * Lam + 4 * b0 + 1 - 1e-9
    # Gamma decreases when lam grows with the numerator held fixed
    fixed = derive_constants(n, EllipticityParams(lam * 1.5, Lam, b0)) if Lam >= lam * 1.5 else None
    if fixed is not None:
        assert fixed.Gamma < a.Gamma
    assert c.Gamma > 0


def test_constants_reject_dimension():
    with pytest.raises(ValueError):
        derive_constants(4, P1)


# --- barrier ---------------------------------------------------------------


def test_barrier_eigenvalues_at_unit_radius():
    _, H, t = barrier_derivatives(np.array([[0.5, 0.0]]), np.zeros(2), 0.5, 1.0, 3, np.zeros(2))
    assert t[0] == pytest.approx(1.0)
    assert np.allclose(np.linalg.eigvalsh(H[0]), [-2.0, 3.0], atol=1e-12)


@pytest.mark.parametrize("t", [0.5, 0.6, 0.8, 0.99])
def test_barrier_one_positive_direction(t):
    _, H, _ = barrier_derivatives(np.array([[0.5 * t, 0.0]]), np.zeros(2), 0.5, 1.0, 3, np.zeros(2))
    ev = np.linalg.eigvalsh(H[0])
    assert np.count_nonzero(ev > 0) == 1
    assert ev[-1] == pytest.approx(4 * t**-5 - 1)


def test_barrier_gradient_matches_finite_differences():
    x0, y1 = np.array([0.1, -0.2]), np.array([0.3, 0.1])
    x = np.array([[0.4, -0.1]])
    g, H, _ = barrier_derivatives(x, x0, 0.5, 2.0, 3, y1)
    d = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = d
        gp, _, _ = barrier_derivatives(x + e, x0, 0.5, 2.0, 3, y1)
        gm, _, _ = barrier_derivatives(x - e, x0, 0.5, 2.0, 3, y1)
        assert np.allclose((gp - gm)[0] / (2 * d), H[0][:, i], atol=1e-5)


def test_barrier_check_passes_and_records_chain():
    rep = barrier_check(np.zeros(2), 0.5, 1.0, DC, P1, samples=2000, seed=3)
    assert rep.verdict == "pass"
    assert rep.details["chain_violations"] == 0
    assert rep.series[0]["t"] == pytest.approx(1.0, abs=1e-15) and rep.series[0]["lhs"] == pytest.approx(1.0)
    assert rep.series[1]["t"] == pytest.approx(0.5, abs=1e-15) and rep.series[1]["lhs"] >= 32.0


def test_barrier_check_fails_with_small_exponent():
    weak = derive_constants(2, P1)
    weak = type(weak)(**{**weak.to_dict(), "p": 1})
    assert barrier_check(np.zeros(2), 0.5, 1.0, weak, P1, samples=500).verdict == "fail"


def test_barrier_check_preconditions():
    with pytest.raises(PreconditionError):
        barrier_check(np.array([0.8, 0.0]), 0.5, 1.0, DC, P1)
    with pytest.raises(PreconditionError):
        barrier_check(np.zeros(2), 0.5, 0.0, DC, P1)


# --- measure lemma and density --------------------------------------------


def test_measure_lemma_zero_function():
    g = Grid(2, 129)
    u = GridFunction(g, np.zeros(g.shape))
    rep = verify_measure_lemma(u, 1.0, g.ball(0.25), DC, _params(3.0))
    assert rep.verdict == "pass" and rep.details["ratio"] == 1.0


def test_measure_lemma_equality_case():
    g = Grid(2, 257)
    u = sample(g, lambda x: 1.5 * np.sum(x * x, axis=-1))  # b = Gamma a
    rep = verify_measure_lemma(u, 1.0, g.ball(0.25), DC, _params(3.0))
    assert rep.verdict == "pass"
    assert rep.details["ratio"] == pytest.approx(1 / 16, abs=10 * g.h)


@pytest.mark.parametrize("b", [0.0, 1.5, 3.0])
@pytest.mark.parametrize("z0,ell", [((0.0, 0.0), (0.0, 0.0)), ((0.2, -0.1), (0.25, 0.0)), ((-0.1, 0.2), (-0.1, 0.2))])
def test_measure_lemma_family(b, z0, ell):
    g = Grid(2, 129)
    z0, ell = np.array(z0), np.array(ell)
    u = sample(g, lambda x: 0.5 * b * np.sum((x - z0) ** 2, axis=-1) + x @ ell + 0.3)
    rep = verify_measure_lemma(u, 1.0, g.ball(0.25), DC, _params(3.0))
    assert rep.verdict == "pass", rep.to_dict()


def test_measure_lemma_gates():
    g = Grid(2, 65)
    u = GridFunction(g, np.zeros(g.shape))
    big_f = GridFunction(g, np.full(g.shape, 2.0))
    rep = verify_measure_lemma(u, 1.0, g.ball(0.25), DC, _params(3.0), big_f)
    assert rep.verdict == "vacuous" and rep.hypotheses["rhs_below_opening"] is False
    rep = verify_measure_lemma(u, 1.0, g.ball(0.25), DC, _params(1.0))
    assert rep.verdict == "vacuous" and rep.hypotheses["opening_below_range"] is False
    assert rep.hypotheses["pucci_class"] == "not checked"


def test_density_zero_function():
    g = Grid(2, 129)
    rep = verify_density(GridFunction(g, np.zeros(g.shape)), DC, _params(3.0))
    assert rep.verdict == "pass"
    assert rep.details["touch_ratio"] >= 4.0**-2 * (1 - 10 * g.h)


def test_density_paraboloid():
    g = Grid(2, 129)
    u = sample(g, lambda x: 0.5 * np.sum(x * x, axis=-1))
    f = GridFunction(g, np.full(g.shape, 2.0))
    rep = verify_density(u, DC, _params(3.0), f)
    assert rep.verdict == "pass"
    assert rep.details["touch_ratio"] == pytest.approx((8 / 9) ** 2 / 16, abs=10 * g.h)


def test_density_gate_on_large_infimum():
    g = Grid(2, 65)
    u = GridFunction(g, np.full(g.shape, 1.5))
    rep = verify_density(u, DC, _params(3.0))
    assert rep.verdict == "vacuous" and rep.hypotheses["inf_quarter_ball_at_most_1"] is False


# --- covering --------------------------------------------------------------


def test_dyadic_family_fits_in_unit_ball():
    g = Grid(2, 65)
    fam = dyadic_ball_family(g)
    assert Ball((0.0, 0.0), 1.0) in fam
    assert all(np.linalg.norm(b.center) + b.radius <= 1 + 1e-12 for b in fam)
    assert min(b.radius for b in fam) >= 4 * g.h


def test_covering_trivial_and_balls():
    g = Grid(2, 129)
    B = g.ball(1.0)
    rep = covering_step(B, B, 0.1)
    assert rep.verdict == "pass" and rep.lhs == 0.0 and rep.rhs == 0.0
    E, F = g.ball(0.125), g.ball(0.5)
    rep = covering_step(E, F, 0.05)
    assert rep.hypotheses["family_density"] is True
    assert rep.verdict == "pass"
    assert rep.lhs <= (1 - 0.05 / 25) * (B - E).measure


def test_covering_gate_when_density_fails():
    g = Grid(2, 65)
    r = np.random.default_rng(0)
    E = g.ball(0.1)
    F = E | Mask(g, (r.random(g.shape) < 0.02) & g.ball(1.0).members)
    rep = covering_step(E, F, 0.5)
    assert rep.verdict == "vacuous"
    assert rep.details["conclusion_asserted"] is False


def test_covering_preconditions():
    g = Grid(2, 33)
    with pytest.raises(PreconditionError):
        covering_step(g.empty(), g.ball(1.0), 0.1)
    with pytest.raises(PreconditionError):
        covering_step(g.ball(0.5), g.ball(0.25), 0.1)


# --- decay iteration -------------------------------------------------------


def test_decay_zero_function_leaves_thin_annulus():
    g = Grid(2, 129)
    rho = DC.rho0 * DC.M
    rep = decay_iteration(GridFunction(g, np.zeros(g.shape)), DC, _params(rho), kmax=1)
    assert rep.verdict == "pass"
    assert rep.series[0]["complement"] <= 2 * math.pi * 2 * g.h * 1.1


def test_decay_paraboloid_and_truncation_warning():
    g = Grid(2, 129)
    u = sample(g, lambda x: 0.5 * np.sum(x * x, axis=-1))
    rho = DC.rho0 * DC.M
    with pytest.warns(UserWarning):
        rep = decay_iteration(u, DC, _params(rho), kmax=3)
    assert rep.details["kmax_used"] == 1
    assert rep.verdict == "pass" and rep.details["nonincreasing"]


def test_decay_vacuous_below_rho0():
    g = Grid(2, 33)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = decay_iteration(GridFunction(g, np.zeros(g.shape)), DC, _params(3.0), kmax=1)
    assert rep.verdict == "vacuous"


# --- weak L^eps and weak Harnack -------------------------------------------


def test_weak_leps_zero_gives_infinite_exponent():
    g = Grid(2, 33)
    rep = weak_Leps(GridFunction(g, np.zeros(g.shape)), DC, _params(100.0))
    assert rep.lhs == math.inf and all(s["measure"] == 0 for s in rep.series)


def test_weak_leps_power_tail():
    g = Grid(2, 513)
    cap = 50.0
    with np.errstate(divide="ignore"):
        u = sample(g, lambda x: np.minimum(np.linalg.norm(x, axis=-1) ** -0.5, cap) - 1.0)
    levels = [0.5, 1.0, 2.0, 3.0]
    rep = weak_Leps(u, DC, _params(100.0), levels=levels, t_shift=1.0)
    for s in rep.series:
        assert s["measure"] == pytest.approx(math.pi * (s["t"] + 1) ** -4, abs=8 * g.h * (s["t"] + 1) ** -2 * 2 * math.pi)
    assert rep.lhs == pytest.approx(4.0, abs=0.1)
    assert weak_Leps(u, DC, _params(100.0), levels=[cap]).series[0]["measure"] == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), thr=st.floats(0, 2))
def test_truncation_idempotent(seed, thr):
    g = Grid(2, 17)
    u = GridFunction(g, np.random.default_rng(seed).uniform(0, 2, g.shape))
    once = truncate(u, thr)
    assert np.array_equal(truncate(once, thr).values, once.values)


def test_weak_harnack_spike_truncation():
    g = Grid(2, 65)
    rho = 48.0
    v = np.full(g.shape, 0.5)
    spike = (32, 33)
    v[spike] = 17 * rho / DC.rho0 + 1.0
    u = GridFunction(g, v)
    rep = weak_harnack(u, None, DC, _params(rho))
    assert rep.details["truncated_nodes"] == 1
    assert truncate(u, rep.details["truncation_level"]).values[spike] == 0.0


def test_weak_harnack_paraboloid_ratio_is_finite():
    g = Grid(2, 65)
    u = sample(g, lambda x: 0.5 * np.sum(x * x, axis=-1) + 0.1)
    f = GridFunction(g, np.full(g.shape, 2.0))
    rep = weak_harnack(u, f, DC, _params(48.0))
    assert math.isfinite(rep.details["log_ratio"])


# --- oscillation decay -----------------------------------------------------


def test_holder_saddle():
    g = Grid(2, 513)
    u = sample(g, lambda x: x[..., 0] * x[..., 1])
    rep = holder_decay(u, DC, _params(2 * 24 / (8 * g.h) ** 2))
    for s in rep.series:
        assert s["oscillation"] == pytest.approx(s["radius"] ** 2, abs=2 * s["radius"] * g.h)
    assert rep.lhs >= 1.9


def test_holder_constant():
    g = Grid(2, 65)
    rep = holder_decay(GridFunction(g, np.full(g.shape, 0.3)), DC, _params(3000.0))
    assert rep.lhs == math.inf


def test_holder_square_root():
    g = Grid(2, 513)
    u = sample(g, lambda x: 0.9 * np.linalg.norm(x, axis=-1) ** 0.5)
    rep = holder_decay(u, DC, _params(2 * 24 / (8 * g.h) ** 2))
    assert rep.verdict == "pass"
    assert rep.lhs == pytest.approx(0.5, abs=0.1)


def test_holder_gate():
    g = Grid(2, 33)
    u = GridFunction(g, np.full(g.shape, 2.0))
    assert holder_decay(u, DC, _params(3000.0)).verdict == "vacuous"
