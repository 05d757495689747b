"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the run (see ``conftest.py``) and also when the file runs as a script.
"""

import math
import time
from decimal import Decimal, getcontext
from fractions import Fraction

import numpy as np
import pytest

from slidekit.grid import Grid, GridFunction, Mask
from slidekit.operators import EllipticityParams, gamma_constant, make_operator
from slidekit.paraboloid import contact_hessian_check, contact_set, contact_set_bruteforce, jensen_envelope
from slidekit.harnack import (
    _ball_window,
    barrier_check,
    covering_step,
    derive_constants,
    dyadic_ball_family,
    holder_decay,
    verify_measure_lemma,
    weak_harnack,
)
from slidekit.flatness import FlatnessConfig, classify_singular_set, initial_quadratic, twice_diff_test
from slidekit.experiments import generate, relax_solve, solver_interior

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, tuple[bool, str]] = {}
P1 = EllipticityParams(1.0, 1.0)


def record(num: int, ok: bool, detail: str) -> None:
    RESULTS[num] = (bool(ok), detail)
    print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def summary_lines() -> list[str]:
    return [f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {d}" for k, (ok, d) in sorted(RESULTS.items())]


def _paraboloid(grid, b, z0=None, ell=None, c=0.0):
    z0 = np.zeros(grid.dim) if z0 is None else np.asarray(z0, dtype=float)
    ell = np.zeros(grid.dim) if ell is None else np.asarray(ell, dtype=float)
    x = grid.coords
    return GridFunction(grid, 0.5 * b * np.sum((x - z0) ** 2, axis=-1) + x @ ell + c)


def _warm_up():
    g = Grid(2, 17)
    u = _paraboloid(g, 1.0)
    contact_set(u, 1.0, g.ball(0.5))
    jensen_envelope(u, 0.5)


# --- 1 ------------------------------------------------------------------------


def _constants_oracle(n, lam, Lam, b0):
    """Constraint closure in exact arithmetic, each integer found by search."""
    lam, Lam, b0 = Fraction(lam), Fraction(Lam), Fraction(b0)
    Gamma = ((n - 1) * Lam + 2 * b0 + 1) / lam + 1
    p = 1
    while lam * p - 2 * (n - 1) * Lam - 4 * b0 < 1:  # chain lower bound must reach a
        p += 1
    C0 = Fraction(2**p - 1, p)  # sup of the barrier profile
    # size of the barrier on 1/2 <= t <= 1, worst at t = 1/2, bounded term by term
    s = Fraction(2) ** (p + 2)
    hess_bound = max((p + 1) * s + 1, s + 1)
    grad_bound = 2 + Fraction(2) ** (p + 1)
    M = 2
    while not (2 * C0 / (M - 1) + Fraction(1, 64) <= Fraction(1, 16) and M >= hess_bound and M >= grad_bound):
        M += 1
    mu = (Fraction(M - 1, 8 * M)) ** n / (1 + Gamma) ** n
    theta = mu / 5**n
    getcontext().prec = 60
    th = Decimal(theta.numerator) / Decimal(theta.denominator)
    eps = -(1 - th).ln() / Decimal(M).ln()
    return {
        "Gamma": Gamma,
        "rho0": 8 * Gamma,
        "p": p,
        "C0": C0,
        "M": M,
        "mu": mu,
        "theta": theta,
        "eps": eps,
        "eps0": eps / 2,
    }


def test_criterion_01_constants():
    t0 = time.perf_counter()
    dc = derive_constants(2, P1)
    elapsed = time.perf_counter() - t0
    ref = _constants_oracle(2, 1, 1, 0)
    exact = (dc.Gamma, dc.rho0, dc.p, dc.C0) == (3.0, 24.0, 3, 7 / 3) and dc.M == ref["M"]
    exact &= (ref["Gamma"], ref["rho0"], ref["p"], ref["C0"]) == (3, 24, 3, Fraction(7, 3))
    rel = max(abs(getattr(dc, k) - float(ref[k])) / float(ref[k]) for k in ("mu", "theta", "eps", "eps0"))
    ok = exact and rel <= 1e-12 and elapsed < 1.0
    record(1, ok, f"M={dc.M} mu={dc.mu:.6e} eps={dc.eps:.6e} max rel err {rel:.1e}, {elapsed * 1e3:.2f} ms")


# --- 2 ------------------------------------------------------------------------


def test_criterion_02_measure_lemma():
    _warm_up()
    dc = derive_constants(2, P1)
    p = EllipticityParams(1.0, 1.0, rho=3.0)
    g = Grid(2, 513)
    t0 = time.perf_counter()
    rep = verify_measure_lemma(_paraboloid(g, 2.0), 1.0, g.ball(0.25), dc, p)
    elapsed = time.perf_counter() - t0
    ratio = rep.details["ratio"]
    h = g.h
    ok_bound = ratio >= (1 / 16) * (1 - 10 * h)
    ok_close = abs(ratio - 1 / 9) <= 10 * h
    small = Grid(2, 65)
    u = _paraboloid(small, 2.0)
    same = True
    for V in (small.ball(0.25), small.ball(1.0)):
        a, b = contact_set(u, 1.0, V), contact_set_bruteforce(u, 1.0, V)
        same &= bool(np.array_equal(a.witness, b.witness)) and a.touch == b.touch
    ok = ok_bound and ok_close and same and elapsed < 10.0 and rep.verdict == "pass"
    record(2, ok, f"ratio={ratio:.6f} (1/9={1 / 9:.6f}, 10h={10 * h:.4f}), brute force agrees={same}, {elapsed:.2f} s")


# --- 3 ------------------------------------------------------------------------


def test_criterion_03_envelope():
    g = Grid(1, 4097)
    h = g.h
    x = g.axis
    u = GridFunction(g, 0.5 * x**2)
    eps = 0.5
    err = float(np.max(np.abs(jensen_envelope(u, eps).values - x**2 / (eps + 2))))
    tol = (1 / eps + 0.5) * h**2
    envs = [jensen_envelope(u, e).values for e in (0.1, 0.2, 0.4)]
    mono = bool(np.all(envs[1] <= envs[0]) and np.all(envs[2] <= envs[1]) and np.all(envs[0] <= u.values))
    record(3, err <= tol and mono, f"max err {err:.3e} <= {tol:.3e}, monotone in eps: {mono}")


# --- 4 ------------------------------------------------------------------------


def test_criterion_04_contact_hessian():
    a = 1.0
    Gamma = gamma_constant(2, P1)
    g = Grid(2, 257)
    family = [
        (b, z0, ell)
        for b in (0.0, 0.5 * Gamma * a, Gamma * a)
        for z0, ell in (((0.0, 0.0), (0.0, 0.0)), ((0.25, 0.0), (0.0, 0.25)), ((-0.15, 0.2), (0.15, -0.2)))
    ]
    total = checked = 0
    for b, z0, ell in family:
        u = _paraboloid(g, b, z0, ell, 0.1)
        for V in (g.ball(0.25), g.ball(1.0)):
            rep = contact_hessian_check(contact_set(u, a, V), u, a, Gamma)
            total += rep.violations
            checked += rep.checked
    record(4, total == 0 and checked > 0, f"{len(family)} fixtures, {checked} interior contact nodes, {total} violations")


# --- 5 ------------------------------------------------------------------------


def test_criterion_05_barrier():
    dc = derive_constants(2, P1)
    rep = barrier_check(np.zeros(2), 0.5, 1.0, dc, P1, samples=10_000, seed=0)
    d = rep.details
    ok = rep.verdict == "pass" and d["violations"] == 0 and d["chain_violations"] == 0 and dc.p == 3
    record(5, ok, f"10^4 samples, min lhs {rep.lhs:.6f} >= a=1, chain violations {d['chain_violations']}")


# --- 6 ------------------------------------------------------------------------


def _saturated_pair(grid, rng, mu):
    """Random E and an F grown until every family ball meeting E is mu-dense in F."""
    unit = grid.ball(1.0).members
    E = np.zeros(grid.shape, dtype=bool)
    for _ in range(rng.integers(1, 5)):
        c = rng.uniform(-0.6, 0.6, grid.dim)
        E |= grid.ball(rng.uniform(0.02, 0.2), c).members
    E |= (rng.random(grid.shape) < 0.002) & unit
    E &= unit
    F = E.copy()
    for b in dyadic_ball_family(grid):
        box, inside = _ball_window(grid, b)
        if not np.any(inside & E[box]):
            continue
        sub = F[box]
        need = int(math.floor(mu * np.count_nonzero(inside))) + 1 + int(rng.integers(0, 3))
        free = np.argwhere(inside & ~sub & unit[box])
        short = need - np.count_nonzero(inside & sub)
        if short > 0:
            pick = free[rng.choice(len(free), size=short, replace=False)]
            sub[tuple(pick.T)] = True
    return Mask(grid, E), Mask(grid, F)


def test_criterion_06_covering():
    g = Grid(2, 129)
    mu = 0.1
    rng = np.random.default_rng(2024)
    passed = hyp_ok = 0
    for _ in range(50):
        E, F = _saturated_pair(g, rng, mu)
        rep = covering_step(E, F, mu)
        hyp_ok += rep.hypotheses["family_density"] is True
        passed += rep.verdict == "pass" and rep.lhs <= rep.rhs
    gated = 0
    for _ in range(10):
        c = rng.uniform(-0.5, 0.5, 2)
        E = g.ball(rng.uniform(0.01, 0.05), c)
        F = E | Mask(g, (rng.random(g.shape) < 0.01) & g.ball(1.0).members)
        rep = covering_step(E, F, mu)
        gated += rep.verdict == "vacuous" and rep.details["conclusion_asserted"] is False
    ok = passed == 50 and hyp_ok == 50 and gated == 10
    record(6, ok, f"saturated pairs: {hyp_ok}/50 satisfy the hypothesis, {passed}/50 conclusion holds; gate: {gated}/10 vacuous")


# --- 7 ------------------------------------------------------------------------


def test_criterion_07_holder():
    g = Grid(2, 513)
    dc = derive_constants(2, P1)
    p = EllipticityParams(1.0, 1.0, rho=2 * dc.rho0 / (8 * g.h) ** 2)
    r = np.linalg.norm(g.coords, axis=-1)
    parts, ok = [], True
    for gamma in (0.5, 1.0, 1.5):
        t0 = time.perf_counter()
        rep = holder_decay(GridFunction(g, r**gamma), dc, p)
        dt = time.perf_counter() - t0
        ok &= abs(rep.lhs - gamma) <= 0.1 and dt < 5.0 and rep.verdict == "pass"
        parts.append(f"gamma={gamma}: {rep.lhs:.4f} ({dt:.2f} s)")
    t0 = time.perf_counter()
    rep = holder_decay(GridFunction(g, g.coords[..., 0] * g.coords[..., 1]), dc, p)
    dt = time.perf_counter() - t0
    ok &= rep.lhs >= 1.9 and dt < 5.0
    parts.append(f"x1x2: {rep.lhs:.4f} ({dt:.2f} s)")
    record(7, ok, "; ".join(parts))


# --- 8 ------------------------------------------------------------------------


def test_criterion_08a_radial_sigma2():
    g = Grid(2, 129)
    worst, regular, points = 0.0, True, 0
    for t in (0.2, 0.6):
        gen = generate("radial-sigma-k", {"k": 2, "t": t}, g)
        res = classify_singular_set(gen.u, gen.f, make_operator("sigma-k:2"), FlatnessConfig())
        regular &= res.undetermined == 0
        points += res.points
        a0, b, C = (gen.metadata["quadratic"][k] for k in ("a0", "b", "C"))
        for i in range(res.points):
            L = res.limit(i)
            worst = max(worst, abs(L.a0 - a0), float(np.max(np.abs(L.b - b))), float(np.max(np.abs(L.C - np.asarray(C)))))
    RESULTS_8["a"] = (regular and worst <= 1e-6, f"(a) {points} points all regular={regular}, max coef err {worst:.1e}")
    _record_8()
    assert RESULTS_8["a"][0], RESULTS_8["a"][1]


def test_criterion_08b_crease():
    g = Grid(2, 513)
    gen = generate("c11-crease", {"delta": 1e-2}, g)
    res = classify_singular_set(gen.u, gen.f, make_operator("trace"), FlatnessConfig())
    X = g.coords[res.mask.members]
    spread = float(np.max(np.abs(X[:, 0]))) if len(X) else 0.0
    ok = res.measure <= 8 * g.h and spread <= 3 * g.h + 1e-12
    RESULTS_8["b"] = (ok, f"(b) measure {res.measure / g.h:.3f}h <= 8h, max |x1| {spread / g.h:.1f}h <= 3h")
    _record_8()
    assert ok, RESULTS_8["b"][1]


def _registry_cases():
    p = EllipticityParams(0.5, 2.0)
    for n in (1, 2, 3):
        yield make_operator("trace"), n, 10.0
        yield make_operator("pucci-minus", p), n, 10.0
        yield make_operator("pucci-plus", p), n, 10.0
    rho = 0.5
    for n in (2, 3):
        # sigma_2(M + I) - sigma_2(I) is elliptic with lam = (n-1)(1 - rho/2) for |M| <= rho/2
        lam = (n - 1) * (1 - rho / 2)
        F = make_operator("shifted-sigma-k:2:1", EllipticityParams(lam, (n - 1) * (1 + rho / 2)))
        s = rho / 2
        top = min(math.comb(n, 2) * ((1 + s) ** 2 - 1), -math.comb(n, 2) * ((1 - s) ** 2 - 1))
        yield F, n, top


def test_criterion_08c_initial_quadratic():
    rng = np.random.default_rng(8)
    worst_eq = worst_bound = -math.inf
    cases = 0
    for F, n, top in _registry_cases():
        for f0 in rng.uniform(-top, top, 100):
            t, _ = initial_quadratic(F, float(f0), n)
            worst_eq = max(worst_eq, abs(F(t * np.eye(n)) - f0))
            worst_bound = max(worst_bound, abs(t) - abs(f0) / (n * F.lam))
            cases += 1
    ok = worst_eq <= 1e-10 and worst_bound <= 1e-9
    RESULTS_8["c"] = (ok, f"(c) {cases} solves, max |F(tI)-f0| {worst_eq:.1e}, max |t|-|f0|/(n lam) {worst_bound:.1e}")
    _record_8()
    assert ok, RESULTS_8["c"][1]


RESULTS_8: dict[str, tuple[bool, str]] = {}


def _record_8():
    parts = [RESULTS_8[k] for k in sorted(RESULTS_8)]
    RESULTS[8] = (all(ok for ok, _ in parts) and len(parts) == 3, "; ".join(d for _, d in parts))


# --- 9 ------------------------------------------------------------------------


def test_criterion_09_twice_differentiability():
    g = Grid(2, 1025)
    zero_g, zero_H = np.zeros(2), np.zeros((2, 2))
    crease = GridFunction(g, g.coords[..., 0] * np.abs(g.coords[..., 0]))
    levels = [2.0**-j for j in range(0, 9)]
    passing = [e for e in levels if twice_diff_test(crease, [0, 0], zero_g, zero_H, e)[0]]
    threshold = min(passing) if passing else math.inf
    flips = [twice_diff_test(crease, [0, 0], zero_g, zero_H, e)[0] for e in levels]
    monotone = all(not b or a for a, b in zip(flips, flips[1:]))  # descending eps
    ok_thr = 1 / 16 <= threshold <= 1 / 4 and monotone
    cube = GridFunction(g, np.linalg.norm(g.coords, axis=-1) ** 3)
    parts = [f"x1|x1| threshold eps={threshold}"]
    ok_w = True
    for eps in (1e-2, 1e-3):
        passed, r = twice_diff_test(cube, [0, 0], zero_g, zero_H, eps)
        ok_w &= passed and 0.5 * 16 * eps <= r <= 2 * 16 * eps
        parts.append(f"|x|^3 eps={eps}: r={r:.5f} vs 16eps={16 * eps:.3f}")
    record(9, ok_thr and ok_w, "; ".join(parts))


# --- 10 -----------------------------------------------------------------------


def test_criterion_10_weak_harnack_scaling():
    g = Grid(2, 129)
    dc = derive_constants(2, P1)
    p = EllipticityParams(1.0, 1.0, rho=48.0)
    zero = GridFunction(g, np.zeros(g.shape))
    logs, worst = [], 0.0
    for c in (0.01, 0.1, p.rho / dc.rho0):
        rep = weak_harnack(GridFunction(g, np.full(g.shape, c)), zero, dc, p)
        expected = math.log(rep.details["quarter_ball_measure"]) / dc.eps0
        worst = max(worst, abs(rep.details["log_ratio"] - expected) / abs(expected))
        logs.append(rep.details["log_ratio"])
        assert rep.verdict == "pass"
    spread = (max(logs) - min(logs)) / abs(logs[0])
    ok = worst <= 1e-9 and spread <= 1e-9
    record(10, ok, f"log ratio {logs[0]:.6e}, max rel err vs log|B_1/4|/eps0 {worst:.1e}, spread over c {spread:.1e}")


# --- 11 -----------------------------------------------------------------------


def test_criterion_11_solver():
    g = Grid(2, 129)
    exact = GridFunction(g, g.coords[..., 0] ** 2 - g.coords[..., 1] ** 2)
    inner = solver_interior(g, exact.domain).members
    start = exact.with_values(np.where(inner, 0.0, exact.values))
    res = relax_solve(make_operator("trace"), None, start, tol=1e-10)
    err = float(np.max(np.abs(res.u.values[inner] - exact.values[inner])))
    ok_fix = res.converged and err <= 5 * g.h**2
    small = Grid(2, 33)
    rng = np.random.default_rng(11)
    ops = [make_operator("trace"), make_operator("pucci-minus", EllipticityParams(1.0, 2.0))]
    held = 0
    for k in range(20):
        lo = rng.standard_normal(small.shape)
        hi = lo + rng.uniform(0.0, 1.0, small.shape) * (rng.random(small.shape) < 0.5)
        F = ops[k % 2]
        a = relax_solve(F, None, GridFunction(small, lo), tol=1e-11)
        b = relax_solve(F, None, GridFunction(small, hi), tol=1e-11)
        dom = a.u.domain.members
        held += bool(a.converged and b.converged and np.all(a.u.values[dom] <= b.u.values[dom] + 1e-9))
    record(11, ok_fix and held == 20, f"error {err:.2e} <= 5h^2={5 * g.h**2:.2e} in {res.iterations} steps; comparison {held}/20")


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-q"]))
