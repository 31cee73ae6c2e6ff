"""Checks for the resonance-geometry layer."""

from __future__ import annotations

import numpy as np
import pytest

from driftlab.model import (
    IntegrablePart,
    Poly,
    TrigPolyHamiltonian,
    cr_norm,
)
from driftlab.resonance import (
    Puncture,
    build_geometry,
    check_genericity,
    fast_frequency,
    in_domain_D,
    passage_segments,
    punctures,
    solve_p_star,
    torus_dist,
)


def _free_h0(n: int = 2, half: float = 2.5) -> IntegrablePart:
    coeffs = {}
    for i in range(n):
        e = [0] * n
        e[i] = 2
        coeffs[tuple(e)] = 0.5
    return IntegrablePart(Poly(n, coeffs), 1.0, [[-half, half]] * n)


def _coupled_h0() -> IntegrablePart:
    # 0.5|p|^2 + 0.1 p1 p2; slow gradient p1 + 0.1 p2
    poly = Poly(2, {(2, 0): 0.5, (0, 2): 0.5, (1, 1): 0.1})
    return IntegrablePart(poly, 1.3, [[-2.5, 2.5]] * 2)


# -- critical curve ---------------------------------------------------------


def test_p_star_free_case_is_zero():
    h0 = _free_h0()
    ps, res = solve_p_star(h0, 0.7)
    assert ps == pytest.approx(np.zeros(1), abs=1e-12)
    assert res <= 1e-10


def test_p_star_coupled_case_matches_linear_solve():
    # oracle: p1 + 0.1 p2 = 0 solved directly
    h0 = _coupled_h0()
    for pf in (-1.0, -0.3, 0.55, 2.0):
        ps, res = solve_p_star(h0, pf)
        assert ps[0] == pytest.approx(-0.1 * pf, abs=1e-10)
        assert res <= 1e-10


def test_p_star_residual_on_sweep():
    h0 = _coupled_h0()
    guess = None
    for pf in np.linspace(-2.0, 2.0, 200):
        guess, res = solve_p_star(h0, float(pf), guess)
        assert res <= 1e-10


# -- punctures ---------------------------------------------------------------


def test_punctures_low_order_rationals():
    # oracle: enumerate l/k with |k|, |l| <= 2 inside the window
    h0 = _free_h0()
    qs = punctures(h0, 2, (-2.5, 2.5))
    got = [q.pf for q in qs]
    assert got == pytest.approx([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0], abs=1e-10)


def test_punctures_order_three_interior():
    h0 = _free_h0()
    qs = punctures(h0, 3, (0.1, 0.9))
    assert [q.pf for q in qs] == pytest.approx([1 / 3, 1 / 2, 2 / 3], abs=1e-10)
    assert [(q.k, q.l) for q in qs] == [(3, -1), (2, -1), (3, -2)]


def test_punctures_none_at_order_one():
    h0 = _free_h0()
    assert punctures(h0, 1, (0.1, 0.9)) == []


def test_puncture_symmetry_for_even_h0():
    poly = Poly(2, {(2, 0): 0.5, (0, 2): 0.5, (0, 4): 0.1})
    h0 = IntegrablePart(poly, 3.0, [[-1.2, 1.2]] * 2)
    qs = punctures(h0, 3, (-1.0, 1.0))
    pos = sorted(q.pf for q in qs if q.pf > 1e-12)
    neg = sorted(-q.pf for q in qs if q.pf < -1e-12)
    assert pos == pytest.approx(neg, abs=1e-10)


def test_fast_frequency_monotone():
    h0 = _coupled_h0()
    vals = [fast_frequency(h0, pf) for pf in np.linspace(-2, 2, 50)]
    assert np.all(np.diff(vals) > 0)


# -- passage segments ---------------------------------------------------------


def test_passage_segments_single_puncture():
    segs = passage_segments([0.5], 1e-6, (0.0, 1.0))
    assert len(segs) == 2
    assert segs[0] == pytest.approx((0.0, 0.2), abs=1e-12)
    assert segs[1] == pytest.approx((0.8, 1.0), abs=1e-12)


def test_passage_segments_swallowed_by_large_eps():
    assert passage_segments([0.5], 1.0, (0.0, 1.0)) == []


def test_passage_segments_avoid_punctures():
    rng = np.random.default_rng(19)
    for _ in range(25):
        pts = np.sort(rng.uniform(0, 1, rng.integers(1, 6)))
        eps = float(rng.uniform(1e-9, 1e-3))
        w = 3 * eps ** (1 / 6)
        segs = passage_segments(pts, eps, (0.0, 1.0))
        for lo, hi in segs:
            assert hi > lo
            for q in pts:
                assert not (lo < q < hi)
                assert min(abs(q - lo), abs(q - hi)) >= w - 1e-12 or not (lo <= q <= hi)


# -- non-resonant domain -------------------------------------------------------


def test_domain_membership_golden_ratio():
    h0 = _free_h0()
    phi = (1 + np.sqrt(5)) / 2
    ok, witness, slow = in_domain_D(h0, [0.0, phi], K=5, s=1e-3)
    assert ok and witness is None and slow <= 1e-3


def test_domain_rejects_half_integer_frequency():
    h0 = _free_h0()
    ok, witness, _ = in_domain_D(h0, [0.0, 0.5], K=2, s=0.01)
    assert not ok
    assert witness == (2, -1)


def test_domain_rejects_large_slow_gradient():
    h0 = _free_h0()
    phi = (1 + np.sqrt(5)) / 2
    ok, witness, slow = in_domain_D(h0, [0.5, phi], K=2, s=1e-3)
    assert not ok and witness is None and slow > 1e-3


# -- genericity ---------------------------------------------------------------


def _single_peak_Z() -> TrigPolyHamiltonian:
    return TrigPolyHamiltonian.cosine(2, (1, 0, 0))


def _bifurcating_Z() -> TrigPolyHamiltonian:
    return (TrigPolyHamiltonian.cosine(2, (2, 0, 0))
            + TrigPolyHamiltonian.cosine(2, (1, 0, 0)).with_poly_factor(Poly.variable(2, 1)))


def test_genericity_single_peak():
    h0 = _free_h0(half=1.0)
    Z = _single_peak_Z()
    report = check_genericity(Z, h0, (-0.5, 0.5), n_pf=33)
    assert report.passed()
    assert report.bifurcations == []
    globals_ = [b for b in report.branches if any(b.is_global)]
    assert len(globals_) == 1
    thetas = np.asarray(globals_[0].theta).ravel()
    assert np.max(torus_dist(thetas, 0.0)) < 1e-10
    scale = cr_norm(Z, 3, method="coeff", box=h0.box)
    assert report.scale == pytest.approx(scale)
    assert report.lam == pytest.approx(4 * np.pi**2 / scale, rel=1e-9)
    assert 0 < report.b < report.lam / 4


def test_genericity_bifurcation_family():
    h0 = _free_h0(half=1.0)
    report = check_genericity(_bifurcating_Z(), h0, (-0.5, 0.5), n_pf=97)
    assert len(report.bifurcations) == 1
    assert abs(report.bifurcations[0]) <= 1e-8
    assert report.gaps[0] == pytest.approx(2.0, abs=1e-6)
    for key in ("G0", "G1", "G2", "T0", "T1", "T2"):
        assert report.flags[key]


def test_genericity_flat_potential_fails():
    h0 = _free_h0(half=1.0)
    Z = TrigPolyHamiltonian.zero(2)
    report = check_genericity(Z, h0, (-0.5, 0.5), n_pf=9, grid=64)
    assert not report.flags["G0"]
    assert not report.flags["T0"]


def test_bifurcation_stable_under_refinement():
    h0 = _free_h0(half=1.0)
    for n_pf in (49, 97):
        report = check_genericity(_bifurcating_Z(), h0, (-0.5, 0.5), n_pf=n_pf)
        assert len(report.bifurcations) == 1
        assert abs(report.bifurcations[0]) <= 1e-8


def test_branch_continuity_bound():
    # maxima drift with p^f; steps must respect the implicit-function bound
    h0 = _free_h0(half=1.0)
    Z = (TrigPolyHamiltonian.cosine(2, (1, 0, 0))
         + TrigPolyHamiltonian.sine(2, (1, 0, 0)).with_poly_factor(
             Poly(2, {(0, 1): 0.3})))
    report = check_genericity(Z, h0, (-0.5, 0.5), n_pf=65)
    globals_ = [b for b in report.branches if any(b.is_global)]
    assert len(globals_) == 1
    br = globals_[0].arrays()
    lam_raw = float(np.min(br["neg_hess_min"]))
    C = 0.3 * 2 * np.pi / lam_raw
    steps = torus_dist(br["theta"][1:, 0], br["theta"][:-1, 0])
    dpf = np.diff(br["pf"])
    assert np.all(steps <= 1.5 * C * dpf + 1e-12)


# -- assembled geometry --------------------------------------------------------


def test_build_geometry_validates():
    h0 = _free_h0()
    geo = build_geometry(h0, (-2.5, 2.5), eps=1e-6, K=2, n_samples=120)
    report = geo.validate()
    assert report["residual_ok"]
    assert report["clearance_ok"]
    assert report["puncture_gap_ok"]
    assert len(geo.punctures) == 7
    for lo, hi in geo.segments:
        for q in geo.punctures:
            assert not (lo < q.pf < hi)
