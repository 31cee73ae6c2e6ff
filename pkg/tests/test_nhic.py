"""Chart, block-certification, and cylinder-graph tests.

Matrix oracles are built by hand from eigendecompositions of explicitly
constructed matrices; chart oracles come from the pendulum-times-rotator
family where every branch quantity is a closed-form constant.
"""

from __future__ import annotations

import numpy as np
import pytest

from driftlab import nhic
from driftlab.model import (DomainError, IntegrablePart, NearlyIntegrable,
                            PhasePoint, Poly, TrigPolyHamiltonian)


def _free_h0(n=2, half=1.5):
    coeffs = {tuple(2 * (i == j) for j in range(n)): 0.5 for i in range(n)}
    box = np.array([[-half, half]] * n)
    return IntegrablePart(Poly(n, coeffs), 1.0, box)


def _pendulum_Z(n=2, scaled=False, p_factor=False):
    # -cos(2 pi theta_1), maximized at theta_1 = 1/2 with A = 4 pi^2 there
    amp = -1.0 / (4 * np.pi**2) if scaled else -1.0
    Z = TrigPolyHamiltonian.cosine(n, (1,) + (0,) * n, amp)
    if p_factor:
        Z = Z.with_poly_factor(Poly(n, {(0, 0): 1.0, (0, 1): 0.2}))
    return Z


def _pendulum_chart(eps=0.01, gamma=0.5, scaled=False, p_factor=False, n_knots=65):
    h0 = _free_h0()
    Z = _pendulum_Z(scaled=scaled, p_factor=p_factor)
    chart = nhic.build_chart(Z, h0, [0.4], 1.0, eps=eps, gamma=gamma,
                             pf_interval=(0.6, 1.4), n_knots=n_knots)
    return h0, Z, chart


def test_spd_sqrt_examples():
    assert np.allclose(nhic.spd_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    R = nhic.spd_sqrt(np.diag([4.0, 9.0]))
    assert np.allclose(R, np.diag([2.0, 3.0]), atol=1e-13)


def test_spd_sqrt_matches_eigen_oracle():
    rng = np.random.default_rng(3)
    for trial in range(12):
        d = 1 + trial % 4
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w = rng.uniform(0.2, 5.0, d)
        M = (Q * w) @ Q.T
        expect = (Q * np.sqrt(w)) @ Q.T
        R = nhic.spd_sqrt(M)
        assert np.max(np.abs(R - expect)) < 1e-12
        assert np.max(np.abs(R @ R - M)) < 1e-12


def test_spd_sqrt_rejects_bad_input():
    with pytest.raises(nhic.MatrixDomainError):
        nhic.spd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(nhic.MatrixDomainError):
        nhic.spd_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(nhic.MatrixDomainError):
        nhic.spd_sqrt(np.diag([1.0, 1e-14]))


def test_sqrt_frechet_examples():
    X = nhic.sqrt_frechet(np.eye(2), np.eye(2))
    assert np.allclose(X, 0.5 * np.eye(2), atol=1e-13)
    X = nhic.sqrt_frechet(np.array([[4.0]]), np.array([[1.0]]))
    assert abs(X[0, 0] - 0.25) < 1e-13


def test_sqrt_frechet_matches_finite_difference():
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(8):
        d = rng.integers(1, 4)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        M = (Q * rng.uniform(0.5, 3.0, d)) @ Q.T
        N = rng.standard_normal((d, d))
        N = 0.5 * (N + N.T)
        X = nhic.sqrt_frechet(M, N)
        fd = (nhic.spd_sqrt(M + h * N) - nhic.spd_sqrt(M - h * N)) / (2 * h)
        assert np.max(np.abs(X - fd)) < 1e-7


def test_hessian_pair_pendulum():
    h0 = _free_h0()
    pair = nhic.hessian_pair(_pendulum_Z(scaled=True), h0, [0.4], 1.0)
    assert abs(pair.theta_star[0] - 0.5) < 1e-12
    assert abs(pair.A[0, 0] - 1.0) < 1e-10
    assert abs(pair.B[0, 0] - 1.0) < 1e-14
    assert pair.lam > 0
    pair = nhic.hessian_pair(_pendulum_Z(), h0, [0.4], 1.0)
    assert abs(pair.A[0, 0] - 4 * np.pi**2) < 1e-9


def test_hessian_pair_rejects_minimizer():
    # seeding near theta = 0 converges to the potential minimum
    with pytest.raises(nhic.DegeneracyError):
        nhic.hessian_pair(_pendulum_Z(), _free_h0(), [0.02], 1.0)


def test_build_chart_pendulum_values():
    _, _, chart = _pendulum_chart()
    a = chart.anchor
    assert abs(a.L[0, 0] - (2 * np.pi) ** -0.5) < 1e-12
    assert abs(a.Lambda[0, 0] - 2 * np.pi) < 1e-10
    assert np.max(np.abs(a.L @ a.L @ a.A @ a.L @ a.L - a.B)) < 1e-10
    Linv = np.linalg.inv(a.L)
    assert np.max(np.abs(a.Lambda - Linv @ a.B @ Linv)) < 1e-10
    assert np.linalg.eigvalsh(a.Lambda).min() >= np.sqrt(chart.lam / chart.h0.D) - 1e-10


def test_build_chart_commuting_matches_eigen_oracle():
    # A = B = diag(a, b): then L = I and Lambda = sqrt(A B) eigenvalue-wise
    n = 3
    a, b = 0.3, 0.7
    h0 = IntegrablePart(Poly(n, {(2, 0, 0): a / 2, (0, 2, 0): b / 2, (0, 0, 2): 0.5}),
                        4.0, np.array([[-1.5, 1.5]] * n))
    Z = (TrigPolyHamiltonian.cosine(n, (1, 0, 0, 0), -a / (4 * np.pi**2))
         + TrigPolyHamiltonian.cosine(n, (0, 1, 0, 0), -b / (4 * np.pi**2)))
    chart = nhic.build_chart(Z, h0, [0.45, 0.55], 0.2, eps=1e-3, gamma=0.7,
                             pf_interval=(-0.5, 0.5), n_knots=33)
    s = chart.anchor
    assert np.max(np.abs(s.A - np.diag([a, b]))) < 1e-9
    assert np.max(np.abs(s.L - np.eye(2))) < 1e-9
    w, V = np.linalg.eigh(s.A @ s.B)
    oracle = (V * np.sqrt(w)) @ V.T
    assert np.max(np.abs(s.Lambda - oracle)) < 1e-9


def test_chart_consistency_at_knots():
    h0, Z, chart = _pendulum_chart(p_factor=True)
    for i in range(0, len(chart.knots), 16):
        pf = float(chart.knots[i])
        pair = nhic.hessian_pair(Z, h0, chart._theta_tab[i], pf)
        L = chart.L(np.array([pf]))[0]
        assert np.max(np.abs(L @ L @ pair.A @ L @ L - pair.B)) < 1e-10


def test_chart_roundtrip_random_points():
    _, _, chart = _pendulum_chart()
    rng = np.random.default_rng(7)
    M = 1000
    theta = rng.uniform(0, 1, (M, 2))
    p = np.column_stack([rng.uniform(-0.2, 0.2, M), rng.uniform(0.62, 1.38, M)])
    t = rng.uniform(0, 1, M)
    x, y, Th, I, tt = chart.to_chart(theta, p, t)
    th2, p2, t2 = chart.from_chart(x, y, Th, I, tt)
    dth = np.abs(th2 - theta)
    dth = np.minimum(dth, 1 - dth)
    assert np.max(dth) < 1e-10
    assert np.max(np.abs(p2 - p)) < 1e-10
    assert np.max(np.abs(t2 - t)) < 1e-14
    # chart -> phase -> chart on the heights
    x3, y3, Th3, I3, _ = chart.to_chart(th2, p2, t2)
    assert np.max(np.abs(x3 - x)) < 1e-10
    assert np.max(np.abs(y3 - y)) < 1e-10


def test_chart_fixed_point_and_action_offset():
    _, _, chart = _pendulum_chart(eps=0.04)
    pf = 1.1
    theta = np.array([[chart.theta_star(np.array([pf]))[0, 0], 0.3]])
    p = np.array([[chart.p_star(np.array([pf]))[0, 0], pf]])
    x, y, Th, I, _ = chart.to_chart(theta, p, [0.2])
    assert np.max(np.abs(x)) < 1e-12 and np.max(np.abs(y)) < 1e-12
    assert abs(I[0] - pf / 0.2) < 1e-12  # eps^(-1/2) = 5

    ones = np.ones((1, 1))
    th2, p2, _ = chart.from_chart(ones, -ones, [Th[0]], [I[0]], [0.2])
    Linv = np.linalg.inv(chart.L(np.array([pf]))[0])
    expect = np.sqrt(chart.eps) * Linv @ np.ones(1)
    assert np.max(np.abs(p2[0, :1] - chart.p_star(np.array([pf]))[0] - expect)) < 1e-12

    with pytest.raises(DomainError):
        chart.to_chart(theta, np.array([[0.0, 2.0]]), [0.0])


def test_module_level_chart_wrappers():
    _, _, chart = _pendulum_chart()
    pt = PhasePoint(np.array([0.55, 0.15]), np.array([0.05, 0.95]), 0.4)
    coords = nhic.to_chart(pt, chart)
    back = nhic.from_chart(coords, chart)
    dth = np.abs(back.theta - pt.theta)
    dth = np.minimum(dth, 1 - dth)
    assert np.max(dth) < 1e-10
    assert np.max(np.abs(back.p - pt.p)) < 1e-10


def test_pushforward_matches_path_derivative():
    # straight phase path with unit time speed; all chart chain terms active
    _, _, chart = _pendulum_chart(p_factor=True)
    th0 = np.array([0.52, 0.3])
    p0 = np.array([0.03, 1.05])
    vth = np.array([0.03, -0.02])
    vp = np.array([0.01, 0.015])
    h = 1e-5

    def coords(tau):
        x, y, Th, I, tt = chart.to_chart((th0 + tau * vth)[None, :],
                                         (p0 + tau * vp)[None, :], [0.2 + tau])
        return np.array([x[0, 0], y[0, 0], Th[0], I[0], tt[0]])

    fd = (coords(h) - coords(-h)) / (2 * h)
    x, y, Th, I, tt = chart.to_chart(th0[None, :], p0[None, :], [0.2])
    xd, yd, Td, Id, td = chart.pushforward(x, y, I, vth[None, :], vp[None, :])
    got = np.array([xd[0, 0], yd[0, 0], Td[0], Id[0], td[0]])
    assert np.max(np.abs(got - fd)) < 1e-6


def test_chart_field_origin_and_linearization():
    eps = 0.01
    h0, Z, chart = _pendulum_chart(eps=eps, p_factor=True)
    H = NearlyIntegrable(h0, Z, eps)
    F = nhic.chart_field(chart, H)
    pf = 1.1
    I0 = pf / np.sqrt(eps)
    z = np.zeros((1, 1))
    fx, fy, fT, fI, ft = F(z, z, np.array([0.3]), np.array([I0]), np.array([0.6]))
    assert abs(fx[0, 0]) < 1e-12 and abs(fy[0, 0]) < 1e-12
    assert abs(fI[0]) < 1e-12
    assert abs(ft[0] - 1.0) < 1e-14

    h = 1e-6

    def uv(xv, yv):
        gx, gy, *_ = F(np.array([[xv]]), np.array([[yv]]),
                       np.array([0.3]), np.array([I0]), np.array([0.6]))
        return np.array([gx[0, 0], gy[0, 0]])

    J = np.column_stack([(uv(h, 0) - uv(-h, 0)) / (2 * h),
                         (uv(0, h) - uv(0, -h)) / (2 * h)])
    lam = np.sqrt(eps) * chart.Lambda(np.array([pf]))[0, 0, 0]
    assert np.max(np.abs(J - np.diag([lam, -lam]))) < 1e-6


def _linear_field(a, drift=0.7, shift=0.0, sign=1.0):
    def F(x, y, Theta, I, t):
        ones = np.ones_like(np.asarray(Theta, dtype=float))
        return (sign * a * (x - shift), -a * y, drift * ones,
                np.zeros_like(ones), ones)

    return F


def test_certify_decoupled_linear_field():
    a = 0.6
    block = nhic.IsolatingBlock(r_u=0.1, r_s=0.1, I_range=(9.0, 11.0), sigma=0.5)
    cert = nhic.certify_block(_linear_field(a), block, density=8)
    assert cert.sign_ok and cert.passed
    assert abs(cert.alpha - a) < 1e-8
    assert cert.m < 1e-8
    assert cert.K_blk < 1e-7
    assert block.certified and block.check()


def test_certify_reports_sign_violation_with_witness():
    a = 0.6
    block = nhic.IsolatingBlock(r_u=0.1, r_s=0.1, I_range=(9.0, 11.0), sigma=0.5)
    cert = nhic.certify_block(_linear_field(a, sign=-1.0), block, density=8)
    assert not cert.sign_ok and not cert.passed
    assert cert.witnesses
    w = cert.witnesses[0]
    assert w["shell"] == "unstable" and w["dot"] <= 0
    assert not block.certified


def test_certify_rejects_sparse_sampling():
    block = nhic.IsolatingBlock(r_u=0.1, r_s=0.1, I_range=(9.0, 11.0), sigma=0.5)
    with pytest.raises(ValueError):
        nhic.certify_block(_linear_field(0.6), block, density=4)


def test_certify_pendulum_rotator_block():
    eps = 1e-3
    h0, Z, chart = _pendulum_chart(eps=eps)
    F = nhic.chart_field(chart, NearlyIntegrable(h0, Z, eps))
    block = nhic.make_block(chart, r_u=0.05, r_s=0.05, pf_range=(0.85, 1.15))
    cert = nhic.certify_block(F, block, density=8)
    assert cert.passed
    assert abs(cert.alpha - np.sqrt(eps) * 2 * np.pi) < 0.05 * np.sqrt(eps) * 2 * np.pi
    assert cert.K_blk <= 1 / np.sqrt(2)


def test_cylinder_exact_product_graph():
    eps = 0.01
    h0, Z, chart = _pendulum_chart(eps=eps)
    F = nhic.chart_field(chart, NearlyIntegrable(h0, Z, eps))
    block = nhic.make_block(chart, r_u=0.05, r_s=0.05, pf_range=(0.85, 1.15))
    cert = nhic.certify_block(F, block, density=8)
    assert cert.passed
    cyl = nhic.compute_cylinder(chart, block, F, grid_shape=(6, 5, 3))
    # the slow pair decouples: the cylinder is theta^s = 1/2, p^s = 0 exactly
    assert np.max(np.abs(cyl.Theta_s - 0.5)) < 1e-8
    assert np.max(np.abs(cyl.P_s)) < 1e-8
    assert cyl.meta["max_height"] < 1e-10
    assert np.max(cyl.residual) < 1e-8
    assert cyl.meta["doubling_shift"] < 1e-10
    lip = cyl.lipschitz()
    assert lip["pf"] < 1e-8 and lip["angle"] < 1e-8
    rate = cyl.meta["rate"]
    dev = nhic.shadowing_check(cyl, F, T=2.0 / rate, n_orbits=6, seed=2)
    assert dev < 1e-8


def test_cylinder_requires_certified_block():
    eps = 0.01
    h0, Z, chart = _pendulum_chart(eps=eps)
    F = nhic.chart_field(chart, NearlyIntegrable(h0, Z, eps))
    block = nhic.make_block(chart, r_u=0.05, r_s=0.05, pf_range=(0.85, 1.15))
    with pytest.raises(ValueError):
        nhic.compute_cylinder(chart, block, F, grid_shape=(4, 3, 2))


def test_block_too_tight_raises_with_node():
    # stable zero of the expanding coordinate sits outside the bracket
    block = nhic.IsolatingBlock(r_u=0.1, r_s=0.1, I_range=(9.0, 11.0), sigma=0.5)
    block.certified = True
    _, _, chart = _pendulum_chart()
    with pytest.raises(nhic.BlockTooTightError):
        nhic.compute_cylinder(chart, block, _linear_field(0.6, shift=0.5),
                              grid_shape=(3, 3, 2), pf_range=(0.95, 1.05),
                              T_stay=8.0)


def test_suggest_block_radius_window():
    lo, hi, mid = nhic.suggest_block_radius(lam=0.16, delta=1e-3, eps=1e-4)
    assert lo < mid < hi
    assert abs(mid - np.sqrt(lo * hi)) < 1e-15
    with pytest.raises(ValueError):
        nhic.suggest_block_radius(lam=0.16, delta=10.0, eps=1e-4)


def test_make_block_window_check():
    _, _, chart = _pendulum_chart()
    with pytest.raises(DomainError):
        nhic.make_block(chart, r_u=0.05, r_s=0.05, pf_range=(0.3, 1.15))
