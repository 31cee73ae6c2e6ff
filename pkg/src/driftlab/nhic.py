"""Slow-fast charts, isolating blocks, and invariant cylinder graphs.

Near a nondegenerate maximizer branch of the averaged potential the slow
pair (theta^s, p^s) is hyperbolic once actions are measured in units of
sqrt(eps).  The chart

    x = L^-1 (theta^s - theta_*) + eps^(-1/2) L (p^s - p_*),
    y = L^-1 (theta^s - theta_*) - eps^(-1/2) L (p^s - p_*),
    Theta = gamma * theta^f,   I = eps^(-1/2) p^f,

with L the SPD matrix solving L^2 A L^2 = B (A the negative slow Hessian of
the potential on the branch, B the slow action Hessian of H0) diagonalises
the linearisation into expanding/contracting blocks +-sqrt(eps) Lambda,
Lambda = L A L = L^-1 B L^-1.  The branch convention here follows local
maximizers of the averaged potential; minimizers give the time-reversed
picture with x and y swapped.

Blocks are certified directly from the vector field: boundary sign
conditions on the unstable/stable shells, a hyperbolicity rate alpha from
symmetric parts of finite-difference Jacobian blocks, and a coupling budget
m that includes the center-boundary leak term 2*max|dI/dt|/sigma absorbed
by a smoothstep cutoff.  Certified blocks carry K_blk = m/(alpha - 2m); the
cylinder inside a certified block is computed per grid node by shooting:
bisection on the escape side of the expanded coordinate, then Newton on the
two-point boundary map (forward exit for x, backward exit for y).

Branch data along p^f is tabulated on a dense knot grid and interpolated
with cubic splines; chart derivatives in the pushforward are the exact
derivatives of the interpolated chart, so chart-level identities hold to
machine precision independent of the knot density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_sylvester

from .model import (DomainError, IntegrablePart, NonConvergenceError,
                    PhasePoint, TrigPolyHamiltonian, cr_norm)
from .resonance import _ZSlice, solve_p_star


class MatrixDomainError(ValueError):
    """Matrix argument outside the symmetric positive definite domain."""


class DegeneracyError(RuntimeError):
    """Branch data escaped the nondegeneracy window (eigenvalues of the
    rescaled Hessian pair left (0, 1], or a critical point stopped being a
    strict maximizer)."""


class BlockTooTightError(RuntimeError):
    """No interior stayer: the shooting bracket has no sign change, so the
    cylinder does not pass through the block at some grid node."""


def spd_sqrt(M, tol: float = 1e-12) -> np.ndarray:
    """Principal square root of a symmetric positive definite matrix.

    Eigendecomposition based; rejects non-symmetric or non-SPD input and
    checks the reconstruction R @ R = M to 1e-12 relative scale.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise MatrixDomainError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if float(np.max(np.abs(M - M.T))) > 1e-10 * scale:
        raise MatrixDomainError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if float(w.min()) <= tol:
        raise MatrixDomainError(f"matrix is not positive definite (min eig {w.min():.3e})")
    R = (V * np.sqrt(w)) @ V.T
    R = 0.5 * (R + R.T)
    if float(np.max(np.abs(R @ R - M))) > 1e-12 * scale * max(1.0, scale):
        raise NonConvergenceError("square root reconstruction check failed")
    return R


def sqrt_frechet(M, N) -> np.ndarray:
    """Derivative of spd_sqrt at M in direction N.

    X solves the Sylvester equation sqrt(M) X + X sqrt(M) = N, which is the
    differentiated form of sqrt(M)^2 = M.
    """
    S = spd_sqrt(M)
    N = np.asarray(N, dtype=float)
    if N.shape != S.shape:
        raise MatrixDomainError(f"direction shape {N.shape} does not match {S.shape}")
    return solve_sylvester(S, S, N)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass(frozen=True)
class HessianPair:
    """The slow Hessian pair on the branch: A = -d^2_theta Z, B = d^2_pp H0.

    ``scale`` records the rescaling under which A/scale has eigenvalues in
    (lam, upper] inside (0, 1]; ``D`` is the convexity constant bounding B.
    """

    pf: float
    theta_star: np.ndarray
    p_star: np.ndarray
    A: np.ndarray
    B: np.ndarray
    scale: float
    lam: float
    upper: float
    D: float

    def validate(self) -> None:
        ns = self.A.shape[0]
        for name, M in (("A", self.A), ("B", self.B)):
            if M.shape != (ns, ns):
                raise MatrixDomainError(f"{name} must be {ns}x{ns}")
            if float(np.max(np.abs(M - M.T))) > 1e-10 * max(1.0, float(np.max(np.abs(M)))):
                raise MatrixDomainError(f"{name} is not symmetric")
        wa = np.linalg.eigvalsh(self.A) / self.scale
        if float(wa.min()) <= 1e-10:
            raise DegeneracyError(f"rescaled A not positive definite (min eig {wa.min():.3e})")
        if float(wa.max()) > 1.0 + 1e-6:
            raise DegeneracyError(f"rescaled A exceeds the unit bound (max eig {wa.max():.3e})")
        wb = np.linalg.eigvalsh(self.B)
        if float(wb.min()) < 1.0 / self.D - 1e-9 or float(wb.max()) > self.D + 1e-9:
            raise DegeneracyError("B escapes the convexity window [1/D, D]")


def _polish_branch(zs: _ZSlice, seed, p, scale: float, tol: float = 1e-12,
                   max_iter: int = 60) -> np.ndarray:
    """Newton polish of a slow-angle critical point; requires a strict
    maximizer (negative definite Hessian) at convergence."""
    th = np.atleast_1d(np.asarray(seed, dtype=float)).copy()
    for _ in range(max_iter):
        g = zs.grad(th, p)
        H = zs.hess(th, p)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise DegeneracyError("singular slow Hessian while tracking the branch")
        th = th - step
        if float(np.max(np.abs(step))) < tol:
            break
    else:
        raise NonConvergenceError("branch polish did not converge")
    w = np.linalg.eigvalsh(zs.hess(th, p))
    if float(w.max()) >= -1e-10 * scale:
        raise DegeneracyError("critical point is not a strict maximizer")
    return th


def hessian_pair(Z: TrigPolyHamiltonian, h0: IntegrablePart, theta_seed, pf: float,
                 scale: float | None = None) -> HessianPair:
    """Build and validate the Hessian pair at one fast action."""
    zs = _ZSlice(Z, h0)
    ns = h0.n - 1
    if ns < 1:
        raise ValueError("need at least one slow degree of freedom")
    if scale is None:
        scale = max(1.0, cr_norm(Z, 3, "coeff", h0.box))
    ps, res = solve_p_star(h0, pf)
    if res > 1e-9:
        raise NonConvergenceError(f"slow-gradient solve residual {res:.2e}")
    p = np.concatenate([ps, [pf]])
    th = _polish_branch(zs, theta_seed, p, scale)
    A = -zs.hess(th, p)
    B = h0.hess(p)[:ns, :ns]
    wa = np.linalg.eigvalsh(A) / scale
    pair = HessianPair(pf=float(pf), theta_star=th, p_star=ps, A=A, B=B,
                       scale=float(scale), lam=float(wa.min()), upper=float(wa.max()),
                       D=h0.D)
    pair.validate()
    return pair


def _solve_L(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The SPD solution L of L^2 A L^2 = B together with Lambda = L A L."""
    S = spd_sqrt(B)
    T = spd_sqrt(_sym(S @ A @ S))
    C = _sym(S @ np.linalg.solve(T, S))
    L = spd_sqrt(C)
    Lam = _sym(L @ A @ L)
    return L, Lam


@dataclass(frozen=True)
class ChartSample:
    """Verified branch data at one fast action."""

    pair: HessianPair
    L: np.ndarray
    Lambda: np.ndarray

    @property
    def pf(self) -> float:
        return self.pair.pf

    @property
    def A(self) -> np.ndarray:
        return self.pair.A

    @property
    def B(self) -> np.ndarray:
        return self.pair.B


def _verify_sample(s: ChartSample, tol: float = 1e-10) -> None:
    L, A, B, Lam = s.L, s.A, s.B, s.Lambda
    if float(np.max(np.abs(L @ L @ A @ L @ L - B))) > tol * max(1.0, float(np.max(np.abs(B)))):
        raise DegeneracyError("L^2 A L^2 = B failed verification")
    Linv = np.linalg.inv(L)
    if float(np.max(np.abs(Lam - Linv @ B @ Linv))) > tol * max(1.0, float(np.max(np.abs(Lam)))):
        raise DegeneracyError("L A L = L^-1 B L^-1 failed verification")
    lam_min = float(np.linalg.eigvalsh(Lam).min())
    floor = np.sqrt(s.pair.lam / s.pair.D)
    if lam_min < floor * (1.0 - 1e-8):
        raise DegeneracyError(f"min eig of Lambda {lam_min:.3e} below sqrt(lam/D) {floor:.3e}")


@dataclass
class SlowFastChart:
    """Branch-adapted coordinates (x, y, Theta, I, t) over a fast-action window.

    Branch quantities are tabulated on ``knots`` and interpolated with cubic
    splines; ``anchor`` is an exactly solved, verified sample at the
    requested fast action.  ``to_chart``/``from_chart`` are mutually inverse
    to machine precision because both sides read the same splines.
    """

    Z: TrigPolyHamiltonian
    h0: IntegrablePart
    eps: float
    gamma: float
    pf_interval: tuple[float, float]
    scale: float
    lam: float
    anchor: ChartSample
    knots: np.ndarray
    _theta_tab: np.ndarray
    _pstar_tab: np.ndarray
    _L_tab: np.ndarray
    _Lambda_tab: np.ndarray
    _sp: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._sp = {
            "theta": CubicSpline(self.knots, self._theta_tab, axis=0),
            "pstar": CubicSpline(self.knots, self._pstar_tab, axis=0),
            "L": CubicSpline(self.knots, self._L_tab, axis=0),
            "Lambda": CubicSpline(self.knots, self._Lambda_tab, axis=0),
        }
        self._sp["dtheta"] = self._sp["theta"].derivative()
        self._sp["dpstar"] = self._sp["pstar"].derivative()
        self._sp["dL"] = self._sp["L"].derivative()

    @property
    def ns(self) -> int:
        return self.h0.n - 1

    # branch data, batched over pf ------------------------------------
    def theta_star(self, pf):
        return self._sp["theta"](pf)

    def p_star(self, pf):
        return self._sp["pstar"](pf)

    def L(self, pf):
        return self._sp["L"](pf)

    def Lambda(self, pf):
        return self._sp["Lambda"](pf)

    def lambda_min(self) -> float:
        return float(min(np.linalg.eigvalsh(self._Lambda_tab[i]).min()
                         for i in range(len(self.knots))))

    def _check_pf(self, pf):
        lo, hi = self.pf_interval
        pad = 1e-9 * (hi - lo)
        if np.any(pf < lo - pad) or np.any(pf > hi + pad):
            bad = float(np.asarray(pf).ravel()[int(np.argmax((pf < lo - pad) | (pf > hi + pad)))])
            raise DomainError(f"fast action {bad:.6g} outside the chart window [{lo:.6g}, {hi:.6g}]")

    # coordinate maps --------------------------------------------------
    def to_chart(self, theta, p, t):
        """Phase arrays (M, n), (M, n), (M,) -> (x, y, Theta, I, t)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ns = self.ns
        pf = p[:, -1]
        self._check_pf(pf)
        se = np.sqrt(self.eps)
        dth = theta[:, :ns] - self.theta_star(pf)
        dth -= np.round(dth)  # nearest torus representative
        dp = p[:, :ns] - self.p_star(pf)
        Lm = self.L(pf)
        Linv = np.linalg.inv(Lm)
        a = np.einsum("mij,mj->mi", Linv, dth)
        b = np.einsum("mij,mj->mi", Lm, dp) / se
        Theta = self.gamma * theta[:, -1]
        I = pf / se
        return a + b, a - b, Theta, I, t

    def from_chart(self, x, y, Theta, I, t):
        """Chart arrays -> phase arrays (theta, p, t); inverse of to_chart."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        Theta = np.atleast_1d(np.asarray(Theta, dtype=float))
        I = np.atleast_1d(np.asarray(I, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        se = np.sqrt(self.eps)
        pf = se * I
        self._check_pf(pf)
        Lm = self.L(pf)
        Linv = np.linalg.inv(Lm)
        ths = self.theta_star(pf) + 0.5 * np.einsum("mij,mj->mi", Lm, x + y)
        ps = self.p_star(pf) + 0.5 * se * np.einsum("mij,mj->mi", Linv, x - y)
        theta = np.concatenate([ths, (Theta / self.gamma)[:, None]], axis=1)
        p = np.concatenate([ps, pf[:, None]], axis=1)
        return theta, p, t

    def pushforward(self, x, y, I, theta_dot, p_dot):
        """Chart velocities from phase velocities at the given chart point.

        Includes the terms from the pf-dependence of the chart (branch point
        and L both move with the fast action); derivatives are those of the
        interpolated chart, so the chain rule is exact.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        I = np.atleast_1d(np.asarray(I, dtype=float))
        ns = self.ns
        se = np.sqrt(self.eps)
        pf = se * I
        Lm = self.L(pf)
        Linv = np.linalg.inv(Lm)
        dLm = self._sp["dL"](pf)
        dLinv = -np.einsum("mij,mjk,mkl->mil", Linv, dLm, Linv)
        dth = 0.5 * np.einsum("mij,mj->mi", Lm, x + y)
        dp = 0.5 * se * np.einsum("mij,mj->mi", Linv, x - y)
        pfd = p_dot[:, -1]
        thsd = theta_dot[:, :ns] - self._sp["dtheta"](pf) * pfd[:, None]
        psd = p_dot[:, :ns] - self._sp["dpstar"](pf) * pfd[:, None]
        a = np.einsum("mij,mj->mi", Linv, thsd)
        b = np.einsum("mij,mj->mi", Lm, psd) / se
        cu = np.einsum("mij,mj->mi", dLinv, dth) + np.einsum("mij,mj->mi", dLm, dp) / se
        cs = np.einsum("mij,mj->mi", dLinv, dth) - np.einsum("mij,mj->mi", dLm, dp) / se
        xd = a + b + cu * pfd[:, None]
        yd = a - b + cs * pfd[:, None]
        Td = self.gamma * theta_dot[:, -1]
        Id = pfd / se
        td = np.ones_like(Id)
        return xd, yd, Td, Id, td


def build_chart(Z: TrigPolyHamiltonian, h0: IntegrablePart, theta_star, pf: float,
                eps: float, gamma: float | None = None, delta: float | None = None,
                pf_interval: tuple[float, float] | None = None, n_knots: int = 257,
                scale: float | None = None, lam: float | None = None) -> SlowFastChart:
    """Tabulate the branch through (theta_star, pf) and assemble the chart.

    Continuation runs outward from the anchor so the seed stays on one
    branch.  Every knot is verified: Hessian-pair window, L^2 A L^2 = B and
    the two Lambda identities to 1e-10, and min eig Lambda >= sqrt(lam/D).
    The angle scaling defaults to gamma = sqrt(delta) when ``delta`` is
    given, else 1.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma is None:
        gamma = float(np.sqrt(delta)) if delta is not None else 1.0
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    ns = h0.n - 1
    if ns < 1:
        raise ValueError("need at least one slow degree of freedom")
    if scale is None:
        scale = max(1.0, cr_norm(Z, 3, "coeff", h0.box))
    if pf_interval is None:
        lo, hi = h0.box[-1]
        w = hi - lo
        pf_interval = (lo + 0.05 * w, hi - 0.05 * w)
    lo, hi = map(float, pf_interval)
    if not lo <= pf <= hi:
        raise DomainError(f"anchor fast action {pf} outside the window [{lo}, {hi}]")
    if n_knots < 8:
        raise ValueError("n_knots must be at least 8")

    zs = _ZSlice(Z, h0)
    knots = np.linspace(lo, hi, n_knots)
    theta_tab = np.zeros((n_knots, ns))
    pstar_tab = np.zeros((n_knots, ns))
    L_tab = np.zeros((n_knots, ns, ns))
    Lam_tab = np.zeros((n_knots, ns, ns))
    lam_low = np.inf

    def solve_at(pfk, th_seed, ps_seed):
        ps, res = solve_p_star(h0, pfk, guess=ps_seed)
        if res > 1e-9:
            raise NonConvergenceError(f"slow-gradient solve residual {res:.2e} at pf={pfk:.4g}")
        p = np.concatenate([ps, [pfk]])
        th = _polish_branch(zs, th_seed, p, scale)
        A = -zs.hess(th, p)
        B = h0.hess(p)[:ns, :ns]
        wa = np.linalg.eigvalsh(A) / scale
        pair = HessianPair(pf=float(pfk), theta_star=th, p_star=ps, A=A, B=B,
                           scale=scale, lam=float(wa.min()), upper=float(wa.max()), D=h0.D)
        pair.validate()
        L, Lam = _solve_L(A, B)
        sample = ChartSample(pair=pair, L=L, Lambda=Lam)
        _verify_sample(sample)
        return sample

    anchor = solve_at(float(pf), theta_star, None)
    if lam is not None and anchor.pair.lam < lam * (1.0 - 1e-9):
        raise DegeneracyError(f"measured lam {anchor.pair.lam:.3e} below the requested {lam:.3e}")

    # continuation outward from the knot nearest the anchor, both directions
    i0 = int(np.argmin(np.abs(knots - pf)))
    for rng in (range(i0, n_knots), range(i0 - 1, -1, -1)):
        th_seed, ps_seed = anchor.pair.theta_star, anchor.pair.p_star
        for i in rng:
            s = solve_at(float(knots[i]), th_seed, ps_seed)
            th_seed, ps_seed = s.pair.theta_star, s.pair.p_star
            theta_tab[i] = s.pair.theta_star
            pstar_tab[i] = s.pair.p_star
            L_tab[i] = s.L
            Lam_tab[i] = s.Lambda
            lam_low = min(lam_low, s.pair.lam)

    return SlowFastChart(Z=Z, h0=h0, eps=float(eps), gamma=float(gamma),
                         pf_interval=(lo, hi), scale=float(scale), lam=float(lam_low),
                         anchor=anchor, knots=knots, _theta_tab=theta_tab,
                         _pstar_tab=pstar_tab, _L_tab=L_tab, _Lambda_tab=Lam_tab)


def to_chart(x: PhasePoint, chart: SlowFastChart):
    """Chart coordinates (x, y, Theta, I, t) of a single phase point."""
    xs, ys, Th, I, t = chart.to_chart(x.theta[None, :], x.p[None, :], [x.t])
    return xs[0], ys[0], float(Th[0]), float(I[0]), float(t[0])


def from_chart(coords, chart: SlowFastChart) -> PhasePoint:
    """Phase point of a single chart tuple (x, y, Theta, I, t)."""
    x, y, Th, I, t = coords
    theta, p, tt = chart.from_chart(np.atleast_1d(x)[None, :], np.atleast_1d(y)[None, :],
                                    [Th], [I], [t])
    return PhasePoint(theta[0], p[0], float(tt[0]))


def chart_field(chart: SlowFastChart, H) -> Callable:
    """Chart-coordinate vector field of a Hamiltonian evaluator.

    ``H`` needs grad_theta(theta, p, t) and grad_p(theta, p, t); the closure
    maps batched chart arrays to (xdot, ydot, Thetadot, Idot, tdot) with
    tdot identically 1.  Leaving the fast-action window raises DomainError.
    """
    def F(x, y, Theta, I, t):
        theta, p, tt = chart.from_chart(x, y, Theta, I, t)
        theta_dot = H.grad_p(theta, p, tt)
        p_dot = -H.grad_theta(theta, p, tt)
        return chart.pushforward(x, y, I, theta_dot, p_dot)

    return F


def chart_vector_field(chart: SlowFastChart, H, point):
    """Single-point convenience wrapper around chart_field."""
    x, y, Theta, I, t = point
    F = chart_field(chart, H)
    xd, yd, Td, Id, td = F(np.atleast_1d(x)[None, :], np.atleast_1d(y)[None, :],
                           [Theta], [I], [t])
    return xd[0], yd[0], float(Td[0]), float(Id[0]), float(td[0])


@dataclass
class IsolatingBlock:
    """Product block B^u x B^s x Omega^c in chart coordinates.

    The center block is periodic in Theta (period ``Theta_period``) and t,
    and bounded in I by ``I_range`` with cutoff margin ``sigma``.  After
    certification the measured rates are stored on the block.
    """

    r_u: float
    r_s: float
    I_range: tuple[float, float]
    sigma: float
    Theta_period: float = 1.0
    n_u: int = 1
    n_s: int = 1
    alpha: float | None = None
    m: float | None = None
    K_blk: float | None = None
    certified: bool = False

    def __post_init__(self):
        if self.r_u <= 0 or self.r_s <= 0 or self.sigma <= 0:
            raise ValueError("block radii and sigma must be positive")
        if self.I_range[1] <= self.I_range[0]:
            raise ValueError("empty I range")

    def chi(self, I):
        """Smoothstep cutoff: 1 on the I core, 0 beyond the sigma margin;
        the derivative is bounded by 1.5/sigma <= 2/sigma."""
        lo, hi = self.I_range
        d = np.maximum(lo - np.asarray(I, dtype=float), np.asarray(I, dtype=float) - hi)
        s = np.clip(1.0 - d / self.sigma, 0.0, 1.0)
        return s * s * (3.0 - 2.0 * s)

    def check(self) -> bool:
        if not self.certified or self.alpha is None or self.m is None:
            return False
        return 4.0 * self.m < self.alpha and self.K_blk <= 1.0 / np.sqrt(2.0) + 1e-12


def make_block(chart: SlowFastChart, r_u: float, r_s: float,
               pf_range: tuple[float, float], sigma_frac: float = 0.1) -> IsolatingBlock:
    """Block over a fast-action core expressed in chart units."""
    se = np.sqrt(chart.eps)
    lo, hi = pf_range
    clo, chi_ = chart.pf_interval
    if lo < clo or hi > chi_:
        raise DomainError("fast-action core exceeds the chart window")
    I_range = (lo / se, hi / se)
    sigma = sigma_frac * (I_range[1] - I_range[0])
    # the cutoff margin must stay inside the chart window
    sigma = min(sigma, 0.99 * min((lo - clo) / se, (chi_ - hi) / se))
    if sigma <= 0:
        raise DomainError("no room left for the cutoff margin inside the chart window")
    ns = chart.ns
    return IsolatingBlock(r_u=r_u, r_s=r_s, I_range=I_range, sigma=float(sigma),
                          Theta_period=chart.gamma, n_u=ns, n_s=ns)


@dataclass
class BlockCertificate:
    """Measured isolating-block data: boundary sign checks, hyperbolicity
    rate alpha, coupling budget m (including the 2*max|Idot|/sigma leak
    term), and K_blk = m/(alpha - 2m)."""

    alpha: float
    m: float
    K_blk: float
    passed: bool
    sign_ok: bool
    witnesses: list
    density: int
    h: float
    n_boundary: int
    n_interior: int
    block: IsolatingBlock


def _pack_eval(field, Zm, nu, nss):
    x = Zm[:, :nu]
    y = Zm[:, nu:nu + nss]
    Th = Zm[:, nu + nss]
    I = Zm[:, nu + nss + 1]
    t = Zm[:, nu + nss + 2]
    fx, fy, fT, fI, ft = field(x, y, Th, I, t)
    return np.concatenate([fx, fy, np.column_stack([fT, fI, ft])], axis=1)


def certify_block(field, block: IsolatingBlock, density: int = 8,
                  h: float = 1e-6, max_witnesses: int = 16) -> BlockCertificate:
    """Certify hyperbolic isolation of a block from sampled field data.

    Boundary conditions: the field points outward through the unstable
    shell (F_u . u > 0 on |u| = r_u) and inward through the stable shell
    (F_s . s < 0 on |s| = r_s).  On an interior grid, alpha is the worst
    symmetric-part eigenvalue of the uu block (and of minus the ss block)
    of a central finite-difference Jacobian, and m collects the largest
    off-block norms plus the center leak 2*max|Idot|/sigma.
    """
    if density < 8:
        raise ValueError("sampling density must be at least 8 per dimension")
    nu, nss = block.n_u, block.n_s
    if nu != 1 or nss != 1:
        raise ValueError("certification is implemented for one expanding and one "
                         "contracting direction")
    q = nu + nss + 3
    lin = lambda a, b, k, endpoint: np.linspace(a, b, k, endpoint=endpoint)
    s_ax = lin(-block.r_s, block.r_s, density, True)
    u_ax = lin(-block.r_u, block.r_u, density, True)
    Th_ax = lin(0.0, block.Theta_period, density, False)
    I_ax = lin(block.I_range[0], block.I_range[1], density, True)
    t_ax = lin(0.0, 1.0, density, False)

    def grid(*axes):
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    witnesses = []
    # unstable shell: u = +-r_u
    shell_u = grid(np.array([-block.r_u, block.r_u]), s_ax, Th_ax, I_ax, t_ax)
    Fu = _pack_eval(field, shell_u, nu, nss)[:, :nu]
    dot_u = np.sum(Fu * shell_u[:, :nu], axis=1)
    bad = np.flatnonzero(dot_u <= 0)
    for i in bad[:max_witnesses]:
        witnesses.append({"shell": "unstable", "point": shell_u[i].tolist(),
                          "dot": float(dot_u[i])})
    # stable shell: s = +-r_s
    shell_s = grid(u_ax, np.array([-block.r_s, block.r_s]), Th_ax, I_ax, t_ax)
    Fs = _pack_eval(field, shell_s, nu, nss)[:, nu:nu + nss]
    dot_s = np.sum(Fs * shell_s[:, nu:nu + nss], axis=1)
    bad = np.flatnonzero(dot_s >= 0)
    for i in bad[:max_witnesses]:
        witnesses.append({"shell": "stable", "point": shell_s[i].tolist(),
                          "dot": float(dot_s[i])})
    sign_ok = not witnesses

    interior = grid(u_ax, s_ax, Th_ax, I_ax, t_ax)
    M = interior.shape[0]
    J = np.zeros((M, q, q))
    for j in range(q):
        e = np.zeros(q)
        e[j] = h
        J[:, :, j] = (_pack_eval(field, interior + e, nu, nss)
                      - _pack_eval(field, interior - e, nu, nss)) / (2.0 * h)
    iu = slice(0, nu)
    isl = slice(nu, nu + nss)
    ic = slice(nu + nss, q)
    sym_uu = _sym(J[:, iu, iu])
    sym_ss = _sym(J[:, isl, isl])
    alpha = float(min(np.linalg.eigvalsh(sym_uu)[:, 0].min(),
                      (-np.linalg.eigvalsh(sym_ss)[:, -1]).min()))
    off = [J[:, iu, isl], J[:, iu, ic], J[:, isl, iu], J[:, isl, ic],
           J[:, ic, iu], J[:, ic, isl]]
    m_off = max(float(np.linalg.norm(b, ord=2, axis=(1, 2)).max()) for b in off)
    F_int = _pack_eval(field, interior, nu, nss)
    leak = 2.0 * float(np.max(np.abs(F_int[:, nu + nss + 1]))) / block.sigma
    m = m_off + leak
    K_blk = m / (alpha - 2.0 * m) if alpha > 2.0 * m else np.inf
    passed = sign_ok and 4.0 * m < alpha and K_blk <= 1.0 / np.sqrt(2.0) + 1e-12
    block.alpha, block.m, block.K_blk = alpha, m, float(K_blk)
    block.certified = bool(passed)
    return BlockCertificate(alpha=alpha, m=m, K_blk=float(K_blk), passed=bool(passed),
                            sign_ok=sign_ok, witnesses=witnesses, density=density, h=h,
                            n_boundary=shell_u.shape[0] + shell_s.shape[0],
                            n_interior=M, block=block)


def extended_field(field, block: IsolatingBlock) -> Callable:
    """Field with the fast-action drift cut off outside the I core; orbits
    of the extension cannot leave the center domain."""
    def F(x, y, Theta, I, t):
        fx, fy, fT, fI, ft = field(x, y, Theta, I, t)
        return fx, fy, fT, fI * block.chi(I), ft

    return F


# ---------------------------------------------------------------------------
# cylinder graphs


def _flow_states(field, state0, T, rtol, atol):
    """Integrate the batched chart field; state rows are (x, y, Theta, I, t)."""
    M, q = state0.shape
    nu = (q - 3) // 2

    def rhs(tau, flat):
        st = flat.reshape(M, q)
        return _pack_eval(field, st, nu, nu).ravel()

    sol = solve_ivp(rhs, (0.0, T), state0.ravel(), method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise NonConvergenceError(f"chart flow integration failed: {sol.message}")
    return sol.y[:, -1].reshape(M, q)


def _endpoint_map(field, x0, y0, c_nodes, T, rtol, atol):
    """Flow (x0, y0, c) for time T; returns the full final states."""
    M = c_nodes.shape[0]
    state0 = np.column_stack([x0, y0, c_nodes])
    return _flow_states(field, state0, T, rtol, atol)


def _bisect_coordinate(field, other, c_nodes, r, T, sweeps, rtol, atol, expanding):
    """Bracketed bisection on the escape side of one shooting coordinate.

    ``expanding`` True solves for x with y = other fixed (forward time T);
    False solves for y with x = other (backward time -T).
    """
    M = c_nodes.shape[0]
    lo = np.full(M, -0.95 * r)
    hi = np.full(M, 0.95 * r)

    def endpoint(v):
        if expanding:
            st = _endpoint_map(field, v, other, c_nodes, T, rtol, atol)
            return st[:, 0]
        st = _endpoint_map(field, other, v, c_nodes, -T, rtol, atol)
        return st[:, 1]

    f_lo = endpoint(lo)
    f_hi = endpoint(hi)
    bad = np.flatnonzero((f_lo >= 0) | (f_hi <= 0))
    if bad.size:
        i = int(bad[0])
        side = "expanding" if expanding else "contracting"
        raise BlockTooTightError(
            f"no sign change across the {side} bracket at node {i} "
            f"(c = {c_nodes[i].tolist()}, endpoints {f_lo[i]:.3e}, {f_hi[i]:.3e})")
    for _ in range(sweeps):
        mid = 0.5 * (lo + hi)
        fm = endpoint(mid)
        take_lo = fm < 0
        lo = np.where(take_lo, mid, lo)
        hi = np.where(take_lo, hi, mid)
    return 0.5 * (lo + hi)


def _shoot_newton(field, x0, y0, c_nodes, T, r_u, r_s, rtol, atol,
                  max_iter=8, tol_frac=1e-10, h_frac=1e-7):
    """Newton on the two-point boundary map G = (x(+T), y(-T)).

    Finite-difference 2x2 Jacobian per node, all perturbations batched into
    one forward and one backward integration per iteration.
    """
    M = c_nodes.shape[0]
    x = x0.copy()
    y = y0.copy()
    hx = h_frac * r_u
    hy = h_frac * r_s
    tol = tol_frac * max(r_u, r_s)
    iters = 0
    for it in range(max_iter):
        Xs = np.concatenate([x, x + hx, x])
        Ys = np.concatenate([y, y, y + hy])
        Cs = np.vstack([c_nodes, c_nodes, c_nodes])
        fwd = _flow_states(field, np.column_stack([Xs, Ys, Cs]), T, rtol, atol)[:, 0]
        bwd = _flow_states(field, np.column_stack([Xs, Ys, Cs]), -T, rtol, atol)[:, 1]
        Gx, Gx_dx, Gx_dy = fwd[:M], fwd[M:2 * M], fwd[2 * M:]
        Gy, Gy_dx, Gy_dy = bwd[:M], bwd[M:2 * M], bwd[2 * M:]
        res = max(float(np.max(np.abs(Gx))), float(np.max(np.abs(Gy))))
        iters = it
        if res < tol:
            break
        Jxx = (Gx_dx - Gx) / hx
        Jxy = (Gx_dy - Gx) / hy
        Jyx = (Gy_dx - Gy) / hx
        Jyy = (Gy_dy - Gy) / hy
        det = Jxx * Jyy - Jxy * Jyx
        if np.any(np.abs(det) < 1e-300):
            raise NonConvergenceError("singular shooting Jacobian")
        dx = (Jyy * Gx - Jxy * Gy) / det
        dy = (Jxx * Gy - Jyx * Gx) / det
        cap = 0.2 * max(r_u, r_s)
        dx = np.clip(dx, -cap, cap)
        dy = np.clip(dy, -cap, cap)
        x = x - dx
        y = y - dy
        inside = (np.abs(x) < r_u) & (np.abs(y) < r_s)
        if not np.all(inside):
            i = int(np.flatnonzero(~inside)[0])
            raise BlockTooTightError(
                f"shooting iterate left the block at node {i} "
                f"(x = {x[i]:.3e}, y = {y[i]:.3e})")
    else:
        raise NonConvergenceError(
            f"shooting Newton stalled at residual {res:.3e} (tol {tol:.3e})")
    return x, y, iters, res


def _fft_derivative(values, axis, period):
    k = np.fft.fftfreq(values.shape[axis], d=period / values.shape[axis])
    shape = [1] * values.ndim
    shape[axis] = values.shape[axis]
    mult = (2j * np.pi * k).reshape(shape)
    return np.real(np.fft.ifft(mult * np.fft.fft(values, axis=axis), axis=axis))


@dataclass
class CylinderGraph:
    """Invariant graph over (theta^f, p^f, t): chart heights (x, y), phase
    values (Theta_s, P_s), and the per-node invariance residual (distance
    between the field and the graph tangent, spectral derivatives in the
    periodic directions and a cubic spline along p^f)."""

    theta_f: np.ndarray
    pf: np.ndarray
    t: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Theta_s: np.ndarray
    P_s: np.ndarray
    residual: np.ndarray
    chart: SlowFastChart
    block: IsolatingBlock
    meta: dict

    def lipschitz(self) -> dict:
        """Measured slopes of the continuous slow-angle representative."""
        th = self.meta["Theta_s_continuous"]
        out = {}
        if len(self.pf) > 1:
            d = np.diff(th, axis=1) / np.diff(self.pf)[None, :, None, None]
            out["pf"] = float(np.max(np.abs(d)))
        else:
            out["pf"] = 0.0
        dth = (np.roll(th, -1, axis=0) - th) * self.theta_f.size
        dt = (np.roll(th, -1, axis=2) - th) * self.t.size
        out["angle"] = float(max(np.max(np.abs(dth)), np.max(np.abs(dt))))
        return out

    def max_offsets(self) -> tuple[float, float]:
        """Largest distances of the graph from the branch point, in slow
        angle and slow action."""
        tstar = self.chart.theta_star(self.pf)[None, :, None, :]
        pstar = self.chart.p_star(self.pf)[None, :, None, :]
        dth = self.meta["Theta_s_continuous"] - tstar
        dp = self.P_s - pstar
        return float(np.max(np.abs(dth))), float(np.max(np.abs(dp)))


def compute_cylinder(chart: SlowFastChart, block: IsolatingBlock, field,
                     grid_shape=(32, 32, 8), pf_range=None, T_stay=None,
                     bisect_sweeps: int = 8, newton_max: int = 8,
                     doubling_nodes: int = 32, rtol: float = 1e-10) -> CylinderGraph:
    """Shooting solve of the invariant cylinder over a certified block.

    Per node (Theta, I, t): bisection finds the chart height whose orbit
    escapes neither side of the expanding bracket within T_stay/2 (and the
    backward analogue for the contracting height), Newton then drives the
    two-point boundary map (x(+T_stay), y(-T_stay)) to zero.  A subsample is
    re-solved with 2*T_stay and the largest shift is recorded as the
    convergence check.
    """
    if not block.certified:
        raise ValueError("the block must be certified before computing a cylinder")
    ns = chart.ns
    if ns != 1:
        raise ValueError("the shooting solver is implemented for one slow degree "
                         "of freedom")
    Nf, Np, Nt = grid_shape
    se = np.sqrt(chart.eps)
    if pf_range is None:
        pf_range = (block.I_range[0] * se, block.I_range[1] * se)
    theta_f = np.linspace(0.0, 1.0, Nf, endpoint=False)
    pf = np.linspace(pf_range[0], pf_range[1], Np)
    t_ax = np.linspace(0.0, 1.0, Nt, endpoint=False)
    mesh = np.meshgrid(theta_f, pf, t_ax, indexing="ij")
    c_nodes = np.stack([chart.gamma * mesh[0].ravel(),
                        mesh[1].ravel() / se,
                        mesh[2].ravel()], axis=1)
    M = c_nodes.shape[0]

    rate = se * chart.lambda_min()
    if rate <= 0:
        raise DegeneracyError("non-positive hyperbolic rate")
    if T_stay is None:
        T_stay = 6.0 / rate
    T_b = 0.5 * T_stay
    coarse = (1e-6, 1e-9)
    fine = (rtol, 1e-12)

    x = np.zeros(M)
    y = np.zeros(M)
    x = _bisect_coordinate(field, y, c_nodes, block.r_u, T_b, bisect_sweeps,
                           *coarse, expanding=True)
    y = _bisect_coordinate(field, x, c_nodes, block.r_s, T_b, bisect_sweeps,
                           *coarse, expanding=False)
    x, y, iters, res = _shoot_newton(field, x, y, c_nodes, T_stay, block.r_u,
                                     block.r_s, *fine, max_iter=newton_max)

    doubling_shift = 0.0
    if doubling_nodes > 0:
        stride = max(1, M // doubling_nodes)
        idx = np.arange(0, M, stride)
        # the boundary map amplifies by exp(rate T); at 2 T_stay the target
        # must sit above the integrator noise floor without losing accuracy
        # in the shooting heights themselves
        x2, y2, _, _ = _shoot_newton(field, x[idx], y[idx], c_nodes[idx],
                                     2.0 * T_stay, block.r_u, block.r_s, *fine,
                                     max_iter=newton_max, tol_frac=1e-8)
        doubling_shift = float(max(np.max(np.abs(x2 - x[idx])),
                                   np.max(np.abs(y2 - y[idx]))))

    X = x.reshape(Nf, Np, Nt)[..., None]
    Y = y.reshape(Nf, Np, Nt)[..., None]

    # invariance residual with spectral tangents
    xa = x[:, None]
    ya = y[:, None]
    fx, fy, fT, fI, ft = field(xa, ya, c_nodes[:, 0], c_nodes[:, 1], c_nodes[:, 2])
    FX = fx[:, 0].reshape(Nf, Np, Nt)
    FY = fy[:, 0].reshape(Nf, Np, Nt)
    FT = fT.reshape(Nf, Np, Nt)
    FI = fI.reshape(Nf, Np, Nt)
    Xg = X[..., 0]
    Yg = Y[..., 0]
    # d/dTheta = (1/gamma) d/dtheta_f on the periodic axis
    dX_dT = _fft_derivative(Xg, 0, 1.0) / chart.gamma
    dY_dT = _fft_derivative(Yg, 0, 1.0) / chart.gamma
    dX_dt = _fft_derivative(Xg, 2, 1.0)
    dY_dt = _fft_derivative(Yg, 2, 1.0)
    if Np > 1:
        dX_dI = CubicSpline(pf, Xg, axis=1).derivative()(pf) * se
        dY_dI = CubicSpline(pf, Yg, axis=1).derivative()(pf) * se
    else:
        dX_dI = np.zeros_like(Xg)
        dY_dI = np.zeros_like(Yg)
    res_u = FX - (dX_dT * FT + dX_dI * FI + dX_dt)
    res_s = FY - (dY_dT * FT + dY_dI * FI + dY_dt)
    residual = np.maximum(np.abs(res_u), np.abs(res_s))

    theta_ph, p_ph, _ = chart.from_chart(xa, ya, c_nodes[:, 0], c_nodes[:, 1],
                                         c_nodes[:, 2])
    th_cont = theta_ph[:, :ns].reshape(Nf, Np, Nt, ns)
    Theta_s = np.mod(th_cont, 1.0)
    P_s = p_ph[:, :ns].reshape(Nf, Np, Nt, ns)

    meta = {"T_stay": float(T_stay), "rate": float(rate),
            "newton_iterations": int(iters), "newton_residual": float(res),
            "doubling_shift": doubling_shift, "eps": chart.eps,
            "gamma": chart.gamma, "Theta_s_continuous": th_cont,
            "max_height": float(max(np.max(np.abs(x)), np.max(np.abs(y))))}
    return CylinderGraph(theta_f=theta_f, pf=pf, t=t_ax, X=X, Y=Y,
                         Theta_s=Theta_s, P_s=P_s, residual=residual,
                         chart=chart, block=block, meta=meta)


def _graph_interp(cyl: CylinderGraph, thf, pfv, tv):
    """Trilinear graph heights, periodic in theta^f and t, clamped in p^f."""
    thf = np.mod(np.asarray(thf, dtype=float), 1.0)
    tv = np.mod(np.asarray(tv, dtype=float), 1.0)
    pfv = np.clip(np.asarray(pfv, dtype=float), cyl.pf[0], cyl.pf[-1])
    Nf, Np, Nt = cyl.X.shape[:3]

    def axis_weights(vals, grid, periodic):
        if periodic:
            stepw = grid[1] - grid[0] if len(grid) > 1 else 1.0
            f = vals / stepw
            i0 = np.floor(f).astype(int) % len(grid)
            w = f - np.floor(f)
            i1 = (i0 + 1) % len(grid)
        else:
            if len(grid) == 1:
                return np.zeros_like(vals, dtype=int), np.zeros_like(vals, dtype=int), np.zeros_like(vals)
            i0 = np.clip(np.searchsorted(grid, vals) - 1, 0, len(grid) - 2)
            w = (vals - grid[i0]) / (grid[i0 + 1] - grid[i0])
            i1 = i0 + 1
        return i0, i1, w

    ia, ib, wa = axis_weights(thf, cyl.theta_f, True)
    ja, jb, wb = axis_weights(pfv, cyl.pf, False)
    ka, kb, wc = axis_weights(tv, cyl.t, True)

    def gather(G):
        out = 0.0
        for (i, wi) in ((ia, 1 - wa), (ib, wa)):
            for (j, wj) in ((ja, 1 - wb), (jb, wb)):
                for (k, wk) in ((ka, 1 - wc), (kb, wc)):
                    out = out + (wi * wj * wk)[:, None] * G[i, j, k]
        return out

    return gather(cyl.X), gather(cyl.Y)


def shadowing_check(cyl: CylinderGraph, field, T: float, n_orbits: int = 8,
                    seed: int = 0, rtol: float = 1e-10) -> float:
    """Largest drift of on-graph orbits away from the graph after time T.

    Spot check of maximality: starts at random grid nodes, flows the chart
    field, and compares the evolved heights with the interpolated graph at
    the evolved center coordinates.
    """
    rng = np.random.default_rng(seed)
    Nf, Np, Nt = cyl.X.shape[:3]
    M = Nf * Np * Nt
    idx = rng.choice(M, size=min(n_orbits, M), replace=False)
    ii, jj, kk = np.unravel_index(idx, (Nf, Np, Nt))
    se = np.sqrt(cyl.chart.eps)
    c0 = np.stack([cyl.chart.gamma * cyl.theta_f[ii], cyl.pf[jj] / se,
                   cyl.t[kk]], axis=1)
    x0 = cyl.X[ii, jj, kk, 0]
    y0 = cyl.Y[ii, jj, kk, 0]
    st = _flow_states(field, np.column_stack([x0, y0, c0]), T, rtol, 1e-12)
    xg, yg = _graph_interp(cyl, st[:, 2] / cyl.chart.gamma, se * st[:, 3], st[:, 4])
    return float(max(np.max(np.abs(st[:, 0] - xg[:, 0])),
                     np.max(np.abs(st[:, 1] - yg[:, 0]))))


def suggest_block_radius(lam: float, delta: float, eps: float,
                         eps0: float = 1.0) -> tuple[float, float, float]:
    """Admissible shooting-radius window and its log midpoint.

    The lower end keeps the cylinder heights inside the block, the upper
    end keeps the block inside the chart's validity region; between them
    the choice is free and the log midpoint balances both margins.  eps0 is
    the reference threshold of the construction; the window closes when the
    perturbation size delta or eps itself grows too large against it.
    """
    lo = eps0 ** (-0.25) * (lam ** (-0.75) * delta + lam ** (-0.5) * np.sqrt(eps))
    hi = 2.0 * eps0 ** 0.25 * lam ** 1.25
    if lo >= hi:
        raise ValueError(f"empty radius window [{lo:.3e}, {hi:.3e}]; "
                         "perturbation too large for this branch")
    return float(lo), float(hi), float(np.sqrt(lo * hi))
