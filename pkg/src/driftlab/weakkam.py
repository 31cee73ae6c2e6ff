"""Discrete weak-KAM and Aubry-Mather tools on angle grids.

Conventions.  The Hamiltonian is convex in p and the Lagrangian is its
Legendre transform L(t, theta, v) = sup_p [p.v - H(t, theta, p)].  A kernel
entry G_c(x, x') is the minimal action of int_0^1 (L - c.gamma') dt over
time-1 curves from x to x', discretized as piecewise-linear paths with M
interior knots and two-point Gauss quadrature per segment.  The c-term
integrates exactly to -c.(lift displacement), so one set of knot
minimizations serves every cohomology class; kernels rebuild for a new c by
re-taking the minimum over stored lift tables.

The Lax-Oleinik operator is (T_c u)(x') = min_x [u(x) + G_c(x, x')]; weak
KAM solutions solve T_c u = u - alpha(c), and for the integrable kernel
alpha(c) = H0(c).  Value iteration runs on iterated min-plus squares of the
kernel (still value iteration, on the 2^k-step kernel), with alpha read off
the two-sided sandwich -alpha in [min(Tu - u), max(Tu - u)].

The double cover doubles the period of one slow angle slot and doubles the
matching mode indices, leaving the Hamiltonian pointwise equal to its
pullback; momenta and cohomology coefficients are unchanged, and the
critical values agree, alpha_cover(c) = alpha(c).  Aubry sets upstairs are
the full preimages of the sets downstairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import IntegrablePart, NonConvergenceError, TrigPolyHamiltonian


class KernelError(NonConvergenceError):
    """An inner path minimization failed to converge."""


class BarrierError(NonConvergenceError):
    """Min-plus powers of G + alpha diverge (alpha mis-estimated)."""


class ModificationError(RuntimeError):
    """A modified potential violates one of its construction invariants."""


_GAUSS_LAMBDA = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))
_GAUSS_WEIGHT = (0.5, 0.5)


class QuadraticLagrangian:
    """L(t, theta, v) = 0.5 v.mass.v - V(t, theta) with exact derivatives."""

    def __init__(self, V, dV, d2V, dim: int = 1, mass=1.0):
        self.dim = dim
        self.V, self.dV, self.d2V = V, dV, d2V
        m = np.asarray(mass, dtype=float)
        self.mass = m * np.eye(dim) if m.ndim == 0 else m

    def value(self, t, theta, v):
        kin = 0.5 * np.einsum("...i,ij,...j->...", v, self.mass, v)
        return kin - self.V(t, theta)

    def dtheta(self, t, theta, v):
        return -self.dV(t, theta)

    def dv(self, t, theta, v):
        return np.einsum("ij,...j->...i", self.mass, v)

    def second(self, t, theta, v):
        """(L_theta_theta, L_theta_v, L_vv), batched over leading axes."""
        shape = theta.shape[:-1]
        Ltt = -self.d2V(t, theta)
        Ltv = np.zeros(shape + (self.dim, self.dim))
        Lvv = np.broadcast_to(self.mass, shape + (self.dim, self.dim))
        return Ltt, Ltv, Lvv


def potential_lagrangian(V: Callable, dim: int = 1, mass=1.0,
                         h: float = 1e-6) -> QuadraticLagrangian:
    """Quadratic Lagrangian from a potential callable V(t, theta); the
    theta-derivatives are central finite differences per component."""
    def dV(t, theta):
        out = np.zeros_like(theta)
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h
            out[..., j] = (V(t, theta + e) - V(t, theta - e)) / (2 * h)
        return out

    def d2V(t, theta):
        shape = theta.shape[:-1]
        out = np.zeros(shape + (dim, dim))
        for j in range(dim):
            ej = np.zeros(dim)
            ej[j] = h
            for k in range(j, dim):
                ek = np.zeros(dim)
                ek[k] = h
                val = (V(t, theta + ej + ek) - V(t, theta + ej - ek)
                       - V(t, theta - ej + ek) + V(t, theta - ej - ek)) / (4 * h * h)
                out[..., j, k] = val
                out[..., k, j] = val
        return out

    return QuadraticLagrangian(V, dV, d2V, dim=dim, mass=mass)


class LegendreLagrangian:
    """Generic Lagrangian through a batched Legendre transform of H.

    H needs value/grad_theta/grad_p/hess_pp; first derivatives of L come
    from the envelope identities dL/dv = p*, dL/dtheta = -dH/dtheta(p*),
    and second derivatives from finite differences of those.
    """

    def __init__(self, H, dim: int, h: float = 1e-6, tol: float = 1e-12,
                 max_iter: int = 60):
        self.H, self.dim, self.h = H, dim, h
        self.tol, self.max_iter = tol, max_iter

    def _pstar(self, t, theta, v):
        p = np.array(v, dtype=float, copy=True)
        for _ in range(self.max_iter):
            g = self.H.grad_p(theta, p, t) - v
            if float(np.max(np.abs(g))) < self.tol:
                return p
            Hpp = self.H.hess_pp(theta, p, t)
            p = p - np.linalg.solve(Hpp, g)
        raise KernelError("Legendre transform did not converge")

    def value(self, t, theta, v):
        p = self._pstar(t, theta, v)
        return np.einsum("...i,...i->...", p, v) - self.H.value(theta, p, t)

    def dtheta(self, t, theta, v):
        p = self._pstar(t, theta, v)
        return -self.H.grad_theta(theta, p, t)

    def dv(self, t, theta, v):
        return self._pstar(t, theta, v)

    def second(self, t, theta, v):
        d, h = self.dim, self.h
        shape = theta.shape[:-1]
        Ltt = np.zeros(shape + (d, d))
        Ltv = np.zeros(shape + (d, d))
        Lvv = np.zeros(shape + (d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            Ltt[..., :, j] = (self.dtheta(t, theta + e, v)
                              - self.dtheta(t, theta - e, v)) / (2 * h)
            Ltv[..., :, j] = (self.dtheta(t, theta, v + e)
                              - self.dtheta(t, theta, v - e)) / (2 * h)
            Lvv[..., :, j] = (self.dv(t, theta, v + e)
                              - self.dv(t, theta, v - e)) / (2 * h)
        return Ltt, Ltv, Lvv


def _block_thomas(diag, lower, upper, rhs):
    """Solve the block-tridiagonal system; diag (P,M,d,d), lower/upper
    (P,M-1,d,d), rhs (P,M,d)."""
    P, M, d = rhs.shape
    cp = np.zeros((P, M - 1, d, d)) if M > 1 else None
    gp = np.zeros((P, M, d))
    D = diag[:, 0]
    gp[:, 0] = np.linalg.solve(D, rhs[:, 0][..., None])[..., 0]
    if M > 1:
        cp[:, 0] = np.linalg.solve(D, upper[:, 0])
    for i in range(1, M):
        D = diag[:, i] - lower[:, i - 1] @ cp[:, i - 1] if M > 1 else diag[:, i]
        r = rhs[:, i] - np.einsum("pij,pj->pi", lower[:, i - 1], gp[:, i - 1])
        gp[:, i] = np.linalg.solve(D, r[..., None])[..., 0]
        if i < M - 1:
            cp[:, i] = np.linalg.solve(D, upper[:, i])
    out = np.zeros((P, M, d))
    out[:, -1] = gp[:, -1]
    for i in range(M - 2, -1, -1):
        out[:, i] = gp[:, i] - np.einsum("pij,pj->pi", cp[:, i], out[:, i + 1])
    return out


def _path_points(x0, disp, xi, M):
    P, d = x0.shape
    pts = np.zeros((P, M + 2, d))
    pts[:, 0] = x0
    pts[:, -1] = x0 + disp
    if M:
        pts[:, 1:-1] = xi
    return pts


def _action_value(lag, x0, disp, xi, M):
    dt = 1.0 / (M + 1)
    pts = _path_points(x0, disp, xi, M)
    v = (pts[:, 1:] - pts[:, :-1]) / dt
    S = np.zeros(x0.shape[0])
    for i in range(M + 1):
        for lam, w in zip(_GAUSS_LAMBDA, _GAUSS_WEIGHT):
            gam = pts[:, i] + lam * (pts[:, i + 1] - pts[:, i])
            tq = (i + lam) * dt
            S += dt * w * lag.value(tq, gam, v[:, i])
    return S


def _action_grad_hess(lag, x0, disp, xi, M):
    dt = 1.0 / (M + 1)
    P, d = x0.shape
    pts = _path_points(x0, disp, xi, M)
    v = (pts[:, 1:] - pts[:, :-1]) / dt
    grad = np.zeros((P, M, d))
    diag = np.zeros((P, M, d, d))
    off = np.zeros((P, max(M - 1, 0), d, d))
    for i in range(M + 1):
        for lam, w in zip(_GAUSS_LAMBDA, _GAUSS_WEIGHT):
            gam = pts[:, i] + lam * (pts[:, i + 1] - pts[:, i])
            tq = (i + lam) * dt
            Lt = lag.dtheta(tq, gam, v[:, i])
            Lv = lag.dv(tq, gam, v[:, i])
            Ltt, Ltv, Lvv = lag.second(tq, gam, v[:, i])
            # segment i couples knots i-1 (role a) and i (role b) in xi index
            if i >= 1:  # derivative w.r.t. the left knot xi[i-1]
                grad[:, i - 1] += dt * w * (1 - lam) * Lt - w * Lv
                diag[:, i - 1] += (dt * w * (1 - lam) ** 2 * Ltt
                                   - w * (1 - lam) * (Ltv + np.swapaxes(Ltv, -1, -2))
                                   + (w / dt) * Lvv)
            if i <= M - 1:  # derivative w.r.t. the right knot xi[i]
                grad[:, i] += dt * w * lam * Lt + w * Lv
                diag[:, i] += (dt * w * lam ** 2 * Ltt
                               + w * lam * (Ltv + np.swapaxes(Ltv, -1, -2))
                               + (w / dt) * Lvv)
            if 1 <= i <= M - 1:  # coupling xi[i-1] -> xi[i]
                off[:, i - 1] += (dt * w * lam * (1 - lam) * Ltt
                                  + w * (1 - lam) * Ltv
                                  - w * lam * np.swapaxes(Ltv, -1, -2)
                                  - (w / dt) * Lvv)
    return grad, diag, off


def _minimize_paths(lag, x0, disp, M, tol=1e-11, max_iter=40):
    """Minimal discrete actions over interior knots, batched.

    Newton on the knot gradient with a block-tridiagonal solve; the
    straight chord seeds it.  Returns the per-problem minimal action.
    """
    P, d = x0.shape
    if M == 0:
        return _action_value(lag, x0, disp, np.zeros((P, 0, d)), 0)
    frac = (np.arange(1, M + 1) / (M + 1))[None, :, None]
    xi = x0[:, None, :] + frac * disp[:, None, :]
    scale = max(1.0, float(np.max(np.abs(disp))))
    # Levenberg damping keeps steps downhill where the path Hessian loses
    # kinetic dominance (steep potentials, long displacements)
    mu = np.zeros(P)
    S = _action_value(lag, x0, disp, xi, M)
    kin = 2.0 * (M + 1)
    eye = np.eye(d)
    for _ in range(max_iter):
        grad, diag, off = _action_grad_hess(lag, x0, disp, xi, M)
        gmax = np.max(np.abs(grad), axis=(1, 2))
        if float(gmax.max()) < tol * scale:
            break
        damp = diag + (mu * kin)[:, None, None, None] * eye
        step = _block_thomas(damp, np.swapaxes(off, -1, -2), off, grad)
        step = np.clip(step, -0.45, 0.45)
        xi_try = xi - step
        S_try = _action_value(lag, x0, disp, xi_try, M)
        better = S_try <= S + 1e-14 * np.maximum(1.0, np.abs(S))
        xi = np.where(better[:, None, None], xi_try, xi)
        S = np.where(better, S_try, S)
        mu = np.where(better, mu / 3.0, np.maximum(mu * 8.0, 1e-3))
    else:
        bad = gmax >= tol * scale
        # accept stationary-enough survivors, report the worst genuine stall
        if float(np.max(gmax[bad])) > 1e3 * tol * scale:
            i = int(np.argmax(np.where(bad, gmax, 0.0)))
            raise KernelError(
                f"path minimization stalled at x={x0[i].tolist()}, "
                f"displacement {disp[i].tolist()}")
    return _action_value(lag, x0, disp, xi, M)


@dataclass
class ActionKernel:
    """Dense matrix of one-period minimal actions on an angle grid.

    ``S_lifts[l, i, j]`` is the c-free minimal action from node i to node j
    along the lift labeled by ``m_combos[l]``; ``G`` is the c-adjusted
    minimum over lifts.  Entries beyond the velocity cap are +inf.
    """

    X: np.ndarray
    shape: tuple
    periods: np.ndarray
    c: np.ndarray
    G: np.ndarray
    S_lifts: np.ndarray
    offs: np.ndarray
    m_combos: np.ndarray
    v_cap: float
    M: int
    ktol: float
    lagrangian: object

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def displacements(self):
        """(n_lifts, Nn, Nn, d) lift displacements matching S_lifts."""
        return (self.offs[None, :, :, :]
                + self.m_combos[:, None, None, :] * self.periods)

    def assemble(self, c) -> np.ndarray:
        c = np.atleast_1d(np.asarray(c, dtype=float))
        disp = self.displacements()
        vals = self.S_lifts - np.einsum("lijd,d->lij", disp, c)
        return np.min(vals, axis=0)

    def with_c(self, c) -> "ActionKernel":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return ActionKernel(X=self.X, shape=self.shape, periods=self.periods,
                            c=c, G=self.assemble(c), S_lifts=self.S_lifts,
                            offs=self.offs, m_combos=self.m_combos,
                            v_cap=self.v_cap, M=self.M, ktol=self.ktol,
                            lagrangian=self.lagrangian)

    def constant_curve_action(self, i: int) -> float:
        """Quadrature action of the constant competitor at node i (with the
        c-term, whose displacement is zero)."""
        x = self.X[i][None, :]
        return float(_action_value(self.lagrangian, x, np.zeros_like(x),
                                   np.zeros((1, 0, self.dim)), 0)[0])

    def interpolate(self, x, xp) -> float:
        """Periodic multilinear interpolation of G at off-grid points."""
        def locate(v):
            idx = []
            wts = []
            for k in range(self.dim):
                Nk = self.shape[k]
                f = (v[k] % self.periods[k]) / self.periods[k] * Nk
                i0 = int(np.floor(f)) % Nk
                idx.append((i0, (i0 + 1) % Nk))
                wts.append(f - np.floor(f))
            return idx, wts

        (ia, wa) = locate(np.atleast_1d(np.asarray(x, dtype=float)))
        (ib, wb) = locate(np.atleast_1d(np.asarray(xp, dtype=float)))

        def flat(multi):
            out = 0
            for k in range(self.dim):
                out = out * self.shape[k] + multi[k]
            return out

        total = 0.0
        for combo_a in np.ndindex(*(2,) * self.dim):
            for combo_b in np.ndindex(*(2,) * self.dim):
                w = 1.0
                ma, mb = [], []
                for k in range(self.dim):
                    w *= wa[k] if combo_a[k] else (1 - wa[k])
                    ma.append(ia[k][combo_a[k]])
                    w *= wb[k] if combo_b[k] else (1 - wb[k])
                    mb.append(ib[k][combo_b[k]])
                total += w * self.G[flat(ma), flat(mb)]
        return total


def _grid(shape, periods):
    axes = [np.arange(shape[k]) * periods[k] / shape[k] for k in range(len(shape))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def action_kernel(lag, c=0.0, N: int = 128, M: int = 4, period=1.0,
                  v_cap: float | None = None, tol: float = 1e-11,
                  max_iter: int = 40) -> ActionKernel:
    """Build the dense kernel of one-period minimal actions.

    ``N`` nodes per dimension over [0, period); ``M`` interior knots per
    curve.  Lift displacements beyond ``v_cap`` are pruned to +inf (the cap
    is recorded; superlinearity makes far lifts irrelevant).
    """
    d = lag.dim
    shape = (N,) * d
    periods = np.broadcast_to(np.asarray(period, dtype=float), (d,)).copy()
    c = np.broadcast_to(np.atleast_1d(np.asarray(c, dtype=float)), (d,)).copy()
    if v_cap is None:
        v_cap = float(1.75 * np.max(periods) + 1.25 * np.max(np.abs(c)))
    X = _grid(shape, periods)
    Nn = X.shape[0]
    diff = X[None, :, :] - X[:, None, :]
    offs = np.mod(diff + periods / 2, periods) - periods / 2
    mmax = [int(np.ceil((v_cap - 0.49 * periods[k]) / periods[k])) for k in range(d)]
    ranges = [np.arange(-m, m + 1) for m in mmax]
    mesh = np.meshgrid(*ranges, indexing="ij")
    m_combos = np.stack([m.ravel() for m in mesh], axis=1).astype(float)
    n_l = m_combos.shape[0]
    if n_l * Nn * Nn > 8e7:
        raise ValueError("dense kernel too large; lower N or v_cap, or compose "
                         "a product of one-dimensional kernels")
    S_lifts = np.full((n_l, Nn, Nn), np.inf)
    starts = np.repeat(X, Nn, axis=0)
    for l in range(n_l):
        disp = (offs + m_combos[l] * periods).reshape(-1, d)
        keep = np.all(np.abs(disp) <= v_cap + 1e-12, axis=1)
        if not np.any(keep):
            continue
        S = _minimize_paths(lag, starts[keep], disp[keep], M,
                            tol=tol, max_iter=max_iter)
        flat = np.full(Nn * Nn, np.inf)
        flat[keep] = S
        S_lifts[l] = flat.reshape(Nn, Nn)
    ktol = float(np.max(periods / N) ** 2)
    kern = ActionKernel(X=X, shape=shape, periods=periods, c=c,
                        G=np.zeros((Nn, Nn)), S_lifts=S_lifts, offs=offs,
                        m_combos=m_combos, v_cap=float(v_cap), M=M, ktol=ktol,
                        lagrangian=lag)
    kern.G = kern.assemble(c)
    return kern


def lax_oleinik(u, kernel) -> np.ndarray:
    """(T u)(x') = min_x [u(x) + G(x, x')]."""
    G = kernel.G if isinstance(kernel, ActionKernel) else np.asarray(kernel)
    return np.min(u[:, None] + G, axis=0)


def min_plus(A, B, chunk: int = 64) -> np.ndarray:
    """Min-plus matrix product C[i, j] = min_k A[i, k] + B[k, j]."""
    A = np.asarray(A)
    B = np.asarray(B)
    n = A.shape[0]
    C = np.empty((n, B.shape[1]))
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        C[i0:i1] = np.min(A[i0:i1, :, None] + B[None, :, :], axis=1)
    return C


@dataclass
class WeakKAMSolution:
    """Fixed point of the Lax-Oleinik operator with its critical value.

    ``u_check`` is the conjugate solution from the reversed kernel,
    normalized so that min(u - u_check) = 0; the gap u - u_check vanishes
    on the projected Mather set.
    """

    u: np.ndarray
    u_check: np.ndarray
    alpha: float
    alpha_interval: tuple
    residual: float
    history: list
    c: np.ndarray
    kernel: ActionKernel

    def gap(self) -> np.ndarray:
        return self.u - self.u_check

    def lipschitz(self) -> float:
        """Largest slope of u between neighbor nodes, per unit angle."""
        shape = self.kernel.shape
        periods = self.kernel.periods
        U = self.u.reshape(shape)
        worst = 0.0
        for ax in range(len(shape)):
            cell = periods[ax] / shape[ax]
            d = np.abs(np.roll(U, -1, axis=ax) - U) / cell
            worst = max(worst, float(np.max(d)))
        return worst

    def semiconcavity(self) -> float:
        """Largest centered second difference of u along grid lines, per
        unit angle squared."""
        shape = self.kernel.shape
        periods = self.kernel.periods
        U = self.u.reshape(shape)
        worst = -np.inf
        for ax in range(len(shape)):
            cell = periods[ax] / shape[ax]
            s = (np.roll(U, -1, axis=ax) - 2 * U + np.roll(U, 1, axis=ax)) / cell ** 2
            worst = max(worst, float(np.max(s)))
        return worst


def _value_iterate(G, tol, max_iter, accelerate=True):
    Nn = G.shape[0]
    u = np.zeros(Nn)
    history = []
    Gk, k = G, 1
    if accelerate and Nn <= 2048:
        while 2 * k <= max(Nn, 64):
            Gk = min_plus(Gk, Gk)
            k *= 2
    applied = 0
    stall = 0
    best = np.inf
    cycle = []
    while applied < max_iter:
        v = np.min(u[:, None] + Gk, axis=0)
        u = v - float(v.min())
        applied += k
        # single-step residual with the sandwich midpoint
        w = np.min(u[:, None] + G, axis=0)
        d1 = w - u
        lo, hi = -float(d1.max()), -float(d1.min())
        alpha = 0.5 * (lo + hi)
        res = float(np.max(np.abs(d1 + alpha)))
        history.append(res)
        if res <= tol:
            return u, alpha, (lo, hi), res, history
        if res < best - 1e-15:
            best, stall = res, 0
            cycle = [u.copy()]
        else:
            stall += 1
            cycle.append(u.copy())
            if stall >= 50:
                # min-plus cycling: the pointwise minimum over the cycle is
                # the fixed point the iteration circles around
                u = np.min(np.stack(cycle), axis=0)
                u -= u.min()
                w = np.min(u[:, None] + G, axis=0)
                d1 = w - u
                lo, hi = -float(d1.max()), -float(d1.min())
                alpha = 0.5 * (lo + hi)
                res = float(np.max(np.abs(d1 + alpha)))
                history.append(res)
                if res <= tol:
                    return u, alpha, (lo, hi), res, history
                stall, best, cycle = 0, res, []
    err = NonConvergenceError(
        f"value iteration stalled at residual {history[-1]:.3e} after "
        f"{applied} steps (grid too coarse?)")
    err.history = history
    raise err


def critical_value(kernel) -> float:
    """Exact critical value of the discrete kernel.

    alpha(c) is minus the minimal mean cycle weight of G_c, computed by
    Karp's dynamic program; this agrees with the asymptotic per-step
    normalization of value iteration but needs no convergence.
    """
    G = kernel.G if isinstance(kernel, ActionKernel) else np.asarray(kernel)
    n = G.shape[0]
    D = np.full((n + 1, n), np.inf)
    D[0] = 0.0
    for k in range(1, n + 1):
        D[k] = np.min(D[k - 1][:, None] + G, axis=0)
    num = D[n][None, :] - D[:-1]
    den = (n - np.arange(n, dtype=float))[:, None]
    with np.errstate(invalid="ignore"):
        ratios = np.where(np.isfinite(num), num / den, -np.inf)
    return -float(np.min(np.max(ratios, axis=0)))


def _solve_one(G, tol, max_iter):
    try:
        return _value_iterate(G, tol, max_iter)
    except NonConvergenceError as first:
        # rotating regimes make plain iteration O(1/k)-slow; the critical
        # value is still exact (minimal mean cycle) and a solution can be
        # assembled from barrier columns, u = min_y h(y, .)
        alpha = critical_value(G)
        try:
            h = peierls_barrier(G, alpha, tol=0.1 * tol, max_doublings=34)
        except BarrierError:
            raise first
        u = np.min(h, axis=0)
        u -= u.min()
        w = np.min(u[:, None] + G, axis=0)
        d1 = w - u
        lo, hi = -float(d1.max()), -float(d1.min())
        res = float(np.max(np.abs(d1 + alpha)))
        hist = list(getattr(first, "history", [])) + [res]
        if res > tol:
            err = NonConvergenceError(
                f"weak KAM residual stalled at {res:.3e} (tol {tol:.1e}); "
                "grid too coarse for this cohomology")
            err.history = hist
            raise err
        return u, alpha, (lo, hi), res, hist


def solve_weak_kam(kernel: ActionKernel, tol: float = 1e-9,
                   max_iter: int = 100000) -> WeakKAMSolution:
    """Value iteration with sup normalization on kernel and reversed kernel."""
    u, alpha, interval, res, hist = _solve_one(kernel.G, tol, max_iter)
    w, alpha_r, _, _, _ = _solve_one(kernel.G.T, tol, max_iter)
    if abs(alpha - alpha_r) > 50 * max(tol, 1e-12) * max(1.0, abs(alpha)):
        raise NonConvergenceError(
            f"forward/backward critical values disagree: {alpha} vs {alpha_r}")
    u_check = -w + float(np.min(u + w))
    return WeakKAMSolution(u=u, u_check=u_check, alpha=alpha,
                           alpha_interval=interval, residual=res, history=hist,
                           c=kernel.c, kernel=kernel)


def peierls_barrier(kernel, alpha: float, tol: float = 1e-8,
                    max_doublings: int = 26) -> np.ndarray:
    """h_c as the stabilized min over long min-plus powers of G + alpha.

    Iterated squaring; parity oscillations are absorbed by minimizing over
    consecutive step counts.  Divergence signals a mis-estimated alpha.
    """
    G = kernel.G if isinstance(kernel, ActionKernel) else np.asarray(kernel)
    Ga = G + alpha
    P = Ga.copy()
    B_prev = None
    scale = max(1.0, float(np.max(np.abs(Ga[np.isfinite(Ga)]))))
    for _ in range(max_doublings):
        P = min_plus(P, P)
        B = np.minimum(P, min_plus(P, Ga))
        if float(np.min(B)) < -1e6 * scale:
            raise BarrierError("min-plus powers diverge to -inf; alpha too large")
        if B_prev is not None:
            if float(np.max(np.abs(B - B_prev))) <= tol:
                return B
        B_prev = B
    raise BarrierError("Peierls powers did not stabilize; alpha off or grid "
                       "too coarse")


@dataclass
class MatherData:
    """Detected projected invariant sets with momenta and barrier data."""

    idx_I: np.ndarray
    idx_A: np.ndarray
    idx_N: np.ndarray
    p_I: np.ndarray
    h: np.ndarray
    classes: list
    rho: np.ndarray
    threshold: float
    sensitivity: dict
    kernel: ActionKernel
    sol: WeakKAMSolution

    def coords(self, idx) -> np.ndarray:
        return self.kernel.X[idx]


def _grid_gradient(u, kernel):
    """Centered-difference gradient of u, (Nn, d)."""
    shape = kernel.shape
    U = u.reshape(shape)
    out = []
    for ax in range(len(shape)):
        cell = kernel.periods[ax] / shape[ax]
        out.append((np.roll(U, -1, axis=ax) - np.roll(U, 1, axis=ax)) / (2 * cell))
    return np.stack([o.ravel() for o in out], axis=1)


def _detect(values, threshold):
    return np.flatnonzero(values <= float(values.min()) + threshold)


def _static_classes(h, idx, tol):
    """Partition Aubry nodes by the vanishing of d(x,y) = h(x,y) + h(y,x)."""
    k = len(idx)
    seen = np.zeros(k, dtype=bool)
    classes = []
    D = h[np.ix_(idx, idx)] + h[np.ix_(idx, idx)].T
    for i in range(k):
        if seen[i]:
            continue
        member = D[i] <= tol
        member[i] = True
        seen |= member
        classes.append(idx[member])
    return classes


def aubry_rotation(kernel: ActionKernel, sol: WeakKAMSolution,
                   start: int, max_steps: int | None = None) -> np.ndarray:
    """Rotation vector of the calibrated orbit out of one Aubry node.

    Follows the argmin successor of the discrete calibration u(y) =
    u(x) + G(x,y) + alpha until a node repeats; the rotation vector is the
    accumulated lift displacement per step around the cycle.
    """
    Nn = kernel.n_nodes
    if max_steps is None:
        max_steps = 2 * Nn + 4
    disp = kernel.displacements()
    vals = kernel.S_lifts - np.einsum("lijd,d->lij", disp, kernel.c)
    total = np.zeros(kernel.dim)
    path = {start: (0, np.zeros(kernel.dim))}
    i = start
    for step in range(1, max_steps + 1):
        cost = sol.u[i] + vals[:, i, :] + sol.alpha - sol.u[None, :]
        l, j = np.unravel_index(int(np.argmin(cost)), cost.shape)
        total = total + disp[l, i, j]
        i = int(j)
        if i in path:
            step0, total0 = path[i]
            return (total - total0) / (step - step0)
        path[i] = (step, total.copy())
    return total / max_steps


def mather_sets(sol: WeakKAMSolution, kernel: ActionKernel,
                h: np.ndarray | None = None,
                threshold: float | None = None) -> MatherData:
    """Projected Mather/Aubry/Mane sets with momenta p = c + du.

    Candidates are grid nodes where the gap u - u_check sits within the
    detection threshold of its minimum; the Aubry set additionally has
    h(x,x) near zero, and the Mane proxy collects nodes on near-minimal
    chains between Aubry classes.
    """
    if threshold is None:
        threshold = 3.0 * kernel.ktol
    if h is None:
        h = peierls_barrier(kernel, sol.alpha)
    gap = sol.gap()
    idx_I = _detect(gap, threshold)
    diag = np.diag(h)
    idx_A = np.flatnonzero(np.abs(diag - 0.0) <= threshold)
    # class merging is looser than node detection: neighbor nodes of one
    # cluster carry O(threshold) mutual barrier, genuine classes O(sqrt(eps))
    classes = _static_classes(h, idx_A, 3.0 * threshold) if len(idx_A) else []
    if len(idx_A):
        sub = idx_A
        if len(sub) > 64:  # chain proxy only needs a class-representative sample
            sub = sub[:: int(np.ceil(len(sub) / 64))]
        ha = h[sub, :]          # ha[j, x]  = h(a_j, x)
        hb = h[:, sub]          # hb[x, i]  = h(x, a_i)
        pair = h[np.ix_(sub, sub)]  # pair[j, i] = h(a_j, a_i)
        chain = ha.T[:, :, None] + hb[:, None, :] - pair[None, :, :]
        best = np.min(chain.reshape(len(gap), -1), axis=1)
        idx_N = np.flatnonzero(best <= 3 * threshold)
    else:
        idx_N = np.array([], dtype=int)
    du = _grid_gradient(sol.u, kernel)
    p_I = kernel.c[None, :] + du[idx_I]
    rho = (aubry_rotation(kernel, sol, int(idx_A[0]))
           if len(idx_A) else np.full(kernel.dim, np.nan))
    sens = {}
    for fac in (0.5, 1.5):
        sens[fac] = int(len(_detect(gap, fac * threshold)))
    return MatherData(idx_I=idx_I, idx_A=idx_A, idx_N=idx_N, p_I=p_I, h=h,
                      classes=classes, rho=rho, threshold=float(threshold),
                      sensitivity=sens, kernel=kernel, sol=sol)


def product_solve(kernels, tol: float = 1e-9):
    """Per-factor weak KAM solutions of a separable system.

    For L(theta, v) = sum_i L_i(theta_i, v_i) the kernel is the sum of the
    factor kernels, solutions add, and alpha(c) = sum_i alpha_i(c_i).
    """
    return [solve_weak_kam(k, tol=tol) for k in kernels]


def product_mather(mathers, which: str = "A"):
    """Cartesian-product Mather data of a separable system.

    Returns (coords, p, n_classes, shape, periods) with one row per node of
    the product of the per-factor sets ("A" Aubry or "I" Mather candidates);
    momenta concatenate per factor.
    """
    coord_lists, p_lists = [], []
    for md in mathers:
        k = md.kernel
        if k.dim != 1:
            raise ValueError("product factors must be one-dimensional")
        p_full = k.c[None, :] + _grid_gradient(md.sol.u, k)
        idx = md.idx_A if which == "A" else md.idx_I
        coord_lists.append(k.X[idx, 0])
        p_lists.append(p_full[idx, 0])
    mesh = np.meshgrid(*coord_lists, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    meshp = np.meshgrid(*p_lists, indexing="ij")
    p = np.stack([m.ravel() for m in meshp], axis=1)
    n_classes = 1
    for md in mathers:
        n_classes *= max(len(md.classes), 1)
    shape = tuple(md.kernel.shape[0] for md in mathers)
    periods = tuple(float(md.kernel.periods[0]) for md in mathers)
    return coords, p, n_classes, shape, periods


@dataclass
class BarrierPair:
    """b+(x) = h(x0,x) + h(x,x1) and b-(x) = h(x1,x) + h(x,x0) with the
    isolation verdict for the minimizing set away from the Aubry set."""

    bplus: np.ndarray
    bminus: np.ndarray
    verdict: str
    minima_plus: np.ndarray
    minima_minus: np.ndarray
    clusters: list


def _index_clusters(idx, shape, wrap=True):
    """Connected clusters of flat grid indices (axis-aligned adjacency)."""
    if len(idx) == 0:
        return []
    idx_set = set(int(i) for i in idx)
    multi = {i: np.unravel_index(i, shape) for i in idx_set}
    seen = set()
    clusters = []
    for i in idx_set:
        if i in seen:
            continue
        stack, comp = [i], []
        seen.add(i)
        while stack:
            j = stack.pop()
            comp.append(j)
            mj = multi[j]
            for ax in range(len(shape)):
                for s in (-1, 1):
                    m2 = list(mj)
                    m2[ax] = (m2[ax] + s) % shape[ax] if wrap else m2[ax] + s
                    if not wrap and not (0 <= m2[ax] < shape[ax]):
                        continue
                    k = int(np.ravel_multi_index(m2, shape))
                    if k in idx_set and k not in seen:
                        seen.add(k)
                        stack.append(k)
        clusters.append(np.array(sorted(comp)))
    return clusters


def _cluster_diameter(cluster, shape):
    multi = np.stack(np.unravel_index(cluster, shape), axis=1)
    diam = 0
    for ax in range(len(shape)):
        vals = np.sort(np.unique(multi[:, ax]))
        if len(vals) == 1:
            continue
        gaps = np.diff(np.concatenate([vals, [vals[0] + shape[ax]]]))
        extent = shape[ax] - int(gaps.max())
        diam = max(diam, extent)
    return diam


def barrier_functions(h: np.ndarray, i0: int, i1: int, kernel: ActionKernel,
                      aubry_idx, tol: float | None = None,
                      exclude_cells: int = 3):
    """Barrier pair between two reference nodes with a nondegeneracy verdict.

    The verdict inspects the minimizing set of b+ outside a neighborhood of
    the Aubry set: isolated clusters (diameter at most 2 cells) count as
    nondegenerate.
    """
    if tol is None:
        tol = 3.0 * kernel.ktol
    bplus = h[i0, :] + h[:, i1]
    bminus = h[i1, :] + h[:, i0]
    shape = kernel.shape
    excluded = np.zeros(kernel.n_nodes, dtype=bool)
    multi_all = np.stack(np.unravel_index(np.arange(kernel.n_nodes), shape), axis=1)
    for a in np.atleast_1d(aubry_idx):
        ma = np.array(np.unravel_index(int(a), shape))
        d = np.abs(multi_all - ma)
        d = np.minimum(d, np.array(shape) - d)
        excluded |= np.all(d <= exclude_cells, axis=1)
    minima_plus = _detect(bplus, tol)
    minima_minus = _detect(bminus, tol)
    sel = np.flatnonzero(~excluded)
    if sel.size == 0:
        verdict = "degenerate"
        clusters = []
    else:
        out_min = _detect(bplus[sel], tol)
        clusters = _index_clusters(sel[out_min], shape)
        verdict = ("nondegenerate"
                   if clusters and all(_cluster_diameter(cl, shape) <= 2
                                       for cl in clusters)
                   else "degenerate")
    return BarrierPair(bplus=bplus, bminus=bminus, verdict=verdict,
                       minima_plus=minima_plus, minima_minus=minima_minus,
                       clusters=clusters)


# ---------------------------------------------------------------------------
# local modification of the slow potential


@dataclass
class LocalModification:
    """Potential capped outside one branch, its kernel, and the local data."""

    j: int
    Vj: Callable
    rho0: float
    rhobar: float
    C: float
    theta_j: float
    kernel: ActionKernel
    sol: WeakKAMSolution
    alpha_j: float
    aubry_idx: np.ndarray
    max_dist: float


def modify_potential(V: Callable, theta_j: float, b: float, rho0: float,
                     rhobar: float, period: float = 1.0,
                     n_check: int = 4096):
    """Cap V outside the rho0-ball at theta_j with a blended quadratic.

    V_j = (1 - phi) V + phi Q with Q = V(theta_j) - C d^2 / 2 and a
    smoothstep blend phi rising across [rho0, rhobar].  Checks the four
    construction conditions on a dense grid and raises ModificationError on
    any violation: equality inside rho0, V_j <= V, the global quadratic
    cap V_j(theta_j) - V_j >= (b/2) d^2, and strict maximality at theta_j.
    """
    if not 0 < rho0 < rhobar <= period / 2:
        raise ValueError("need 0 < rho0 < rhobar <= period/2")
    tj = np.atleast_1d(np.asarray(theta_j, dtype=float))
    Vmax = float(np.asarray(V(0.0, tj[None, :])).ravel()[0])

    def dist(theta):
        d = theta - tj
        d = d - period * np.round(d / period)
        return np.sqrt(np.sum(d * d, axis=-1))

    grid = (np.arange(n_check) * period / n_check)[:, None]
    dg = dist(grid)
    Vg = np.asarray(V(0.0, grid))
    far = dg > rho0
    with np.errstate(divide="ignore", invalid="ignore"):
        need = 2.0 * (Vmax - Vg[far]) / dg[far] ** 2
    C = float(max(b, 1.05 * np.max(need))) if np.any(far) else float(b)

    def phi(d):
        s = np.clip((d - rho0) / (rhobar - rho0), 0.0, 1.0)
        return s * s * (3.0 - 2.0 * s)

    def Vj(t, theta):
        d = dist(theta)
        Q = Vmax - 0.5 * C * d * d
        return (1.0 - phi(d)) * np.asarray(V(t, theta)) + phi(d) * Q

    Vjg = Vj(0.0, grid)
    inner = dg <= rho0
    if np.max(np.abs(Vjg[inner] - Vg[inner])) > 1e-12 * max(1.0, abs(Vmax)):
        raise ModificationError("V_j differs from V inside the rho0 ball")
    if np.max(Vjg - Vg) > 1e-10 * max(1.0, abs(Vmax)):
        raise ModificationError("V_j exceeds V")
    cap = Vmax - Vjg - 0.5 * b * dg ** 2
    if float(np.min(cap)) < -1e-9 * max(1.0, abs(Vmax)):
        i = int(np.argmin(cap))
        raise ModificationError(
            f"quadratic cap fails at theta={grid[i, 0]:.4f} by {-cap[i]:.3e} "
            "(branch constant b too large for this potential?)")
    off = dg > 1e-9
    if np.max(Vjg[off]) >= Vmax:
        raise ModificationError("theta_j is not the strict maximum of V_j")
    return Vj, {"C": C, "Vmax": Vmax, "rho0": rho0, "rhobar": rhobar}


def local_aubry(V: Callable, theta_j: float, b: float, rho0: float,
                rhobar: float, eps: float, c, N: int = 128, M: int = 4,
                period: float = 1.0, j: int = 0,
                tol: float = 1e-9) -> LocalModification:
    """Weak KAM data of the locally modified slow system.

    Builds V_j, solves the kernel for L = v^2/2 - eps V_j - c v, and
    returns alpha_j(c) with the local Aubry set and its largest distance
    from theta_j.
    """
    Vj, info = modify_potential(V, theta_j, b, rho0, rhobar, period=period)
    lag = potential_lagrangian(lambda t, th: eps * Vj(t, th), dim=1)
    kern = action_kernel(lag, c=c, N=N, M=M, period=period)
    sol = solve_weak_kam(kern, tol=tol)
    md = mather_sets(sol, kern)
    coords = kern.X[md.idx_A, 0]
    d = coords - theta_j
    d -= period * np.round(d / period)
    max_dist = float(np.max(np.abs(d))) if len(coords) else np.nan
    return LocalModification(j=j, Vj=Vj, rho0=rho0, rhobar=rhobar, C=info["C"],
                             theta_j=float(theta_j), kernel=kern, sol=sol,
                             alpha_j=sol.alpha, aubry_idx=md.idx_A,
                             max_dist=max_dist)


# ---------------------------------------------------------------------------
# double cover


def _poly_scale_var(poly: Poly, slot: int, factor: float) -> Poly:
    coeffs = {}
    for e, cf in poly.coeffs.items():
        coeffs[e] = coeffs.get(e, 0.0) + cf * factor ** e[slot]
    return Poly(poly.n, coeffs)


def double_cover(h0: IntegrablePart, h1: TrigPolyHamiltonian, slot: int = 0):
    """Degree-2 cover of one angle slot: the slot's period doubles and its
    mode indices double, leaving the Hamiltonian pointwise equal to its
    pullback; momenta and cohomology coefficients do not change, and
    alpha_cover(c) = alpha(c).  Returns (h0, h1_cover, info)."""
    n = h1.n
    if n < 2 and slot != 0:
        raise ValueError("slot out of range")
    periods = np.array(h1.periods, dtype=float).copy()
    periods[slot] *= 2.0
    modes = {}
    for k, poly in h1.modes.items():
        k2 = list(k)
        k2[slot] *= 2
        modes[tuple(k2)] = poly
    h1c = TrigPolyHamiltonian(n, modes, periods=tuple(periods), r=h1.r)

    def project_theta(theta):
        theta = np.asarray(theta, dtype=float).copy()
        theta[..., slot] = np.mod(theta[..., slot], h1.periods[slot])
        return theta

    def preimages(theta):
        theta = np.asarray(theta, dtype=float)
        a = theta.copy()
        bpt = theta.copy()
        bpt[..., slot] = bpt[..., slot] + h1.periods[slot]
        return a, bpt

    info = {"slot": slot, "project_theta": project_theta, "preimages": preimages,
            "lift_c": lambda c: np.asarray(c, dtype=float).copy()}
    return h0, h1c, info


# ---------------------------------------------------------------------------
# minimal configurations and rotation numbers


@dataclass
class Configuration:
    """A (p, q)-periodic minimal configuration: grid indices, lifted
    positions, and the cyclic action."""

    idx: np.ndarray
    positions: np.ndarray
    lifts: np.ndarray
    action: float
    p: np.ndarray
    q: int

    @property
    def rotation(self) -> np.ndarray:
        return self.p / self.q


def _config_action(kernel, idx, lifts):
    disp = kernel.displacements()
    vals = kernel.S_lifts - np.einsum("lijd,d->lij", disp, kernel.c)
    total = 0.0
    q = len(idx)
    for k in range(q):
        total += vals[lifts[k], idx[k], idx[(k + 1) % q]]
    return float(total)


def periodic_configurations(kernel: ActionKernel, p, q: int, n_starts: int = 8,
                            seed: int = 0, max_sweeps: int = 200,
                            q_max: int = 13, tol: float = 1e-10):
    """All distinct minimal (p, q)-periodic configurations of the kernel.

    Coordinate descent over one site at a time (joint over the node index
    and the incoming/outgoing lifts), from uniformly-rotating multistarts;
    minima are deduped up to cyclic shift and grid translation.
    """
    if q > q_max:
        raise ValueError(f"q={q} beyond the configured maximum {q_max}")
    if kernel.dim != 1:
        raise NotImplementedError("configurations are implemented for "
                                  "one-dimensional kernels")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    p0 = float(p[0])
    N = kernel.shape[0]
    per = float(kernel.periods[0])
    disp = kernel.displacements()
    vals = kernel.S_lifts - np.einsum("lijd,d->lij", disp, kernel.c)
    m_vals = kernel.m_combos[:, 0].astype(int)
    m_index = {int(m): i for i, m in enumerate(m_vals)}
    n_l = len(m_vals)
    if q == 1:
        # single-site orbit: the lift is pinned by the rotation, so the
        # minimization is over the node alone
        m_req = int(np.round(p0 / per))
        if m_req not in m_index:
            return []
        diag = vals[m_index[m_req], np.arange(N), np.arange(N)]
        jbest = int(np.argmin(diag))
        sel = np.nonzero(diag <= diag[jbest] + tol)[0]
        reps = [int(sel[0])]
        pos = kernel.X[reps[0], 0]
        return [Configuration(idx=np.array(reps), positions=np.array([pos]),
                              lifts=np.array([m_req]), action=float(diag[sel[0]]),
                              p=np.array([p0]), q=1)]
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(n_starts):
        shift = 0.0 if trial == 0 else float(rng.uniform(0, per))
        guess = shift + np.arange(q) * (p0 / q)
        idx = np.round(guess / per * N).astype(int) % N
        # lifts so that each step displacement tracks the mean rotation
        lifts = np.zeros(q, dtype=int)
        for k in range(q):
            base = kernel.offs[idx[k], idx[(k + 1) % q], 0]
            m = int(np.round((p0 / q - base) / per))
            m = int(np.clip(m, m_vals.min(), m_vals.max()))
            lifts[k] = m_index[m]
        # repair any rounding mismatch in the total displacement
        total = sum(kernel.offs[idx[k], idx[(k + 1) % q], 0]
                    + m_vals[lifts[k]] * per for k in range(q))
        need = int(np.round((p0 - total) / per))
        while need != 0:
            s = 1 if need > 0 else -1
            best_k, best_cost = -1, np.inf
            for k in range(q):
                m_new = m_vals[lifts[k]] + s
                if m_new not in m_index:
                    continue
                dc = (vals[m_index[m_new], idx[k], idx[(k + 1) % q]]
                      - vals[lifts[k], idx[k], idx[(k + 1) % q]])
                if dc < best_cost:
                    best_k, best_cost = k, dc
            if best_k < 0:
                break
            lifts[best_k] = m_index[m_vals[lifts[best_k]] + s]
            need -= s
        # per-site exact minimization over (node, in-lift, out-lift); the
        # two-step displacement through the site is held fixed, which pins
        # the required lift sum per candidate node (offsets wrap, so the
        # sum depends on the candidate)
        m_min, m_max = int(m_vals.min()), int(m_vals.max())
        all_j = np.arange(N)
        for _ in range(max_sweeps):
            changed = False
            for k in range(q):
                jprev = idx[(k - 1) % q]
                jnext = idx[(k + 1) % q]
                lin, lout = lifts[(k - 1) % q], lifts[k]
                D_old = (kernel.offs[jprev, idx[k], 0] + m_vals[lin] * per
                         + kernel.offs[idx[k], jnext, 0] + m_vals[lout] * per)
                offs_sum = kernel.offs[jprev, :, 0] + kernel.offs[:, jnext, 0]
                msum_j = np.round((D_old - offs_sum) / per).astype(int)
                best_val = vals[lin, jprev, idx[k]] + vals[lout, idx[k], jnext]
                best_state = (int(idx[k]), int(lin), int(lout))
                for l1 in range(n_l):
                    l2need = msum_j - m_vals[l1]
                    valid = (l2need >= m_min) & (l2need <= m_max)
                    if not np.any(valid):
                        continue
                    l2idx = np.clip(l2need - m_min, 0, n_l - 1)
                    cand = vals[l1, jprev, :] + vals[l2idx, all_j, jnext]
                    cand = np.where(valid, cand, np.inf)
                    j = int(np.argmin(cand))
                    if cand[j] < best_val - tol:
                        best_val = float(cand[j])
                        best_state = (j, l1, int(l2idx[j]))
                if best_state != (int(idx[k]), int(lin), int(lout)):
                    idx[k], lifts[(k - 1) % q], lifts[k] = best_state
                    changed = True
            if not changed:
                break
        act = _config_action(kernel, idx, lifts)
        positions = np.zeros(q)
        positions[0] = kernel.X[idx[0], 0]
        for k in range(q - 1):
            positions[k + 1] = (positions[k]
                                + kernel.offs[idx[k], idx[k + 1], 0]
                                + m_vals[lifts[k]] * per)
        results.append(Configuration(idx=idx.copy(), positions=positions,
                                     lifts=lifts.copy(), action=act,
                                     p=p.copy(), q=q))
    # keep the global minima, deduped up to cyclic shift + grid translation
    amin = min(r.action for r in results)
    keep = [r for r in results if r.action <= amin + 10 * max(tol, kernel.ktol)]
    distinct = []
    for r in keep:
        dup = False
        for s in distinct:
            for roll in range(q):
                delta = (np.roll(r.idx, roll) - s.idx) % N
                if np.all(delta == delta[0]):
                    dup = True
                    break
            if dup:
                break
        if not dup:
            distinct.append(r)
    return distinct


def rotation_number(positions, richardson: bool = True) -> float:
    """Limit of (x_k - x_0)/k from a lifted orbit, Richardson-accelerated."""
    x = np.asarray(positions, dtype=float)
    K = len(x) - 1
    if K < 1:
        raise ValueError("need at least two samples")
    s_full = (x[-1] - x[0]) / K
    if not richardson or K < 4:
        return float(s_full)
    half = K // 2
    s_half = (x[half] - x[0]) / half
    return float(2 * s_full - s_half)


def configurations_cross(a: Configuration, b: Configuration,
                         period: float = 1.0) -> bool:
    """Whether two lifted configurations cross for some relative shift.

    Checks all cyclic index shifts and integer translations of b against a
    over one period; a sign change in the difference sequence is a crossing.
    """
    q = a.q
    if b.q != q:
        raise ValueError("configurations must share q")
    xa = np.concatenate([a.positions, [a.positions[0] + float(a.p[0])]])
    ext = np.concatenate([b.positions, b.positions + float(b.p[0])])
    for shift in range(q):
        xb0 = ext[shift:shift + q + 1].copy()
        xb0[-1] = xb0[0] + float(b.p[0])
        for m in range(-3, 4):
            diff = xa - (xb0 + m * period)
            if np.any(diff > 1e-9) and np.any(diff < -1e-9):
                return True
    return False


# ---------------------------------------------------------------------------
# classification


@dataclass
class ClassificationData:
    """Minimal evidence bundle for the cohomology-class labels.

    ``aubry_coords`` are (theta^s, theta^f) rows of detected Aubry nodes;
    ``shape``/``periods`` describe the grid; ``n_classes`` counts static
    classes; the verdicts come from barrier_functions on the base system
    and on the double cover.
    """

    aubry_coords: np.ndarray
    shape: tuple
    periods: tuple
    n_classes: int
    barrier_verdict: str | None = None
    cover_classes: int | None = None
    cover_barrier_verdict: str | None = None


def classify_cohomology(c, data: ClassificationData):
    """Label in {Gamma0, Gamma1, Gamma1*, Gamma2, Gamma2*} or "unresolved".

    Gamma0: the theta^f projection of the Aubry set misses a gap of at
    least two cells.  Gamma1: the Aubry set is a circle graph over theta^f
    (full coverage, one cluster of at most two cells per column); the
    double-cover barrier test decides the star.  Gamma2: exactly two static
    classes; the base barrier test decides the star.  Anything else is
    "unresolved" with diagnostics.
    """
    ev = {"c": np.asarray(c, dtype=float).tolist(),
          "n_aubry": int(len(data.aubry_coords)),
          "n_classes": int(data.n_classes)}
    if len(data.aubry_coords) == 0:
        return "unresolved", {**ev, "reason": "empty Aubry set"}
    Nf = data.shape[-1]
    per_f = data.periods[-1]
    cell_f = per_f / Nf
    thf = np.sort(np.mod(data.aubry_coords[:, -1], per_f))
    gaps = np.diff(np.concatenate([thf, [thf[0] + per_f]]))
    max_gap = float(gaps.max())
    ev["max_theta_f_gap_cells"] = max_gap / cell_f

    if data.n_classes == 2:
        label = "Gamma2"
        ev["star_test"] = data.barrier_verdict
        if data.barrier_verdict == "nondegenerate":
            label = "Gamma2*"
        elif data.barrier_verdict is None:
            return "unresolved", {**ev, "reason": "two classes but no barrier verdict"}
        return label, ev

    if max_gap >= 2 * cell_f:
        return "Gamma0", ev

    # circle-graph test: one tight cluster per theta^f column
    cols = {}
    Ns = data.shape[0]
    per_s = data.periods[0]
    cell_s = per_s / Ns
    for row in data.aubry_coords:
        key = int(np.round(np.mod(row[-1], per_f) / cell_f)) % Nf
        cols.setdefault(key, []).append(np.mod(row[0], per_s))
    widths = []
    for vals in cols.values():
        v = np.sort(np.asarray(vals))
        if len(v) == 1:
            widths.append(0.0)
            continue
        g = np.diff(np.concatenate([v, [v[0] + per_s]]))
        widths.append(per_s - float(g.max()))
    ev["max_column_width_cells"] = max(widths) / cell_s
    ev["columns_covered"] = len(cols)
    if data.n_classes == 1 and max(widths) <= 2 * cell_s and len(cols) >= Nf // 2:
        ev["star_test"] = data.cover_barrier_verdict
        ev["cover_classes"] = data.cover_classes
        if data.cover_classes == 2 and data.cover_barrier_verdict == "nondegenerate":
            return "Gamma1*", ev
        return "Gamma1", ev
    return "unresolved", {**ev, "reason": "no decisive geometric test"}
