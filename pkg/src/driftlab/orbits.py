"""Orbit integration and drift diagnostics for nearly integrable models.

The integrator is implicit midpoint with a fixed step, solved per step by a
chord Newton iteration.  Implicit midpoint is symplectic and handles
non-separable Hamiltonians (momentum-dependent coupling modes) that rule out
explicit splitting schemes.  Alongside the phase variables an extended-energy
accumulator e(t) integrates -dH/dt along the orbit, so H(z(t), t) + e(t) is a
constant of the exact flow and its sampled deviation isolates integrator
error from genuine time dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    DomainError,
    IntegrablePart,
    NearlyIntegrable,
    NonConvergenceError,
    PhasePoint,
    Poly,
    TrigPolyHamiltonian,
)

DT_MAX = 1e-2


class StepError(NonConvergenceError):
    """The implicit step equation could not be solved to tolerance."""


# ---------------------------------------------------------------------------
# fused field evaluation


class _Field:
    """Vectorized calculus of H(theta, p, t) = H0(p) + eps*H1(theta, p, t).

    The trig-polynomial mode table of H1 is flattened once into a master term
    list so that a single complex matmul per call yields the value, both
    gradients, and the exact dH/dt together.  Entry points take theta, p of
    shape (B, n) and a scalar time; ``fused`` returns (value, grad_theta,
    grad_p, dH/dt) with shapes ((B,), (B, n), (B, n), (B,)).
    """

    def __init__(self, H: NearlyIntegrable):
        self.H = H
        self.n = n = H.n
        self.eps = float(H.eps)
        h0 = H.h0
        self._h0 = h0
        deg = max((sum(e) for e in h0.poly.coeffs), default=0)
        if deg <= 2:
            z = np.zeros(n)
            self._A = h0.hess(z)
            self._b = h0.grad(z)
        else:
            self._A = None
        h1 = H.h1
        self.periods_theta = np.array(h1.periods[:n], dtype=float)
        keys = list(h1.modes) if self.eps != 0.0 else []
        self.m = len(keys)
        self.has_time_modes = False
        if self.m == 0:
            return
        F = np.array([h1._freq[k] for k in keys])
        self.Fth = np.ascontiguousarray(F[:, :n])
        self.Ft = np.ascontiguousarray(F[:, n])
        self.has_time_modes = bool(np.any(self.Ft != 0.0))
        # master term list: value/grad_theta/dHdt share the base rows, each
        # momentum derivative contributes decremented-exponent rows
        ncol = 2 * n + 2
        exps: list = []
        mode_of: list = []
        cols: list = []
        for i, k in enumerate(keys):
            f = F[i]
            for e, c in h1.modes[k].coeffs.items():
                row = np.zeros(ncol, dtype=complex)
                row[0] = c
                row[1:n + 1] = c * 1j * f[:n]
                row[ncol - 1] = c * 1j * f[n]
                exps.append(e)
                mode_of.append(i)
                cols.append(row)
                for j in range(n):
                    if e[j] == 0:
                        continue
                    drow = np.zeros(ncol, dtype=complex)
                    drow[n + 1 + j] = c * e[j]
                    e2 = list(e)
                    e2[j] -= 1
                    exps.append(tuple(e2))
                    mode_of.append(i)
                    cols.append(drow)
        self._texps = np.array(exps, dtype=float)
        self._tmode = np.array(mode_of)
        self._M = self.eps * np.array(cols)
        self._p_independent = bool(np.all(self._texps == 0.0))

    def _grad0(self, p):
        if self._A is not None:
            return p @ self._A + self._b
        return self._h0.grad(p)

    def fused(self, theta, p, t):
        v0 = self._h0.value(p) + np.zeros(p.shape[0])
        gp0 = self._grad0(p)
        n = self.n
        if self.m == 0:
            zn = np.zeros(p.shape[0])
            return v0, np.zeros_like(p), gp0, zn
        ph = np.exp(1j * (theta @ self.Fth.T + (t * self.Ft)[None, :]))
        tph = ph[:, self._tmode]
        if not self._p_independent:
            tph = tph * np.prod(p[:, None, :] ** self._texps[None, :, :], axis=-1)
        out = (tph @ self._M).real
        return (v0 + out[:, 0], out[:, 1:n + 1],
                gp0 + out[:, n + 1:2 * n + 1], out[:, -1])

    def rhs(self, theta, p, t):
        """(thetadot, pdot), each of shape (B, n)."""
        _, gth, gp, _ = self.fused(theta, p, t)
        return gp, -gth

    def value(self, theta, p, t):
        return self.fused(theta, p, t)[0]


class _MethodField:
    """Fallback that drives any object exposing value/grad_theta/grad_p."""

    def __init__(self, H):
        self.H = H
        self.n = int(H.n)
        self.has_time_modes = True
        self.periods_theta = np.ones(self.n)

    def fused(self, theta, p, t, h=1e-6):
        v = np.asarray(self.H.value(theta, p, t), dtype=float)
        dht = (np.asarray(self.H.value(theta, p, t + h), dtype=float)
               - np.asarray(self.H.value(theta, p, t - h), dtype=float)) / (2.0 * h)
        return v, self.H.grad_theta(theta, p, t), self.H.grad_p(theta, p, t), dht

    def rhs(self, theta, p, t):
        return self.H.grad_p(theta, p, t), -self.H.grad_theta(theta, p, t)

    def value(self, theta, p, t):
        return np.asarray(self.H.value(theta, p, t), dtype=float)


def _make_field(H):
    if isinstance(H, NearlyIntegrable) and isinstance(H.h1, TrigPolyHamiltonian):
        return _Field(H)
    return _MethodField(H)


def _fd_jacobian(field, theta, p, t, h=1e-6):
    B, n = p.shape
    J = np.empty((B, 2 * n, 2 * n))
    for j in range(2 * n):
        dth = np.zeros((B, n))
        dp = np.zeros((B, n))
        (dth if j < n else dp)[:, j % n] = h
        f1 = field.rhs(theta + dth, p + dp, t)
        f0 = field.rhs(theta - dth, p - dp, t)
        J[:, :n, j] = (f1[0] - f0[0]) / (2.0 * h)
        J[:, n:, j] = (f1[1] - f0[1]) / (2.0 * h)
    return J


def _newton(field, th, p, t, dt, guess, tol, max_iter, cache):
    """One implicit-midpoint step, solved to ``tol`` in the sup norm.

    The Jacobian I - (dt/2) DF is rebuilt lazily and its inverse cached
    across steps (chord iteration); a failed sweep retries once with a fresh
    Jacobian.  Returns per-row convergence flags instead of raising so that
    batched sweeps can freeze bad rows and keep going.  ``dht`` is dH/dt at
    the converged midpoint, reused by the energy-defect accumulator.
    """
    B, n = p.shape
    tm = t + 0.5 * dt
    th1, p1 = guess
    iters = 0
    for attempt in range(2):
        Jinv = cache.get("Jinv")
        for _ in range(max_iter):
            thm = 0.5 * (th + th1)
            pm = 0.5 * (p + p1)
            _, gthm, gpm, dht = field.fused(thm, pm, tm)
            gth = th1 - th - dt * gpm
            gp = p1 - p + dt * gthm
            res = max(np.abs(gth).max(), np.abs(gp).max())
            iters += 1
            if res <= tol:
                return th1, p1, dht, iters, np.ones(B, dtype=bool)
            if Jinv is None:
                DF = _fd_jacobian(field, thm, pm, tm)
                J = np.eye(2 * n)[None, :, :] - 0.5 * dt * DF
                Jinv = cache["Jinv"] = np.linalg.inv(J)
            g = np.concatenate([gth, gp], axis=-1)
            delta = -(Jinv @ g[..., None])[..., 0]
            th1 = th1 + delta[:, :n]
            p1 = p1 + delta[:, n:]
        cache["Jinv"] = None
    thm = 0.5 * (th + th1)
    pm = 0.5 * (p + p1)
    _, gthm, gpm, dht = field.fused(thm, pm, tm)
    rth = np.abs(th1 - th - dt * gpm).max(axis=-1)
    rp = np.abs(p1 - p + dt * gthm).max(axis=-1)
    res_rows = np.maximum(rth, rp)
    ok = np.isfinite(res_rows) & (res_rows <= tol)
    return th1, p1, dht, iters, ok


def _run(field, theta0, p0, t0, T, dt, *, record, strict, box,
         newton_tol=1e-13, max_newton=12, box_slack=1e-9):
    """Core fixed-step loop over a batch of initial conditions.

    Rows that leave the action box or fail a step are frozen in place (their
    drift stops accumulating); in strict mode the first escape truncates the
    run and a step failure raises instead.

    The working angle lives in a small frame: whole periods are moved into a
    separate base array every 128 steps, so the Newton residual stays
    resolvable no matter how far the lift winds (at theta ~ 1e3 one ulp
    already exceeds the step tolerance).  Recorded samples are frame + base.
    """
    nst = int(round(T / abs(dt)))
    B, n = p0.shape
    th = np.array(theta0, dtype=float)
    p = np.array(p0, dtype=float)
    base = np.zeros((B, n))
    per = field.periods_theta[None, :]
    alive = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    e = np.zeros(B)
    E0 = field.value(th, p, t0)
    driftsq = np.zeros(B)
    if record:
        TH = np.empty((nst + 1, B, n))
        PP = np.empty((nst + 1, B, n))
        DEF = np.zeros((nst + 1, B))
        TH[0] = th
        PP[0] = p
    if box is not None:
        lo = box[None, :, 0] - box_slack
        hi = box[None, :, 1] + box_slack
    cache: dict = {"Jinv": None}
    prev_th = prev_p = None
    kstop = nst
    truncated = False
    track_e = record and field.has_time_modes
    for k in range(nst):
        t = t0 + k * dt
        if prev_th is None:
            fth, fp = field.rhs(th, p, t)
            guess = (th + dt * fth, p + dt * fp)
        else:
            guess = (2.0 * th - prev_th, 2.0 * p - prev_p)
        th1, p1, dht, iters, ok = _newton(
            field, th, p, t, dt, guess, newton_tol, max_newton, cache)
        if iters >= 4:
            cache["Jinv"] = None
        if not ok.all():
            if strict:
                raise StepError(f"implicit step failed to converge at t={t + dt:.6g}")
            failed |= ~ok
            alive &= ok
        if not alive.all():
            dead = ~alive
            th1[dead] = th[dead]
            p1[dead] = p[dead]
        prev_th, prev_p = th, p
        th, p = th1, p1
        if (k & 127) == 0:
            shift = np.round(th / per) * per
            if shift.any():
                th = th - shift
                prev_th = prev_th - shift
                base = base + shift
        if record:
            if track_e:
                e = e - dt * dht
            TH[k + 1] = th + base
            PP[k + 1] = p
            DEF[k + 1] = np.abs(field.value(th, p, t + dt) + e - E0)
        else:
            driftsq = np.maximum(driftsq, ((p - p0) ** 2).sum(axis=-1))
        if box is not None and ((p < lo) | (p > hi)).any():
            esc = alive & (((p < lo) | (p > hi)).any(axis=-1))
            if esc.any():
                alive[esc] = False
                if strict:
                    kstop = k + 1
                    truncated = True
                    break
    result = {
        "driftsq": driftsq,
        "failed": failed,
        "alive": alive,
        "nsamples": kstop + 1,
        "truncated": truncated,
    }
    if record:
        result["theta"] = TH[: kstop + 1]
        result["p"] = PP[: kstop + 1]
        result["defect"] = DEF[: kstop + 1]
    return result


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """A sampled orbit: times, phase variables, and per-sample diagnostics.

    ``theta`` holds the continuous (unwrapped) angle lift; ``points()`` wraps
    into fundamental domains on demand.  ``energy_defect`` is the sampled
    deviation of H + e from its initial value, a pure measure of integrator
    error for time-periodic H.
    """

    times: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    energy_defect: np.ndarray
    drift: float
    truncated: bool
    cylinder_distance: np.ndarray | None = None

    @property
    def drift_series(self) -> np.ndarray:
        return np.sqrt(((self.p - self.p[0]) ** 2).sum(axis=-1))

    def points(self) -> list[PhasePoint]:
        return [PhasePoint(self.theta[k], self.p[k], self.times[k])
                for k in range(len(self.times))]


def integrate(H, z0, T, dt, *, cylinder=None, fast=None, newton_tol=1e-13,
              max_newton=12) -> Trajectory:
    """Integrate the Hamiltonian flow of H from z0 for time T with step dt.

    Implicit midpoint with fixed step; each step is solved by Newton to
    ``newton_tol`` in the sup norm, and a non-convergent step raises
    StepError.  Negative dt integrates backwards.  An orbit whose momentum
    leaves the action box is truncated at the first outside sample and
    flagged.  If a cylinder graph is supplied, the distance of each sample to
    the graph is recorded (``fast`` names the fast angle slot, default the
    last one).
    """
    dt = float(dt)
    T = float(T)
    if not np.isfinite(dt) or dt == 0.0 or abs(dt) > DT_MAX:
        raise ValueError(f"dt must satisfy 0 < |dt| <= {DT_MAX}")
    if not np.isfinite(T) or T < abs(dt):
        raise ValueError("T must cover at least one step")
    if isinstance(z0, PhasePoint):
        theta0, p0, t0 = z0.theta, z0.p, z0.t
    else:
        theta0, p0 = z0[0], z0[1]
        t0 = float(z0[2]) if len(z0) > 2 else 0.0
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    p0 = np.atleast_1d(np.asarray(p0, dtype=float))
    h0 = getattr(H, "h0", None)
    box = None
    if isinstance(h0, IntegrablePart):
        box = h0.box
        if not h0.contains(p0):
            raise DomainError(f"initial momentum {p0} outside the action box")
    field = _make_field(H)
    out = _run(field, theta0[None, :], p0[None, :], t0, T, dt,
               record=True, strict=True, box=box,
               newton_tol=newton_tol, max_newton=max_newton)
    ns = out["nsamples"]
    times = t0 + dt * np.arange(ns)
    theta = out["theta"][:, 0, :]
    p = out["p"][:, 0, :]
    drift = float(np.sqrt(((p - p[0]) ** 2).sum(axis=-1)).max())
    cyl = None
    if cylinder is not None:
        cyl = cylinder_distance(cylinder, theta, p, times, fast=fast)
    return Trajectory(times=times, theta=theta, p=p,
                      energy_defect=out["defect"][:, 0], drift=drift,
                      truncated=out["truncated"], cylinder_distance=cyl)


def drift_sweep(H, theta0, p0, T, dt, *, newton_tol=1e-13,
                max_newton=12) -> tuple[np.ndarray, int, Trajectory]:
    """Batched drift scan over seed rows; returns per-seed drift, the index
    of the best seed, and that seed's fully recorded orbit.

    The scan integrates all rows together without recording (rows that
    escape the box or fail a step freeze where they stopped); the winner is
    then re-integrated alone, which makes the returned trajectory the
    authoritative, deterministic record.
    """
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=float))
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    if theta0.shape != p0.shape:
        raise ValueError("theta0 and p0 must have matching shapes")
    h0 = getattr(H, "h0", None)
    box = None
    if isinstance(h0, IntegrablePart):
        box = h0.box
        for row in p0:
            if not h0.contains(row):
                raise DomainError(f"seed momentum {row} outside the action box")
    field = _make_field(H)
    out = _run(field, theta0, p0, 0.0, T, dt, record=False, strict=False,
               box=box, newton_tol=newton_tol, max_newton=max_newton)
    drifts = np.sqrt(out["driftsq"])
    last_err = None
    for idx in np.argsort(-drifts):
        try:
            traj = integrate(H, (theta0[idx], p0[idx]), T, dt,
                             newton_tol=newton_tol, max_newton=max_newton)
            return drifts, int(idx), traj
        except StepError as err:  # pragma: no cover - needs a pathological seed
            last_err = err
    raise StepError(f"no seed integrated cleanly: {last_err}")


# ---------------------------------------------------------------------------
# cylinder distance


def cylinder_distance(graph, theta, p, times, fast=None) -> np.ndarray:
    """Distance of orbit samples to a cylinder graph, in the slow variables.

    The graph stores the slow angles and actions as functions of
    (theta^f, p^f, t); the distance at a sample is the Euclidean norm of
    (theta^s - Theta_s, p^s - P_s) with the angle deviation wrapped to
    [-1/2, 1/2).  Samples whose fast action falls outside the graph window
    are measured against the clamped edge slice.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    ns = graph.Theta_s.shape[-1]
    n = ns + 1
    if fast is None:
        fast = n - 1
    slow = [i for i in range(n) if i != fast]
    TH = np.asarray(graph.meta["Theta_s_continuous"], dtype=float)
    PS = np.asarray(graph.P_s, dtype=float)
    G = np.concatenate([TH, PS], axis=-1)

    fgrid = np.asarray(graph.theta_f, dtype=float)
    pgrid = np.asarray(graph.pf, dtype=float)
    tgrid = np.asarray(graph.t, dtype=float)
    Nf, Np, Nt = len(fgrid), len(pgrid), len(tgrid)

    df = fgrid[1] - fgrid[0] if Nf > 1 else 1.0
    xf = (np.mod(theta[:, fast], 1.0) - fgrid[0]) / df
    i0 = np.floor(xf).astype(int)
    wf = xf - i0
    i0 %= Nf
    i1 = (i0 + 1) % Nf

    dtg = tgrid[1] - tgrid[0] if Nt > 1 else 1.0
    xt = (np.mod(times, 1.0) - tgrid[0]) / dtg
    k0 = np.floor(xt).astype(int)
    wt = xt - k0
    k0 %= Nt
    k1 = (k0 + 1) % Nt

    if Np > 1:
        j0 = np.clip(np.searchsorted(pgrid, p[:, fast]) - 1, 0, Np - 2)
        j1 = j0 + 1
        wp = np.clip((p[:, fast] - pgrid[j0]) / (pgrid[j1] - pgrid[j0]), 0.0, 1.0)
    else:
        j0 = j1 = np.zeros(len(times), dtype=int)
        wp = np.zeros(len(times))

    val = np.zeros((len(times), 2 * ns))
    for ia, wa in ((i0, 1.0 - wf), (i1, wf)):
        for ja, wb in ((j0, 1.0 - wp), (j1, wp)):
            for ka, wc in ((k0, 1.0 - wt), (k1, wt)):
                val += (wa * wb * wc)[:, None] * G[ia, ja, ka]
    dth = theta[:, slow] - val[:, :ns]
    dth -= np.round(dth)
    dp = p[:, slow] - val[:, ns:]
    return np.sqrt((dth ** 2).sum(axis=-1) + (dp ** 2).sum(axis=-1))


# ---------------------------------------------------------------------------
# drift reports


@dataclass
class DriftReport:
    """Summary diagnostics of one trajectory's momentum drift."""

    drift: float
    times: np.ndarray
    drift_series: np.ndarray
    resonance_max: float | None = None
    cylinder_max: float | None = None
    rate_max: float | None = None
    rate_bound: float | None = None
    rate_ok: bool | None = None


def drift_report(traj: Trajectory, resonance=None, cylinder=None, *,
                 fast=None, eps=None, r_grad_bound=None, tol=0.1,
                 window=1.0) -> DriftReport:
    """Drift diagnostics: sup-norm drift, distance to a resonance set and to
    a cylinder graph, and a slow-drift rate check.

    ``resonance`` is a callable mapping momentum rows (N, n) to distances
    (N,).  The rate check compares the largest windowed slope of the fast
    action (averaged over ``window`` time units, so fast oscillations drop
    out) against eps * r_grad_bound * (1 + tol), with r_grad_bound a sup
    bound on the relevant averaged-coupling derivative; it runs only when
    eps and r_grad_bound are both given.
    """
    ds = traj.drift_series
    rep = DriftReport(drift=float(ds.max()), times=traj.times, drift_series=ds)
    if resonance is not None:
        dist = resonance(traj.p) if callable(resonance) else resonance.distance(traj.p)
        rep.resonance_max = float(np.max(dist))
    if traj.cylinder_distance is not None:
        rep.cylinder_max = float(np.max(traj.cylinder_distance))
    elif cylinder is not None:
        cd = cylinder_distance(cylinder, traj.theta, traj.p, traj.times, fast=fast)
        rep.cylinder_max = float(np.max(cd))
    if eps is not None and r_grad_bound is not None:
        n = traj.p.shape[1]
        f = n - 1 if fast is None else fast
        pf = traj.p[:, f]
        dt = traj.times[1] - traj.times[0]
        k = max(1, min(int(round(abs(window / dt))), len(pf) - 1))
        rate = np.abs(pf[k:] - pf[:-k]) / (k * abs(dt))
        rep.rate_max = float(rate.max()) if len(rate) else 0.0
        rep.rate_bound = float(abs(eps) * r_grad_bound * (1.0 + tol))
        rep.rate_ok = bool(rep.rate_max <= rep.rate_bound)
    return rep


# ---------------------------------------------------------------------------
# the a priori unstable benchmark model


def arnold_example(eps: float, mu: float) -> NearlyIntegrable:
    """Pendulum-rotator model with a two-wave time-periodic coupling.

    H = (p1^2 + p2^2)/2 + eps * (1 - cos 2pi theta1) * (1 + mu * (sin 2pi theta2
    + sin 2pi t)).  At mu = 0 the pendulum in (theta1, p1) decouples from the
    rotator and {theta1 = 1/2, p1 = 0} is an invariant cylinder; mu > 0
    switches on the coupling that drives drift in p2 along its stochastic
    layer.  The product form is expanded into a single mode table.
    """
    half = Poly(2, {(2, 0): 0.5, (0, 2): 0.5})
    h0 = IntegrablePart(half, 1.0, [[-1.5, 1.5], [-1.5, 1.5]])
    one = TrigPolyHamiltonian.cosine(2, (0, 0, 0), 1.0)
    pend = one - TrigPolyHamiltonian.cosine(2, (1, 0, 0), 1.0)
    wave = (TrigPolyHamiltonian.sine(2, (0, 1, 0), 1.0)
            + TrigPolyHamiltonian.sine(2, (0, 0, 1), 1.0))
    h1 = pend + mu * (pend * wave)
    return NearlyIntegrable(h0, h1, eps)
