"""Geometry of a single codimension-one resonance.

The resonance is the curve p_*(p^f) on which the slow action gradient of H0
vanishes.  This module locates that curve, enumerates the punctures where the
fast frequency is a low-order rational, cuts the passage segments around
them, tests membership in the non-resonant action domain, and audits the
nondegeneracy of the averaged potential along the curve (branch structure of
its maxima, bifurcations, spectral window, wedge constants).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import IntegrablePart, NonConvergenceError, TrigPolyHamiltonian, cr_norm


class GeometryError(RuntimeError):
    """The resonance curve could not be continued inside the action box."""


def torus_dist(a, b, period=1.0):
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % period
    return np.minimum(d, period - d)


# ---------------------------------------------------------------------------
# the critical curve


def solve_p_star(h0: IntegrablePart, pf: float, guess=None, tol: float = 1e-10,
                 max_iter: int = 50):
    """Solve the slow-gradient equation at fixed fast action.

    Returns (p_slow, residual).  Newton with the exact slow-slow Hessian
    block; convexity makes the block SPD, so the iteration is a contraction
    near the curve.  Continuation callers should pass the previous solution
    as ``guess``.
    """
    n = h0.n
    ns = n - 1
    if ns == 0:
        return np.zeros(0), 0.0
    ps = np.zeros(ns) if guess is None else np.asarray(guess, dtype=float).copy()
    for _ in range(max_iter):
        p = np.concatenate([ps, [pf]])
        g = h0.grad(p)[:ns]
        res = float(np.linalg.norm(g))
        if res <= tol:
            break
        B = h0.hess(p)[:ns, :ns]
        ps = ps - np.linalg.solve(B, g)
    else:
        raise GeometryError(f"slow-gradient Newton stalled at pf={pf}")
    p = np.concatenate([ps, [pf]])
    if not h0.contains(p, slack=1e-6):
        raise GeometryError(f"resonance point {p} left the action box")
    return ps, float(np.linalg.norm(h0.grad(p)[:ns]))


def fast_frequency(h0: IntegrablePart, pf: float, guess=None) -> float:
    """d/dp^f of H0 along the critical curve; strictly increasing in p^f."""
    ps, _ = solve_p_star(h0, pf, guess)
    p = np.concatenate([ps, [pf]])
    return float(h0.grad(p)[-1])


@dataclass(frozen=True)
class Puncture:
    """A fast action where the fast frequency is rational: k*omega + l = 0
    with the lowest-terms witness (k > 0)."""

    pf: float
    k: int
    l: int


def punctures(h0: IntegrablePart, K: int, interval, dedup_tol: float = 1e-12):
    """All punctures of order K in a fast-action interval, sorted.

    The fast frequency is strictly monotone along the curve (it is the
    derivative of the convex infimal projection of H0), so each rational
    value is hit at most once and bisection is reliable.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    a, b = float(interval[0]), float(interval[1])
    w_a, w_b = fast_frequency(h0, a), fast_frequency(h0, b)
    lo, hi = min(w_a, w_b), max(w_a, w_b)
    targets: dict[Fraction, Fraction] = {}
    for k in range(1, K + 1):
        for l in range(-K, K + 1):
            r = Fraction(-l, k)
            if lo - 1e-14 <= float(r) <= hi + 1e-14:
                targets.setdefault(r, r)
    out = []
    for r in sorted(targets):
        pf = _invert_frequency(h0, float(r), a, b, w_a, w_b)
        if pf is None:
            continue
        out.append(Puncture(pf, r.denominator, -r.numerator))
    out.sort(key=lambda q: q.pf)
    dedup: list[Puncture] = []
    for q in out:
        if dedup and abs(q.pf - dedup[-1].pf) <= dedup_tol:
            continue
        dedup.append(q)
    return dedup


def _invert_frequency(h0, target, a, b, w_a, w_b, tol=1e-13):
    sign = 1.0 if w_b >= w_a else -1.0
    f = lambda pf: sign * (fast_frequency(h0, pf) - target)
    fa, fb = sign * (w_a - target), sign * (w_b - target)
    if fa > 0 or fb < 0:
        return None
    lo_pf, hi_pf = a, b
    for _ in range(200):
        mid = 0.5 * (lo_pf + hi_pf)
        if hi_pf - lo_pf <= tol:
            break
        if f(mid) <= 0:
            lo_pf = mid
        else:
            hi_pf = mid
    return 0.5 * (lo_pf + hi_pf)


def passage_segments(punctures_or_pfs, eps: float, interval):
    """Closed subintervals of the fast-action interval that stay at least
    3*eps^(1/6) away from every puncture; empty leftovers are dropped."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = 3.0 * eps ** (1.0 / 6.0)
    a, b = float(interval[0]), float(interval[1])
    pts = sorted(q.pf if isinstance(q, Puncture) else float(q)
                 for q in punctures_or_pfs)
    segments = []
    cursor = a
    for pf in pts:
        lo, hi = pf - w, pf + w
        if hi <= a or lo >= b:
            continue
        if lo > cursor:
            segments.append((cursor, min(lo, b)))
        cursor = max(cursor, hi)
        if cursor >= b:
            break
    if cursor < b:
        segments.append((cursor, b))
    return [(lo, hi) for lo, hi in segments if hi - lo > 0]


def in_domain_D(h0: IntegrablePart, p, K: int, s: float):
    """Membership in the non-resonant action domain.

    Requires the slow gradient norm to be at most s and every fast/time
    frequency combination |k_f * omega + k_t| with 0 < max(|k_f|, |k_t|) <= K
    to clear 3*K*s.  Returns (ok, witness, slow_norm); the witness is the
    first violating (k_f, k_t) in increasing order, or None.
    """
    p = np.asarray(p, dtype=float)
    g = h0.grad(p)
    slow_norm = float(np.linalg.norm(g[:-1]))
    if slow_norm > s:
        return False, None, slow_norm
    omega = float(g[-1])
    bound = 3.0 * K * s
    for order in range(1, K + 1):
        for kf in range(0, order + 1):
            for kt in range(-order, order + 1):
                if max(kf, abs(kt)) != order or (kf == 0 and kt <= 0):
                    continue
                if abs(kf * omega + kt) < bound:
                    return False, (kf, kt), slow_norm
    return True, None, slow_norm


@dataclass
class ResonanceGeometry:
    """Sampled resonance curve with its punctures and passage segments."""

    h0: IntegrablePart
    interval: tuple
    eps: float
    K: int
    pf_samples: np.ndarray
    ps_star: np.ndarray
    residuals: np.ndarray
    punctures: list
    segments: list

    def validate(self) -> dict:
        worst = float(np.max(self.residuals)) if self.residuals.size else 0.0
        w = 3.0 * self.eps ** (1.0 / 6.0)
        min_clearance = math.inf
        for lo, hi in self.segments:
            for q in self.punctures:
                min_clearance = min(min_clearance,
                                    max(q.pf - hi, lo - q.pf, 0.0)
                                    if lo <= q.pf <= hi else
                                    min(abs(q.pf - lo), abs(q.pf - hi)))
        gaps = np.diff([q.pf for q in self.punctures]) if len(self.punctures) > 1 else np.array([])
        gap_floor = 1.0 / (self.h0.D * self.K**2)
        return {
            "max_residual": worst,
            "residual_ok": worst <= 1e-10,
            "clearance": None if min_clearance is math.inf else float(min_clearance),
            "clearance_ok": min_clearance is math.inf or min_clearance >= w * (1 - 1e-12),
            "min_puncture_gap": float(gaps.min()) if gaps.size else None,
            "puncture_gap_ok": bool(gaps.size == 0 or gaps.min() >= gap_floor * (1 - 1e-9)),
        }


def build_geometry(h0: IntegrablePart, interval, eps: float, K: int,
                   n_samples: int = 200) -> ResonanceGeometry:
    pf = np.linspace(interval[0], interval[1], n_samples)
    ns = h0.n - 1
    ps = np.zeros((n_samples, ns))
    res = np.zeros(n_samples)
    guess = None
    for i, x in enumerate(pf):
        ps[i], res[i] = solve_p_star(h0, float(x), guess)
        guess = ps[i]
    qs = punctures(h0, K, interval)
    segs = passage_segments(qs, eps, interval)
    return ResonanceGeometry(h0, (float(interval[0]), float(interval[1])), eps, K,
                             pf, ps, res, qs, segs)


# ---------------------------------------------------------------------------
# genericity audit of the averaged potential


@dataclass
class Branch:
    """A continued curve of local maxima of the averaged potential."""

    sample_index: list = field(default_factory=list)
    pf: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    value: list = field(default_factory=list)
    dvalue: list = field(default_factory=list)
    neg_hess_min: list = field(default_factory=list)
    neg_hess_max: list = field(default_factory=list)
    is_global: list = field(default_factory=list)

    def arrays(self) -> dict:
        return {
            "pf": np.asarray(self.pf),
            "theta": np.asarray(self.theta),
            "value": np.asarray(self.value),
            "dvalue": np.asarray(self.dvalue),
            "neg_hess_min": np.asarray(self.neg_hess_min),
            "neg_hess_max": np.asarray(self.neg_hess_max),
            "is_global": np.asarray(self.is_global, dtype=bool),
        }


@dataclass
class GenericityReport:
    branches: list
    pf_samples: np.ndarray
    scale: float
    lam: float
    upper: float
    bifurcations: list
    gaps: list
    b: float
    b_linear: float
    tie_tol: float
    flags: dict
    notes: list

    def passed(self, keys=("G0", "G1", "G2", "T0", "T1", "T2", "G1p", "G2p")) -> bool:
        return all(self.flags.get(k, False) for k in keys)


class _ZSlice:
    """The averaged potential and its slow-angle calculus along p_*(p^f)."""

    def __init__(self, Z: TrigPolyHamiltonian, h0: IntegrablePart):
        self.Z = Z
        self.h0 = h0
        self.n = Z.n
        self.ns = Z.n - 1
        self.period = Z.periods[0]
        width = 2 * self.n + 1
        def unit(i):
            a = [0] * width
            a[i] = 1
            return a
        self._grad = [Z.partial(unit(i)) for i in range(self.ns)]
        self._hess = [[Z.partial(self._pair(i, j)) for j in range(self.ns)]
                      for i in range(self.ns)]
        self._gradp = [Z.partial(unit(self.n + i)) for i in range(self.n)]

    def _pair(self, i, j):
        a = [0] * (2 * self.n + 1)
        a[i] += 1
        a[j] += 1
        return a

    def _full_theta(self, theta_s):
        theta_s = np.asarray(theta_s, dtype=float)
        pad = np.zeros(theta_s.shape[:-1] + (1,))
        return np.concatenate([theta_s, pad], axis=-1)

    def value(self, theta_s, p):
        return self.Z.value(self._full_theta(theta_s), p, 0.0)

    def grad(self, theta_s, p):
        th = self._full_theta(theta_s)
        return np.stack([g.value(th, p, 0.0) for g in self._grad], axis=-1)

    def hess(self, theta_s, p):
        th = self._full_theta(theta_s)
        rows = [np.stack([self._hess[i][j].value(th, p, 0.0) for j in range(self.ns)],
                         axis=-1) for i in range(self.ns)]
        return np.stack(rows, axis=-2)

    def dvalue_along_curve(self, theta_s, p):
        # envelope: the theta-gradient vanishes at a critical point, so the
        # derivative of the branch value reduces to the p-gradient dotted
        # with the tangent of p_*.
        th = self._full_theta(theta_s)
        gp = np.stack([g.value(th, p, 0.0) for g in self._gradp], axis=-1)
        B = self.h0.hess(p)
        ns = self.ns
        tangent = np.ones(self.n)
        if ns:
            tangent[:ns] = -np.linalg.solve(B[:ns, :ns], B[:ns, -1])
        return float(gp @ tangent)

    def local_maxima(self, p, grid: int = 256):
        """Grid seeding plus Newton polish; returns (thetas, degenerate_seen)."""
        ns = self.ns
        axes = [np.linspace(0.0, self.period, grid, endpoint=False)] * ns
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1).reshape(-1, ns)
        vals = self.value(pts, p).reshape([grid] * ns)
        mask = np.ones_like(vals, dtype=bool)
        for axis in range(ns):
            for shift in (1, -1):
                mask &= vals >= np.roll(vals, shift, axis=axis)
        seeds = pts.reshape([grid] * ns + [ns])[mask]
        found = []
        degenerate = False
        for seed in seeds:
            theta = seed.copy()
            ok = False
            for _ in range(40):
                g = self.grad(theta, p)
                Hm = self.hess(theta, p)
                try:
                    step = np.linalg.solve(Hm, g)
                except np.linalg.LinAlgError:
                    break
                theta = theta - step
                if np.linalg.norm(self.grad(theta, p)) <= 1e-12:
                    ok = True
                    break
            if not ok:
                degenerate = True
                continue
            Hm = self.hess(theta, p)
            eigs = np.linalg.eigvalsh(-Hm)
            if eigs.min() <= 1e-10:
                degenerate = True
                continue
            theta = np.mod(theta, self.period)
            if any(np.all(torus_dist(theta, f, self.period) < 1e-8) for f in found):
                continue
            found.append(theta)
        return found, degenerate


def check_genericity(Z: TrigPolyHamiltonian, geometry, pf_interval=None,
                     grid: int = 256, n_pf: int = 97,
                     tie_tol: float = 1e-9) -> GenericityReport:
    """Audit the branch structure of the averaged potential along p_*.

    ``geometry`` is a ResonanceGeometry (or a bare IntegrablePart, in which
    case ``pf_interval`` is required).  Locates all nondegenerate local
    maxima per sample, continues them into branches, finds bifurcations of
    the global maximum by bisection, and measures the spectral window, the
    derivative gap at each bifurcation, and the wedge constants.  Flags
    report each condition separately; a tie of more than two global maxima
    sets the two-maximum flag false instead of raising.
    """
    if isinstance(geometry, ResonanceGeometry):
        h0 = geometry.h0
        if pf_interval is None:
            pf_interval = geometry.interval
    else:
        h0 = geometry
        if pf_interval is None:
            raise ValueError("pf_interval required without a ResonanceGeometry")
    if Z.n < 2:
        raise ValueError("need at least one slow and one fast angle")
    slice_ = _ZSlice(Z, h0)
    ns = slice_.ns
    notes: list[str] = []
    scale = max(1.0, cr_norm(Z, 3, method="coeff", box=h0.box))
    pf_samples = np.linspace(pf_interval[0], pf_interval[1], n_pf)

    p_of = {}
    guess = None
    for i, pf in enumerate(pf_samples):
        ps, _ = solve_p_star(h0, float(pf), guess)
        guess = ps
        p_of[i] = np.concatenate([ps, [pf]])

    branches: list[Branch] = []
    active: dict[int, np.ndarray] = {}
    degenerate_seen = False
    tie_overflow = False
    per_sample_global: list[list[int]] = []

    for i, pf in enumerate(pf_samples):
        p = p_of[i]
        maxima, degen = slice_.local_maxima(p, grid)
        degenerate_seen |= degen
        assigned: dict[int, np.ndarray] = {}
        for theta in maxima:
            best, best_d = None, math.inf
            for bi, prev in active.items():
                d = float(np.max(torus_dist(theta, prev, slice_.period)))
                if d < best_d:
                    best, best_d = bi, d
            if best is not None and best_d < 0.1 * slice_.period and best not in assigned:
                assigned[best] = theta
            else:
                branches.append(Branch())
                assigned[len(branches) - 1] = theta
        values = {}
        for bi, theta in assigned.items():
            br = branches[bi]
            v = float(slice_.value(theta, p))
            eigs = np.linalg.eigvalsh(-slice_.hess(theta, p))
            br.sample_index.append(i)
            br.pf.append(float(pf))
            br.theta.append(theta)
            br.value.append(v)
            br.dvalue.append(slice_.dvalue_along_curve(theta, p))
            br.neg_hess_min.append(float(eigs.min()))
            br.neg_hess_max.append(float(eigs.max()))
            values[bi] = v
        active = dict(assigned)
        if values:
            vmax = max(values.values())
            tied = sorted((bi for bi, v in values.items() if v >= vmax - tie_tol),
                          key=lambda bi: -values[bi])
            if len(tied) > 2:
                tie_overflow = True
            per_sample_global.append(tied)
            for bi in assigned:
                branches[bi].is_global.append(bi in tied)
        else:
            per_sample_global.append([])

    # bifurcations: the identity of the leading global branch changes
    bifurcations, gaps = [], []
    for i in range(len(pf_samples) - 1):
        g0, g1 = per_sample_global[i], per_sample_global[i + 1]
        if not g0 or not g1:
            continue
        lead0, lead1 = g0[0], g1[0]
        if lead0 == lead1:
            continue
        a = _bisect_crossing(slice_, h0, branches, (lead0, lead1),
                             float(pf_samples[i]), float(pf_samples[i + 1]))
        if a is None:
            continue
        pf_b, th_a, th_b = a
        if bifurcations and abs(pf_b - bifurcations[-1]) <= 1e-8:
            continue
        p = np.concatenate([solve_p_star(h0, pf_b)[0], [pf_b]])
        gap = abs(slice_.dvalue_along_curve(th_a, p)
                  - slice_.dvalue_along_curve(th_b, p))
        bifurcations.append(pf_b)
        gaps.append(gap)

    global_branches = [b for b in branches if any(b.is_global)]
    if global_branches:
        lam_raw = min(min(b.neg_hess_min) for b in global_branches)
        upper_raw = max(max(b.neg_hess_max) for b in global_branches)
    else:
        lam_raw, upper_raw = 0.0, 0.0
        notes.append("no nondegenerate maxima found")
    lam = lam_raw / scale
    upper = upper_raw / scale

    b_sq, b_lin = _wedge_constants(slice_, h0, branches, per_sample_global,
                                   pf_samples, p_of, bifurcations, scale,
                                   lam, grid)
    flags = {
        "G0": bool(lam_raw > 0 and upper <= 1.0 + 1e-12),
        "G1": bool(not tie_overflow and global_branches),
        "T0": bool(not degenerate_seen and global_branches),
        "T1": bool(not tie_overflow),
        "G1p": bool(b_sq > 0),
        "G2p": bool(b_sq > 0),
    }
    flags["G2"] = bool(all(g > 1e-9 for g in gaps)) if gaps else True
    flags["T2"] = flags["G2"]
    return GenericityReport(branches, pf_samples, scale, lam, upper,
                            bifurcations, gaps, b_sq, b_lin, tie_tol, flags,
                            notes)


def _polish_max(slice_, theta, p):
    theta = np.asarray(theta, dtype=float).copy()
    for _ in range(40):
        g = slice_.grad(theta, p)
        if np.linalg.norm(g) <= 1e-13:
            break
        theta = theta - np.linalg.solve(slice_.hess(theta, p), g)
    return theta


def _branch_theta_near(branch: Branch, pf: float):
    arr = np.asarray(branch.pf)
    idx = int(np.argmin(np.abs(arr - pf)))
    return np.asarray(branch.theta[idx])


def _bisect_crossing(slice_, h0, branches, pair, lo, hi, tol=1e-10):
    b0, b1 = branches[pair[0]], branches[pair[1]]

    def values(pf):
        ps, _ = solve_p_star(h0, pf)
        p = np.concatenate([ps, [pf]])
        th0 = _polish_max(slice_, _branch_theta_near(b0, pf), p)
        th1 = _polish_max(slice_, _branch_theta_near(b1, pf), p)
        return (float(slice_.value(th0, p)) - float(slice_.value(th1, p)),
                th0, th1)

    f_lo, _, _ = values(lo)
    f_hi, _, _ = values(hi)
    if f_lo == 0.0:
        _, th0, th1 = values(lo)
        return lo, th0, th1
    if f_lo * f_hi > 0:
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol:
            break
        f_mid, _, _ = values(mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if (f_mid > 0) == (f_lo > 0):
            lo = mid
        else:
            hi = mid
    pf_b = 0.5 * (lo + hi)
    _, th0, th1 = values(pf_b)
    return pf_b, th0, th1


def _wedge_constants(slice_, h0, branches, per_sample_global, pf_samples,
                     p_of, bifurcations, scale, lam, grid):
    """Self-consistent wedge constant b for the two quadratic lower bounds.

    b plays a double role: it is the margin splitting the fast-action range
    into near-bifurcation and single-peak windows, and it is the constant in
    the quadratic wedge below the maxima.  We iterate downward from lambda/4
    until the measured infimum of the wedge ratios on the b-windows supports
    the same b.  Near a bifurcation the distance is taken to the nearest of
    the two competing maxima; in the single-peak window, to the leading one.
    The best linear-form constant outside a b-ball is recorded alongside.
    """
    if lam <= 0:
        return 0.0, 0.0
    b_cap = 0.2499 * lam
    ns = slice_.ns
    axes = [np.linspace(0.0, slice_.period, max(grid, 256), endpoint=False)] * ns
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, ns)

    relevant = [bi for bi, br in enumerate(branches) if any(br.is_global)]
    samples = []
    for i, tied in enumerate(per_sample_global):
        if not tied:
            continue
        p = p_of[i]
        thetas = []
        for bi in relevant:
            br = branches[bi]
            if i in br.sample_index:
                thetas.append(np.asarray(br.theta[br.sample_index.index(i)]))
        lead = branches[tied[0]]
        th_lead = np.asarray(lead.theta[lead.sample_index.index(i)])
        vmax = float(slice_.value(th_lead, p))
        gap = np.maximum(vmax - slice_.value(pts, p), 0.0) / scale
        d_all = np.stack([np.linalg.norm(torus_dist(pts, th, slice_.period), axis=-1)
                          for th in thetas], axis=0).min(axis=0)
        d_lead = np.linalg.norm(torus_dist(pts, th_lead, slice_.period), axis=-1)
        samples.append((float(pf_samples[i]), gap, d_all, d_lead))

    if not samples:
        return 0.0, 0.0

    def infimum(margin):
        ratio = math.inf
        for pf, gap, d_all, d_lead in samples:
            d = d_all if any(abs(pf - a) <= margin for a in bifurcations) else d_lead
            safe = d > 1e-6
            if np.any(safe):
                ratio = min(ratio, float(np.min(gap[safe] / d[safe] ** 2)))
        return 0.0 if ratio is math.inf else ratio

    b = b_cap
    for _ in range(40):
        b_new = min(b_cap, 0.999 * infimum(b))
        if b_new >= b - 1e-14:
            break
        b = b_new
        if b <= 1e-12:
            b = 0.0
            break

    ratio_lin = math.inf
    for pf, gap, d_all, d_lead in samples:
        d = d_all if any(abs(pf - a) <= max(b, 1e-9) for a in bifurcations) else d_lead
        outside = d >= max(b, 1e-3)
        if np.any(outside):
            ratio_lin = min(ratio_lin, float(np.min(gap[outside] / d[outside])))
    b_lin = max(0.0, min(b_cap, 0.999 * (0.0 if ratio_lin is math.inf else ratio_lin)))
    return b, b_lin
