"""Hamiltonians assembled from action polynomials and finite Fourier sums.

Three layers: an integrable part H0(p) given by a convex polynomial, a
perturbation H1(theta, p, t) given by finitely many Fourier modes whose
coefficients are polynomials in p, and the combination H0 + eps*H1.  All
derivatives are exact (polynomial calculus in p, frequency factors in the
angles), so no downstream estimate inherits finite-difference noise.

Angles live on the unit torus unless a slot declares a longer period; a mode
k contributes the phase exp(2*pi*1j * sum_j k_j*phi_j/period_j) where
phi = (theta_1, ..., theta_n, t).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class UnsupportedOrderError(ValueError):
    """Derivative order beyond what exact evaluation supports."""


class DomainError(ValueError):
    """Point outside the representation box of the Hamiltonian."""


class NonConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance."""


class ConvexityError(NonConvergenceError):
    """Newton failed on the Legendre transform; the Hamiltonian is not
    effectively convex at the requested point (perturbation too large)."""


def mode_order(k) -> int:
    """Max-degree [k] of a mode, with the convention [0] = 1."""
    m = int(np.max(np.abs(k))) if len(k) else 0
    return m if m > 0 else 1


# ---------------------------------------------------------------------------
# polynomials in the action variables


def _clean_coeffs(nvars: int, coeffs: Mapping) -> dict:
    out: dict[tuple[int, ...], complex] = {}
    for e, c in coeffs.items():
        e = tuple(int(x) for x in e)
        if len(e) != nvars or any(x < 0 for x in e):
            raise ValueError(f"bad exponent {e} for {nvars} variables")
        c = complex(c)
        if c != 0:
            out[e] = out.get(e, 0.0) + c
    return {e: c for e, c in out.items() if c != 0}


@dataclass
class Poly:
    """Multivariate polynomial as a map exponent tuple -> complex coefficient.

    Immutable by convention; all arithmetic returns new instances.  Evaluation
    is vectorized over a trailing axis of points.
    """

    nvars: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = _clean_coeffs(self.nvars, self.coeffs)

    @classmethod
    def constant(cls, nvars: int, c) -> "Poly":
        return cls(nvars, {(0,) * nvars: complex(c)})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Poly":
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.nvars:
            raise ValueError(f"expected last axis {self.nvars}, got {p.shape}")
        acc = np.zeros(p.shape[:-1], dtype=complex)
        for e, c in self.coeffs.items():
            term = np.ones(p.shape[:-1])
            for i, ei in enumerate(e):
                if ei:
                    term = term * p[..., i] ** ei
            acc = acc + c * term
        return acc

    def diff(self, i: int) -> "Poly":
        out = {}
        for e, c in self.coeffs.items():
            if e[i] == 0:
                continue
            e2 = list(e)
            e2[i] -= 1
            out[tuple(e2)] = out.get(tuple(e2), 0.0) + c * e[i]
        return Poly(self.nvars, out)

    def partial(self, beta) -> "Poly":
        q = self
        for i, bi in enumerate(beta):
            for _ in range(int(bi)):
                q = q.diff(i)
        return q

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.nvars, other)
        out = dict(self.coeffs)
        for e, c in other.coeffs.items():
            out[e] = out.get(e, 0.0) + c
        return Poly(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.nvars, {e: -c for e, c in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, Poly) else Poly.constant(self.nvars, -complex(other)))

    def __mul__(self, other):
        if isinstance(other, Poly):
            out: dict[tuple[int, ...], complex] = {}
            for e1, c1 in self.coeffs.items():
                for e2, c2 in other.coeffs.items():
                    e = tuple(a + b for a, b in zip(e1, e2))
                    out[e] = out.get(e, 0.0) + c1 * c2
            return Poly(self.nvars, out)
        return Poly(self.nvars, {e: c * complex(other) for e, c in self.coeffs.items()})

    __rmul__ = __mul__

    def conjugate(self) -> "Poly":
        return Poly(self.nvars, {e: np.conj(c) for e, c in self.coeffs.items()})

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.coeffs), default=0)

    def max_imag(self) -> float:
        return max((abs(c.imag) for c in self.coeffs.values()), default=0.0)

    def bound_on_box(self, box) -> float:
        """Rigorous sup bound over a product box: l1 sum of |coeff| * extremal monomial."""
        box = np.asarray(box, dtype=float)
        total = 0.0
        for e, c in self.coeffs.items():
            m = 1.0
            for i, ei in enumerate(e):
                if ei:
                    m *= max(abs(box[i, 0]), abs(box[i, 1])) ** ei
            total += abs(c) * m
        return total


# ---------------------------------------------------------------------------
# integrable part


@dataclass
class IntegrablePart:
    """Convex polynomial H0(p) with its convexity constant and action box."""

    poly: Poly
    D: float
    box: np.ndarray

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float).reshape(self.n, 2)
        if self.poly.max_imag() > 0:
            raise ValueError("H0 must have real coefficients")
        self._grad = [self.poly.diff(i) for i in range(self.n)]
        self._hess = [[self._grad[i].diff(j) for j in range(self.n)] for i in range(self.n)]

    @property
    def n(self) -> int:
        return self.poly.nvars

    def contains(self, p, slack: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        lo = self.box[:, 0] - slack
        hi = self.box[:, 1] + slack
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def value(self, p) -> np.ndarray:
        return self.poly(p).real

    def grad(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.stack([g(p).real for g in self._grad], axis=-1)

    def hess(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        rows = [np.stack([self._hess[i][j](p).real for j in range(self.n)], axis=-1)
                for i in range(self.n)]
        return np.stack(rows, axis=-2)

    def partial(self, beta) -> Poly:
        return self.poly.partial(beta)

    def convexity_margin(self, samples_per_dim: int = 9):
        """Min and max Hessian eigenvalue over a sampling grid of the box,
        plus whether they respect [1/D, D]."""
        axes = [np.linspace(lo, hi, samples_per_dim) for lo, hi in self.box]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)
        eigs = np.linalg.eigvalsh(self.hess(grid))
        lo, hi = float(eigs.min()), float(eigs.max())
        ok = lo >= 1.0 / self.D - 1e-12 and hi <= self.D + 1e-12
        return ok, lo, hi


# ---------------------------------------------------------------------------
# trigonometric polynomials


@dataclass
class TrigPolyHamiltonian:
    """Finite Fourier sum over (theta, t) modes with Poly coefficients in p.

    ``modes`` maps an integer vector k of length n+1 (last slot is time) to
    the complex coefficient polynomial h_k(p).  Real-valuedness is encoded by
    the Hermitian pairing h_{-k} = conj(h_k); ``hermitian_defect`` measures
    violations.  ``periods`` stretches individual angle slots (used by the
    double cover); the phase of slot j is 2*pi*k_j/periods[j].
    """

    n: int
    modes: dict
    periods: tuple = None
    r: int = 4

    def __post_init__(self):
        if self.periods is None:
            self.periods = (1.0,) * (self.n + 1)
        self.periods = tuple(float(x) for x in self.periods)
        if len(self.periods) != self.n + 1:
            raise ValueError("periods must have length n+1")
        clean = {}
        for k, poly in self.modes.items():
            k = tuple(int(x) for x in k)
            if len(k) != self.n + 1:
                raise ValueError(f"mode {k} must have length n+1 = {self.n + 1}")
            if not isinstance(poly, Poly):
                poly = Poly.constant(self.n, poly) if np.isscalar(poly) else Poly(self.n, poly)
            if poly.nvars != self.n:
                raise ValueError("coefficient polynomial has wrong arity")
            if poly.coeffs:
                clean[k] = clean[k] + poly if k in clean else poly
        self.modes = clean
        self._freq = {k: 2.0 * math.pi * np.asarray(k, dtype=float) / np.asarray(self.periods)
                      for k in self.modes}
        self._partial_cache: dict = {}

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zero(cls, n: int, periods=None) -> "TrigPolyHamiltonian":
        return cls(n, {}, periods)

    @classmethod
    def cosine(cls, n: int, k, amplitude=1.0, periods=None) -> "TrigPolyHamiltonian":
        """amplitude * cos(2*pi*k.(theta,t)) as a Hermitian mode pair."""
        k = tuple(int(x) for x in k)
        mk = tuple(-x for x in k)
        half = Poly.constant(n, 0.5 * amplitude)
        if k == mk:
            return cls(n, {k: Poly.constant(n, amplitude)}, periods)
        return cls(n, {k: half, mk: half}, periods)

    @classmethod
    def sine(cls, n: int, k, amplitude=1.0, periods=None) -> "TrigPolyHamiltonian":
        k = tuple(int(x) for x in k)
        mk = tuple(-x for x in k)
        if k == mk:
            return cls(n, {}, periods)
        return cls(n, {k: Poly.constant(n, -0.5j * amplitude),
                       mk: Poly.constant(n, 0.5j * amplitude)}, periods)

    def with_poly_factor(self, poly: Poly) -> "TrigPolyHamiltonian":
        return TrigPolyHamiltonian(self.n, {k: q * poly for k, q in self.modes.items()},
                                   self.periods, self.r)

    def __add__(self, other: "TrigPolyHamiltonian") -> "TrigPolyHamiltonian":
        if other is None or (np.isscalar(other) and other == 0):
            return self
        if self.periods != other.periods or self.n != other.n:
            raise ValueError("incompatible layouts")
        out = dict(self.modes)
        for k, q in other.modes.items():
            out[k] = out[k] + q if k in out else q
        return TrigPolyHamiltonian(self.n, out, self.periods, max(self.r, other.r))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, TrigPolyHamiltonian):
            if self.periods != other.periods or self.n != other.n:
                raise ValueError("incompatible layouts")
            out: dict = {}
            for k1, q1 in self.modes.items():
                for k2, q2 in other.modes.items():
                    k = tuple(a + b for a, b in zip(k1, k2))
                    prod = q1 * q2
                    out[k] = out[k] + prod if k in out else prod
            return TrigPolyHamiltonian(self.n, out, self.periods, max(self.r, other.r))
        return TrigPolyHamiltonian(self.n, {k: q * other for k, q in self.modes.items()},
                                   self.periods, self.r)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other

    # -- calculus ------------------------------------------------------------

    def _phases(self, theta, t) -> dict:
        theta = np.asarray(theta, dtype=float)
        t = np.asarray(t, dtype=float)
        out = {}
        for k in self.modes:
            f = self._freq[k]
            arg = t * f[-1]
            for j in range(self.n):
                if k[j]:
                    arg = arg + f[j] * theta[..., j]
            out[k] = np.exp(1j * arg)
        return out

    def value_complex(self, theta, p, t) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        phases = self._phases(theta, t)
        acc = 0.0
        for k, poly in self.modes.items():
            acc = acc + poly(p) * phases[k]
        shape = np.broadcast_shapes(np.asarray(theta).shape[:-1], p.shape[:-1],
                                    np.asarray(t, dtype=float).shape)
        return np.broadcast_to(np.asarray(acc, dtype=complex), shape).copy()

    def value(self, theta, p, t) -> np.ndarray:
        return self.value_complex(theta, p, t).real

    def hermitian_defect(self) -> float:
        """Sup of the coefficient mismatch between h_{-k} and conj(h_k)."""
        worst = 0.0
        for k, poly in self.modes.items():
            mk = tuple(-x for x in k)
            other = self.modes.get(mk, Poly(self.n, {}))
            diff = other - poly.conjugate()
            worst = max(worst, max((abs(c) for c in diff.coeffs.values()), default=0.0))
        return worst

    def partial(self, alpha) -> "TrigPolyHamiltonian":
        """Exact partial derivative; alpha has length 2n+1 ordered
        (theta_1..theta_n, p_1..p_n, t)."""
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != 2 * self.n + 1:
            raise ValueError(f"alpha must have length {2 * self.n + 1}")
        if alpha in self._partial_cache:
            return self._partial_cache[alpha]
        a_theta, a_p, a_t = alpha[: self.n], alpha[self.n: 2 * self.n], alpha[-1]
        out = {}
        for k, poly in self.modes.items():
            f = self._freq[k]
            factor = (1j * f[-1]) ** a_t
            for j in range(self.n):
                if a_theta[j]:
                    factor = factor * (1j * f[j]) ** a_theta[j]
            if factor == 0:
                continue
            q = poly.partial(a_p) * factor
            if q.coeffs:
                out[k] = out[k] + q if k in out else q
        res = TrigPolyHamiltonian(self.n, out, self.periods, max(self.r - sum(alpha), 0))
        self._partial_cache[alpha] = res
        return res

    def grad_theta(self, theta, p, t) -> np.ndarray:
        cols = []
        for j in range(self.n):
            a = [0] * (2 * self.n + 1)
            a[j] = 1
            cols.append(self.partial(a).value(theta, p, t))
        return np.stack(cols, axis=-1)

    def grad_p(self, theta, p, t) -> np.ndarray:
        cols = []
        for j in range(self.n):
            a = [0] * (2 * self.n + 1)
            a[self.n + j] = 1
            cols.append(self.partial(a).value(theta, p, t))
        return np.stack(cols, axis=-1)

    def hess_pp(self, theta, p, t) -> np.ndarray:
        rows = []
        for i in range(self.n):
            cols = []
            for j in range(self.n):
                a = [0] * (2 * self.n + 1)
                a[self.n + i] += 1
                a[self.n + j] += 1
                cols.append(self.partial(a).value(theta, p, t))
            rows.append(np.stack(cols, axis=-1))
        return np.stack(rows, axis=-2)

    def coefficient_norm(self, r: int, box) -> float:
        """Sum over modes of the worst order-<=r derivative bound; dominates
        every grid measurement of the same norm."""
        total = 0.0
        for k, poly in self.modes.items():
            wmax = mode_order_frequency(k, self.periods)
            best = 0.0
            for b in range(r + 1):
                pb = 0.0
                for beta in _multi_indices(self.n, b):
                    pb = max(pb, poly.partial(beta).bound_on_box(box))
                best = max(best, pb * wmax ** (r - b))
            total += best
        return total


def mode_order_frequency(k, periods) -> float:
    """Largest angular frequency magnitude of a mode, with floor 1 so that
    the [0] = 1 convention survives the frequency form."""
    w = max((2.0 * math.pi * abs(kj) / per for kj, per in zip(k, periods)), default=0.0)
    return max(w, 1.0)


def _multi_indices(nvars: int, total: int):
    if nvars == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _multi_indices(nvars - 1, total - head):
            yield (head,) + rest


# ---------------------------------------------------------------------------
# phase points and the combined Hamiltonian


@dataclass(frozen=True)
class PhasePoint:
    """A point (theta, p, t) with angles reduced into [0, 1) per unit period."""

    theta: np.ndarray
    p: np.ndarray
    t: float

    def __init__(self, theta, p, t):
        theta = np.mod(np.asarray(theta, dtype=float), 1.0)
        theta = np.where(theta >= 1.0, 0.0, theta)  # guard against mod returning 1.0
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "p", np.asarray(p, dtype=float))
        tt = float(t) % 1.0
        object.__setattr__(self, "t", 0.0 if tt >= 1.0 else tt)

    def reduced(self) -> "PhasePoint":
        return PhasePoint(self.theta, self.p, self.t)


@dataclass
class NearlyIntegrable:
    """H0(p) + eps * H1(theta, p, t) with exact combined calculus."""

    h0: IntegrablePart
    h1: TrigPolyHamiltonian
    eps: float

    def __post_init__(self):
        if self.h1 is None:
            self.h1 = TrigPolyHamiltonian.zero(self.h0.n)
        if self.h1.n != self.h0.n:
            raise ValueError("H0 and H1 dimension mismatch")

    @property
    def n(self) -> int:
        return self.h0.n

    def value(self, theta, p, t):
        return self.h0.value(p) + self.eps * self.h1.value(theta, p, t)

    def grad_theta(self, theta, p, t):
        return self.eps * self.h1.grad_theta(theta, p, t)

    def grad_p(self, theta, p, t):
        return self.h0.grad(p) + self.eps * self.h1.grad_p(theta, p, t)

    def hess_pp(self, theta, p, t):
        return self.h0.hess(p) + self.eps * self.h1.hess_pp(theta, p, t)


@dataclass(frozen=True)
class AngleCoordinate:
    """The observable theta_i (or t for index n), usable in bracket checks."""

    n: int
    index: int


# ---------------------------------------------------------------------------
# operations


def _check_alpha(alpha, width):
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != width:
        raise ValueError(f"alpha must have length {width}")
    if any(a < 0 for a in alpha):
        raise ValueError("alpha components must be nonnegative")
    if sum(alpha) > 4:
        raise UnsupportedOrderError(f"derivative order {sum(alpha)} > 4")
    return alpha


def evaluate(H, x: PhasePoint, alpha=None) -> float:
    """Exact value or partial derivative of H at a phase point.

    ``alpha`` orders the variables (theta_1..theta_n, p_1..p_n, t); total
    order at most 4.  Points with p outside the representation box are
    rejected when the object carries one.
    """
    if isinstance(H, NearlyIntegrable):
        if not H.h0.contains(x.p):
            raise DomainError(f"p = {x.p} outside action box")
        v0 = evaluate(H.h0, x, alpha)
        v1 = evaluate(H.h1, x, alpha)
        return v0 + H.eps * v1
    if isinstance(H, IntegrablePart):
        n = H.n
        if not H.contains(x.p):
            raise DomainError(f"p = {x.p} outside action box")
        if alpha is None:
            return float(H.value(x.p))
        alpha = _check_alpha(alpha, 2 * n + 1)
        a_theta, a_p, a_t = alpha[:n], alpha[n: 2 * n], alpha[-1]
        if any(a_theta) or a_t:
            return 0.0
        return float(H.poly.partial(a_p)(np.asarray(x.p, dtype=float)).real)
    if isinstance(H, TrigPolyHamiltonian):
        if alpha is None:
            return float(H.value(x.theta, x.p, x.t))
        alpha = _check_alpha(alpha, 2 * H.n + 1)
        return float(H.partial(alpha).value(x.theta, x.p, x.t))
    if isinstance(H, Poly):
        n = H.nvars
        if alpha is None:
            return float(H(np.asarray(x.p, dtype=float)).real)
        alpha = _check_alpha(alpha, 2 * n + 1)
        if any(alpha[:n]) or alpha[-1]:
            return 0.0
        return float(H.partial(alpha[n: 2 * n])(np.asarray(x.p, dtype=float)).real)
    if isinstance(H, AngleCoordinate):
        n = H.n
        if alpha is None:
            return float(x.t if H.index == n else x.theta[H.index])
        alpha = _check_alpha(alpha, 2 * n + 1)
        want = [0] * (2 * n + 1)
        want[-1 if H.index == n else H.index] = 1
        return 1.0 if list(alpha) == want else 0.0
    raise TypeError(f"cannot evaluate {type(H).__name__}")


def resonant_average(h1: TrigPolyHamiltonian) -> TrigPolyHamiltonian:
    """Sub-sum over modes whose fast-angle and time indices vanish.

    The result depends only on the slow angles and p; applying the operation
    twice equals applying it once.
    """
    keep = {k: poly for k, poly in h1.modes.items() if k[h1.n - 1] == 0 and k[h1.n] == 0}
    return TrigPolyHamiltonian(h1.n, keep, h1.periods, h1.r)


def kappa_m(m: int, shells: int = 100000) -> float:
    """Upper bound for sum_k [k]^(-m-1) over integer vectors of length m,
    by exact shell counts plus an integral tail bound."""
    j = np.arange(1, shells + 1, dtype=float)
    counts = (2 * j + 1) ** m - (2 * j - 1) ** m
    partial = 1.0 + float(np.sum(counts * j ** (-m - 1)))
    # counts <= 2m(2j+1)^(m-1) <= 2m(3j)^(m-1); tail sum_{j>J} j^-2 <= 1/J
    tail = 2 * m * 3 ** (m - 1) / shells
    return partial + tail


def tail_truncate(H: TrigPolyHamiltonian, K: int):
    """Split modes at [k] <= K and bound the sup of the discarded tail.

    Returns (low, tail, tail_bound); the bound is kappa_m * K^(m-r+1) times
    the coefficient-sum C^r norm, with m the number of angle slots.  It is a
    genuine upper bound for the tail sup whenever r >= m+1.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    low = {k: q for k, q in H.modes.items() if mode_order(k) <= K}
    tail = {k: q for k, q in H.modes.items() if mode_order(k) > K}
    low_h = TrigPolyHamiltonian(H.n, low, H.periods, H.r)
    tail_h = TrigPolyHamiltonian(H.n, tail, H.periods, H.r)
    m = H.n + 1
    box = _default_box(H.n)
    norm = cr_norm(H, H.r, method="coeff", box=box)
    bound = kappa_m(m) * float(K) ** (m - H.r + 1) * norm
    return low_h, tail_h, bound


def _default_box(n: int):
    return np.array([[-1.0, 1.0]] * n)


def cr_norm(H, r: int, method: str = "coeff", box=None, grid_per_angle: int = 24,
            grid_per_p: int = 7) -> float:
    """C^r norm (max over partial derivatives of order <= r).

    ``coeff`` returns the rigorous coefficient-sum upper bound; ``grid``
    measures the sup over a sampling grid and never exceeds the former.
    """
    if isinstance(H, IntegrablePart):
        box = H.box if box is None else np.asarray(box, dtype=float)
        if method == "coeff":
            best = 0.0
            for b in range(r + 1):
                for beta in _multi_indices(H.n, b):
                    best = max(best, H.poly.partial(beta).bound_on_box(box))
            return best
        axes = [np.linspace(lo, hi, grid_per_p) for lo, hi in box]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, H.n)
        best = 0.0
        for b in range(r + 1):
            for beta in _multi_indices(H.n, b):
                best = max(best, float(np.max(np.abs(H.poly.partial(beta)(grid).real))))
        return best
    if not isinstance(H, TrigPolyHamiltonian):
        raise TypeError(f"cannot take a C^r norm of {type(H).__name__}")
    box = _default_box(H.n) if box is None else np.asarray(box, dtype=float).reshape(H.n, 2)
    if method == "coeff":
        return H.coefficient_norm(r, box)
    if method != "grid":
        raise ValueError(f"unknown method {method!r}")
    if r > 4:
        raise UnsupportedOrderError("grid-sup supports r <= 4 only")
    per = np.asarray(H.periods)
    angle_axes = [np.linspace(0.0, per[j], grid_per_angle, endpoint=False)
                  for j in range(H.n)]
    t_axis = np.linspace(0.0, per[-1], grid_per_angle, endpoint=False)
    p_axes = [np.linspace(lo, hi, grid_per_p) for lo, hi in box]
    mesh = np.meshgrid(*angle_axes, *p_axes, t_axis, indexing="ij")
    theta = np.stack(mesh[: H.n], axis=-1).reshape(-1, H.n)
    p = np.stack(mesh[H.n: 2 * H.n], axis=-1).reshape(-1, H.n)
    t = mesh[-1].reshape(-1)
    best = 0.0
    for total in range(r + 1):
        for alpha in _multi_indices(2 * H.n + 1, total):
            vals = H.partial(alpha).value(theta, p, t)
            best = max(best, float(np.max(np.abs(vals))) if vals.size else 0.0)
    return best


def legendre(H, t, theta, v, p0=None, tol: float = 1e-12, max_iter: int = 50):
    """Legendre transform sup_p [p.v - H(t, theta, p)] by damped Newton.

    Returns (L_value, p_max) with gradient residual below ``tol``.  Accepts a
    NearlyIntegrable or IntegrablePart; theta/v may carry leading batch axes.
    """
    if isinstance(H, IntegrablePart):
        H = NearlyIntegrable(H, None, 0.0)
    n = H.n
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    batch = np.broadcast_shapes(theta.shape[:-1], v.shape[:-1])
    theta = np.broadcast_to(theta, batch + (n,)).copy()
    v = np.broadcast_to(v, batch + (n,)).copy()
    p = np.broadcast_to(np.asarray(p0, dtype=float), batch + (n,)).copy() if p0 is not None \
        else v.copy()
    t = np.broadcast_to(np.asarray(t, dtype=float), batch).copy()

    def residual(pc):
        return H.grad_p(theta, pc, t) - v

    res = residual(p)
    rnorm = np.linalg.norm(res, axis=-1)
    for _ in range(max_iter):
        if np.all(rnorm <= tol):
            break
        hess = H.hess_pp(theta, p, t)
        step = np.linalg.solve(hess, res[..., None])[..., 0]
        lam = np.ones(batch)
        for _ in range(30):
            trial = p - lam[..., None] * step
            tn = np.linalg.norm(residual(trial), axis=-1)
            improved = tn <= (1.0 - 0.25 * lam) * rnorm + 1e-15
            if np.all(improved):
                break
            lam = np.where(improved, lam, lam * 0.5)
        p = p - lam[..., None] * step
        res = residual(p)
        rnorm = np.linalg.norm(res, axis=-1)
    if not np.all(rnorm <= tol):
        raise ConvexityError(
            f"Legendre Newton stalled at residual {float(np.max(rnorm)):.3e}")
    L = np.sum(p * v, axis=-1) - H.value(theta, p, t)
    if batch == ():
        return float(L), p
    return L, p


def poisson_bracket(F, G, x: PhasePoint) -> float:
    """{F, G} = sum_i dF/dtheta_i dG/dp_i - dF/dp_i dG/dtheta_i at x."""

    def partials(H, n):
        gth = np.zeros(n)
        gp = np.zeros(n)
        for i in range(n):
            a = [0] * (2 * n + 1)
            a[i] = 1
            gth[i] = evaluate(H, x, a)
            a = [0] * (2 * n + 1)
            a[n + i] = 1
            gp[i] = evaluate(H, x, a)
        return gth, gp

    def dim(H):
        if isinstance(H, Poly):
            return H.nvars
        return getattr(H, "n", None)

    n = dim(F) if dim(F) is not None else dim(G)
    fth, fp = partials(F, n)
    gth, gp = partials(G, n)
    return float(np.dot(fth, gp) - np.dot(fp, gth))


# ---------------------------------------------------------------------------
# loading


def _parse_exponent(key: str, n: int):
    parts = [s for s in key.replace("(", "").replace(")", "").replace(" ", "").split(",") if s]
    e = tuple(int(s) for s in parts)
    if len(e) != n:
        raise ValueError(f"exponent {key!r} must have {n} entries")
    return e


def _lex_positive(k) -> bool:
    for x in k:
        if x > 0:
            return True
        if x < 0:
            return False
    return False


def load_hamiltonian(source) -> NearlyIntegrable:
    """Build a NearlyIntegrable from a JSON document or an equivalent dict.

    Schema: ``n``; ``eps``; ``h0`` with ``coeffs`` {exponent string: real},
    optional ``D`` and ``box``; ``h1`` a list of {``k``: int vector of length
    n+1, ``coeff``: {exponent string: [re, im]}}, optional ``periods`` and
    ``r``.  Modes may be given for lexicographically positive k only; the
    Hermitian partner is then filled in.
    """
    if isinstance(source, (str,)):
        with open(source) as fh:
            doc = json.load(fh)
    else:
        doc = source
    n = int(doc["n"])
    eps = float(doc.get("eps", 0.0))
    h0doc = doc["h0"]
    poly = Poly(n, {_parse_exponent(k, n): float(v) for k, v in h0doc["coeffs"].items()})
    box = np.asarray(h0doc.get("box", _default_box(n)), dtype=float)
    h0 = IntegrablePart(poly, float(h0doc.get("D", 0.0)) or _estimate_D(poly, box), box)
    modes: dict = {}
    for entry in doc.get("h1", []):
        k = tuple(int(x) for x in entry["k"])
        coeffs = {}
        for ekey, val in entry["coeff"].items():
            re, im = (float(val[0]), float(val[1])) if isinstance(val, (list, tuple)) \
                else (float(val), 0.0)
            coeffs[_parse_exponent(ekey, n)] = complex(re, im)
        q = Poly(n, coeffs)
        modes[k] = modes[k] + q if k in modes else q
    completed = dict(modes)
    for k, q in modes.items():
        mk = tuple(-x for x in k)
        if mk not in modes:
            if not (_lex_positive(k) or k == mk):
                raise ValueError(f"mode {k} stored without its Hermitian partner")
            completed[mk] = q.conjugate()
    h1 = TrigPolyHamiltonian(n, completed, tuple(doc.get("periods", (1.0,) * (n + 1))),
                             int(doc.get("r", 4)))
    return NearlyIntegrable(h0, h1, eps)


def _estimate_D(poly: Poly, box) -> float:
    part = IntegrablePart(poly, 1.0, box)
    _, lo, hi = part.convexity_margin()
    if lo <= 0:
        raise ValueError("H0 is not convex on its box")
    return max(hi, 1.0 / lo) * (1 + 1e-9)
