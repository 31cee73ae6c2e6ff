"""Configuration-driven command line tying the pipeline together.

Stages run in a fixed order (genericity, normal-form, nhic, weak-kam,
orbit), each writing plot-ready CSV tables plus a JSON verdict block into
the output directory; a manifest records every file with the stage,
parameters, and pass/fail verdicts.  A failing stage halts its dependents
and leaves a partial manifest holding the failing certificate witness.
All randomness derives from the config seed, so a rerun with the same
config reproduces every CSV byte for byte.

Exit codes: 0 all stages pass, 2 a certificate failed, 3 a numerical
routine did not converge, 4 the configuration is invalid.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nhic, orbits, resonance, weakkam
from .model import (
    DomainError,
    IntegrablePart,
    NearlyIntegrable,
    NonConvergenceError,
    Poly,
    TrigPolyHamiltonian,
)
from .normalform import (
    DomainEscapeError,
    ResolutionError,
    parameter_advisor,
    resonant_average,
    sample_domain_points,
    verify_normal_form,
)

EXIT_PASS = 0
EXIT_CERT = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4

STAGE_ORDER = ("genericity", "normal-form", "nhic", "weak-kam", "orbit")

REPORT_FAMILIES = (
    ("branch", "branch.csv"),
    ("alpha", "alpha.csv"),
    ("cylinder", "cylinder.csv"),
    ("drift", "drift.csv"),
    ("orbit", "orbit.csv"),
)


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything one run needs: model, parameters, grids, toggles."""

    model: dict = field(default_factory=lambda: {"kind": "pendulum_rotator"})
    eps: float = 0.01
    delta_target: float = 0.9
    K_modes: int = 2
    beta: float = 0.2
    gamma: float = 0.5
    pf_samples: int = 17
    N: int = 64
    M: int = 4
    pf_range: tuple = (0.6, 1.4)
    cylinder_grid: tuple = (8, 5, 3)
    block_radius: float = 0.05
    nf_samples: int = 8
    c_range: tuple = (-0.5, 0.5)
    c_samples: int = 9
    orbit_T: float = 5.0
    orbit_dt: float = 1e-3
    orbit_seeds: int = 8
    stages: tuple = STAGE_ORDER
    outdir: str = "runs/out"
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.model, dict):
            raise ConfigError("model must be a JSON object")
        positives = ("eps", "delta_target", "K_modes", "beta", "gamma",
                     "pf_samples", "N", "M", "nf_samples", "c_samples",
                     "orbit_T", "orbit_dt", "orbit_seeds", "block_radius",
                     "workers")
        for name in positives:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if self.orbit_dt > orbits.DT_MAX:
            raise ConfigError(f"orbit_dt must be <= {orbits.DT_MAX}")
        self.pf_range = tuple(float(x) for x in self.pf_range)
        self.c_range = tuple(float(x) for x in self.c_range)
        if len(self.pf_range) != 2 or self.pf_range[0] >= self.pf_range[1]:
            raise ConfigError("pf_range must be an increasing pair")
        if len(self.c_range) != 2 or self.c_range[0] >= self.c_range[1]:
            raise ConfigError("c_range must be an increasing pair")
        self.cylinder_grid = tuple(int(x) for x in self.cylinder_grid)
        if len(self.cylinder_grid) != 3 or min(self.cylinder_grid) < 2:
            raise ConfigError("cylinder_grid must be three sizes >= 2")
        self.stages = tuple(self.stages)
        unknown = set(self.stages) - set(STAGE_ORDER)
        if unknown:
            raise ConfigError(f"unknown stages: {sorted(unknown)}")
        if "nhic" in self.stages:
            analytic = bool(self.model.get("analytic", True))
            if "normal-form" not in self.stages and not analytic:
                raise ConfigError(
                    "nhic requires the normal-form stage or an analytic model")
        if "weak-kam" in self.stages and (self.N < 8 or self.M < 1):
            raise ConfigError("weak-kam requires a kernel grid (N >= 8, M >= 1)")

    def ordered_stages(self) -> list:
        return [s for s in STAGE_ORDER if s in self.stages]


def load_config(path=None, overrides=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# model loading


def load_model(spec: dict, eps: float) -> tuple[NearlyIntegrable, dict]:
    """Instantiate the model named by a config block.

    Kinds: ``pendulum_rotator`` (free 2-dof kinetic part with a slow cosine
    well), ``arnold`` (pendulum-rotator with the two-wave coupling, takes
    ``mu``), and ``explicit`` (full mode table: ``n``, ``box``, ``h0`` as
    exponent-string -> coefficient, ``modes`` as cos/sin entries).
    """
    kind = spec.get("kind", "pendulum_rotator")
    if kind == "arnold":
        mu = float(spec.get("mu", 0.01))
        H = orbits.arnold_example(eps, mu)
        return H, {"kind": kind, "mu": mu, "n": 2}
    if kind == "pendulum_rotator":
        amp = float(spec.get("amplitude", -1.0))
        h0 = _free_h0(2, float(spec.get("box_halfwidth", 1.5)))
        h1 = TrigPolyHamiltonian.cosine(2, (1, 0, 0), amp)
        return NearlyIntegrable(h0, h1, eps), {"kind": kind, "amplitude": amp, "n": 2}
    if kind == "explicit":
        try:
            n = int(spec["n"])
            box = np.asarray(spec["box"], dtype=float)
            h0_coeffs = {_parse_exponents(k, n): complex(v)
                         for k, v in spec["h0"].items()}
            h0 = IntegrablePart(Poly(n, h0_coeffs), float(spec.get("D", 1.0)), box)
            h1 = TrigPolyHamiltonian.zero(n)
            for mode in spec.get("modes", []):
                k = tuple(int(x) for x in mode["k"])
                amp = float(mode.get("amplitude", 1.0))
                ctor = (TrigPolyHamiltonian.sine if mode.get("type") == "sin"
                        else TrigPolyHamiltonian.cosine)
                h1 = h1 + ctor(n, k, amp)
            return NearlyIntegrable(h0, h1, eps), {"kind": kind, "n": n}
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad explicit model: {err}") from err
    raise ConfigError(f"unknown model kind {kind!r}")


def _free_h0(n: int, half: float) -> IntegrablePart:
    coeffs = {tuple(2 * (i == j) for j in range(n)): 0.5 for i in range(n)}
    return IntegrablePart(Poly(n, coeffs), 1.0, [[-half, half]] * n)


def _time_average(h1: TrigPolyHamiltonian) -> TrigPolyHamiltonian:
    modes = {k: poly for k, poly in h1.modes.items() if k[-1] == 0}
    return TrigPolyHamiltonian(h1.n, modes, h1.periods, h1.r)


def _parse_exponents(key: str, n: int) -> tuple:
    parts = tuple(int(x) for x in str(key).split(","))
    if len(parts) != n:
        raise ConfigError(f"h0 exponent key {key!r} must have {n} entries")
    return parts


# ---------------------------------------------------------------------------
# serialization helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pipeline


class Pipeline:
    """Sequential stage runner holding the shared in-memory artifacts."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.outdir = Path(cfg.outdir)
        # build the model first so a bad config never leaves a directory behind
        self.H, self.model_meta = load_model(cfg.model, cfg.eps)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.h0 = self.H.h0
        self.h1 = self.H.h1
        # with one angle there is no slow slot, so average over time only
        self.Z = (resonant_average(self.h1) if self.h0.n > 1
                  else _time_average(self.h1))
        self.genericity = None
        self.normal_form = None
        self.cylinder = None
        self.theta_star = None
        self.manifest = {
            "seed": cfg.seed,
            "model": {**cfg.model, **self.model_meta},
            "params": {"eps": cfg.eps, "delta_target": cfg.delta_target,
                       "K_modes": cfg.K_modes, "beta": cfg.beta,
                       "gamma": cfg.gamma},
            "grids": {"pf_samples": cfg.pf_samples, "N": cfg.N, "M": cfg.M,
                      "pf_range": list(cfg.pf_range),
                      "cylinder_grid": list(cfg.cylinder_grid)},
            "stages": {},
            "files": [],
        }

    # -- bookkeeping --------------------------------------------------------

    def _record(self, stage: str, status: str, files=(), verdicts=None,
                witness=None) -> None:
        entry = {"status": status, "files": list(files),
                 "params": self._stage_params(stage)}
        if verdicts is not None:
            entry["verdicts"] = verdicts
        if witness is not None:
            entry["witness"] = witness
        self.manifest["stages"][stage] = entry
        for f in files:
            if f not in self.manifest["files"]:
                self.manifest["files"].append(f)

    def _stage_params(self, stage: str) -> dict:
        cfg = self.cfg
        if stage == "genericity":
            return {"K_modes": cfg.K_modes, "pf_samples": cfg.pf_samples,
                    "pf_range": list(cfg.pf_range)}
        if stage == "normal-form":
            return {"K_modes": cfg.K_modes, "beta": cfg.beta, "eps": cfg.eps,
                    "delta_target": cfg.delta_target, "nf_samples": cfg.nf_samples}
        if stage == "nhic":
            return {"gamma": cfg.gamma, "block_radius": cfg.block_radius,
                    "cylinder_grid": list(cfg.cylinder_grid)}
        if stage == "weak-kam":
            return {"N": cfg.N, "M": cfg.M, "c_range": list(cfg.c_range),
                    "c_samples": cfg.c_samples}
        if stage == "orbit":
            return {"T": cfg.orbit_T, "dt": cfg.orbit_dt,
                    "orbit_seeds": cfg.orbit_seeds, "seed": cfg.seed}
        return {}

    def write_manifest(self) -> Path:
        path = self.outdir / "manifest.json"
        _write_json(path, self.manifest)
        return path

    # -- stages --------------------------------------------------------------

    def run(self) -> int:
        """Run the configured stages in order; halt at the first failure."""
        code = EXIT_PASS
        pending = self.cfg.ordered_stages()
        for i, stage in enumerate(pending):
            runner = {
                "genericity": self._run_genericity,
                "normal-form": self._run_normal_form,
                "nhic": self._run_nhic,
                "weak-kam": self._run_weak_kam,
                "orbit": self._run_orbit,
            }[stage]
            try:
                ok = runner()
            except NonConvergenceError as err:
                self._record(stage, "error", witness={"error": str(err)})
                code = EXIT_NUMERIC
            except (nhic.DegeneracyError, nhic.BlockTooTightError,
                    resonance.GeometryError, nhic.MatrixDomainError,
                    DomainEscapeError, ResolutionError) as err:
                self._record(stage, "error", witness={"error": str(err)})
                code = EXIT_NUMERIC
            except (DomainError, ConfigError, ValueError) as err:
                self._record(stage, "error", witness={"error": str(err)})
                code = EXIT_CONFIG
            else:
                if not ok:
                    code = EXIT_CERT
            if code != EXIT_PASS:
                for later in pending[i + 1:]:
                    self._record(later, "halted")
                self.manifest["halted_at"] = stage
                break
        self.write_manifest()
        return code

    def _run_genericity(self) -> bool:
        cfg = self.cfg
        report = resonance.check_genericity(self.Z, self.h0, cfg.pf_range,
                                            n_pf=cfg.pf_samples)
        self.genericity = report
        qs = resonance.punctures(self.h0, cfg.K_modes, cfg.pf_range)
        ns = self.h0.n - 1
        rows = []
        for b_id, branch in enumerate(report.branches):
            arr = branch.arrays()
            for j in range(len(arr["pf"])):
                rows.append([b_id, arr["pf"][j], *np.atleast_1d(arr["theta"][j]),
                             arr["value"][j], arr["dvalue"][j],
                             arr["neg_hess_min"][j], arr["neg_hess_max"][j],
                             arr["is_global"][j]])
        header = (["branch", "pf"] + [f"theta_{i}" for i in range(ns)]
                  + ["value", "dvalue", "neg_hess_min", "neg_hess_max",
                     "is_global"])
        _write_csv(self.outdir / "branch.csv", header, rows)
        verdicts = {
            "passed": report.passed(),
            "flags": dict(report.flags),
            "lam": report.lam,
            "upper": report.upper,
            "b": report.b,
            "b_linear": report.b_linear,
            "bifurcations": list(report.bifurcations),
            "gaps": list(report.gaps),
            "punctures": [{"pf": q.pf, "k": q.k, "l": q.l} for q in qs],
            "notes": list(report.notes),
        }
        _write_json(self.outdir / "genericity.json", verdicts)
        status = "pass" if report.passed() else "fail"
        witness = None if report.passed() else {
            "failed_flags": [k for k, v in report.flags.items() if not v]}
        self._record("genericity", status,
                     ["branch.csv", "genericity.json"], verdicts, witness)
        return report.passed()

    def _run_normal_form(self) -> bool:
        cfg = self.cfg
        advisor = parameter_advisor(cfg.delta_target, self.h0.n,
                                    r=2 * self.h0.n + 9)
        eps0 = advisor["eps0"]
        if cfg.eps > eps0:
            verdicts = {"passed": False, "advisor": advisor,
                        "eps": cfg.eps, "eps0": eps0}
            _write_json(self.outdir / "normalform.json", verdicts)
            self._record("normal-form", "fail", ["normalform.json"], verdicts,
                         witness={"reason": "eps above advisor threshold",
                                  "eps": cfg.eps, "eps0": eps0})
            return False
        # sample the verification cloud inside the configured fast-action
        # window, inset from the box edge so the generator flow has room
        s = cfg.beta * cfg.eps ** 0.25
        box = self.h0.box
        inset = min(3.0 * cfg.eps ** 0.5, 0.25 * float(np.min(box[:, 1] - box[:, 0])))
        pf_lo = max(cfg.pf_range[0], float(box[-1, 0]) + inset)
        pf_hi = min(cfg.pf_range[1], float(box[-1, 1]) - inset)
        points = sample_domain_points(self.h0, cfg.K_modes, s, cfg.nf_samples,
                                      seed=cfg.seed, pf_range=(pf_lo, pf_hi))
        result = verify_normal_form(self.h0, self.h1, cfg.K_modes, cfg.beta,
                                    cfg.eps, cfg.delta_target,
                                    n_base=cfg.nf_samples, seed=cfg.seed,
                                    points=points)
        self.normal_form = result
        self.Z = result.Z
        rep = dict(result.report)
        passed = bool(rep["r_pass"] and rep["phi_ok"])
        verdicts = {"passed": passed, "advisor": advisor, **rep}
        _write_json(self.outdir / "normalform.json", verdicts)
        witness = None if passed else {
            "r_c0": rep["r_c0"], "r_c1": rep["r_c1"], "r_c2": rep["r_c2"],
            "phi_dist": rep["phi_dist"], "delta_target": cfg.delta_target}
        self._record("normal-form", "pass" if passed else "fail",
                     ["normalform.json"], verdicts, witness)
        return passed

    def _theta_star(self, pf_anchor: float):
        report = self.genericity
        if report is None:
            report = resonance.check_genericity(self.Z, self.h0,
                                                self.cfg.pf_range, n_pf=5)
        best = None
        for branch in report.branches:
            arr = branch.arrays()
            mask = arr["is_global"]
            if not mask.any():
                continue
            j = np.argmin(np.abs(arr["pf"][mask] - pf_anchor))
            pf = arr["pf"][mask][j]
            if best is None or abs(pf - pf_anchor) < abs(best[0] - pf_anchor):
                best = (pf, np.atleast_1d(arr["theta"][mask][j]))
        if best is None:
            raise nhic.DegeneracyError("no global branch found for the chart seed")
        return best[1]

    def _run_nhic(self) -> bool:
        cfg = self.cfg
        lo, hi = cfg.pf_range
        anchor = 0.5 * (lo + hi)
        theta_star = self._theta_star(anchor)
        self.theta_star = theta_star
        chart = nhic.build_chart(self.Z, self.h0, theta_star, anchor,
                                 eps=cfg.eps, gamma=cfg.gamma,
                                 pf_interval=cfg.pf_range, n_knots=65)
        F = nhic.chart_field(chart, self.H)
        span = hi - lo
        block_pf = (anchor - 0.1875 * span, anchor + 0.1875 * span)
        block = nhic.make_block(chart, r_u=cfg.block_radius,
                                r_s=cfg.block_radius, pf_range=block_pf)
        cert = nhic.certify_block(F, block, density=8)
        cert_verdicts = {
            "passed": cert.passed, "sign_ok": cert.sign_ok,
            "K_blk": cert.K_blk, "alpha": cert.alpha, "m": cert.m,
            "block_pf": list(block_pf), "anchor": anchor,
            "theta_star": list(theta_star),
        }
        if not cert.passed:
            _write_json(self.outdir / "nhic.json",
                        {**cert_verdicts, "witnesses": cert.witnesses[:5]})
            self._record("nhic", "fail", ["nhic.json"], cert_verdicts,
                         witness={"witnesses": cert.witnesses[:5]})
            return False
        cyl = nhic.compute_cylinder(chart, block, F,
                                    grid_shape=cfg.cylinder_grid)
        self.cylinder = cyl
        residual = float(np.max(cyl.residual))
        lip = cyl.lipschitz()
        off_th, off_p = cyl.max_offsets()
        rows = []
        ns = cyl.Theta_s.shape[-1]
        for i, thf in enumerate(cyl.theta_f):
            for j, pf in enumerate(cyl.pf):
                for k, tv in enumerate(cyl.t):
                    rows.append([thf, pf, tv,
                                 *cyl.X[i, j, k], *cyl.Y[i, j, k],
                                 *cyl.Theta_s[i, j, k], *cyl.P_s[i, j, k],
                                 cyl.residual[i, j, k]])
        header = (["theta_f", "pf", "t"]
                  + [f"x_{a}" for a in range(ns)]
                  + [f"y_{a}" for a in range(ns)]
                  + [f"theta_s_{a}" for a in range(ns)]
                  + [f"p_s_{a}" for a in range(ns)] + ["residual"])
        _write_csv(self.outdir / "cylinder.csv", header, rows)
        verdicts = {
            **cert_verdicts,
            "residual": residual,
            "lipschitz": lip,
            "lipschitz_ok": bool(max(lip["pf"], lip["angle"]) <= 2 * cert.K_blk
                                 + 1e-12),
            "max_offset_theta": off_th,
            "max_offset_p": off_p,
            "rate": cyl.meta.get("rate"),
        }
        _write_json(self.outdir / "nhic.json", verdicts)
        self._record("nhic", "pass", ["cylinder.csv", "nhic.json"], verdicts)
        return True

    def _run_weak_kam(self) -> bool:
        cfg = self.cfg
        n = self.h0.n
        Zpot = self.Z
        eps = cfg.eps

        def V(t, th):
            th = np.asarray(th, dtype=float)
            full = np.zeros(th.shape[:-1] + (n,))
            full[..., 0] = th[..., 0]
            zero = np.zeros_like(full)
            return eps * np.asarray(Zpot.value(full, zero, 0.0), dtype=float)

        lag = weakkam.potential_lagrangian(V, dim=1)
        kernel = weakkam.action_kernel(lag, c=0.0, N=cfg.N, M=cfg.M)
        sol = weakkam.solve_weak_kam(kernel)
        mats = weakkam.mather_sets(sol, kernel)
        cs = np.linspace(cfg.c_range[0], cfg.c_range[1], cfg.c_samples)
        alphas = [weakkam.critical_value(kernel.with_c(float(c))) for c in cs]
        _write_csv(self.outdir / "alpha.csv", ["c", "alpha"],
                   [[c, a] for c, a in zip(cs, alphas)])
        _write_csv(self.outdir / "u.csv", ["x", "u", "u_check"],
                   [[kernel.X[i, 0], sol.u[i], sol.u_check[i]]
                    for i in range(len(kernel.X))])
        residual_ok = bool(sol.residual <= 1e-9)
        verdicts = {
            "passed": residual_ok,
            "alpha0": sol.alpha,
            "residual": sol.residual,
            "alpha_interval": list(sol.alpha_interval),
            "n_aubry_classes": len(mats.classes),
            "aubry_nodes": int(len(mats.idx_A)),
            "lipschitz": sol.lipschitz(),
        }
        _write_json(self.outdir / "weakkam.json", verdicts)
        witness = None if residual_ok else {"residual": sol.residual}
        self._record("weak-kam", "pass" if residual_ok else "fail",
                     ["alpha.csv", "u.csv", "weakkam.json"], verdicts, witness)
        return residual_ok

    def _run_orbit(self) -> bool:
        cfg = self.cfg
        n = self.h0.n
        rng = np.random.default_rng(cfg.seed)
        B = int(cfg.orbit_seeds)
        lo, hi = cfg.pf_range
        anchor = 0.5 * (lo + hi)
        theta_star = self.theta_star
        if theta_star is None:
            theta_star = self._theta_star(anchor)
        theta0 = rng.random((B, n))
        p0 = np.zeros((B, n))
        theta0[:, 0] = theta_star[0] + 0.02 * rng.standard_normal(B)
        p0[:, 0] = 0.02 * rng.standard_normal(B)
        p0[:, n - 1] = anchor + 0.1 * (hi - lo) * (rng.random(B) - 0.5)
        box = self.h0.box
        p0 = np.clip(p0, box[None, :, 0] + 1e-6, box[None, :, 1] - 1e-6)
        drifts, best, traj = orbits.drift_sweep(self.H, theta0, p0,
                                                cfg.orbit_T, cfg.orbit_dt)
        if self.cylinder is not None:
            traj = orbits.integrate(self.H, (theta0[best], p0[best]),
                                    cfg.orbit_T, cfg.orbit_dt,
                                    cylinder=self.cylinder)
        r_bound = self._fast_force_bound(rng)
        report = orbits.drift_report(traj, eps=cfg.eps, r_grad_bound=r_bound)
        drift_rows = [[i, *theta0[i], *p0[i], drifts[i]] for i in range(B)]
        _write_csv(self.outdir / "drift.csv",
                   ["seed", *(f"theta0_{j}" for j in range(n)),
                    *(f"p0_{j}" for j in range(n)), "drift"], drift_rows)
        ds = traj.drift_series
        header = (["t"] + [f"theta_{j}" for j in range(n)]
                  + [f"p_{j}" for j in range(n)] + ["energy_defect", "drift"])
        cols = [traj.times, *traj.theta.T, *traj.p.T, traj.energy_defect, ds]
        if traj.cylinder_distance is not None:
            header.append("cylinder_distance")
            cols.append(traj.cylinder_distance)
        _write_csv(self.outdir / "orbit.csv", header,
                   zip(*cols))
        verdicts = {
            "passed": True,
            "best_seed": int(best),
            "drift": traj.drift,
            "truncated": traj.truncated,
            "rate_max": report.rate_max,
            "rate_bound": report.rate_bound,
            "rate_ok": report.rate_ok,
            "cylinder_max": report.cylinder_max,
        }
        _write_json(self.outdir / "orbit.json", verdicts)
        self._record("orbit", "pass",
                     ["drift.csv", "orbit.csv", "orbit.json"], verdicts)
        return True

    def _fast_force_bound(self, rng) -> float:
        """Measured sup of |d_{theta_fast} H1| over a deterministic cloud."""
        n = self.h0.n
        th = rng.random((512, n))
        lo, hi = self.h0.box[:, 0], self.h0.box[:, 1]
        p = lo[None, :] + (hi - lo)[None, :] * rng.random((512, n))
        t = rng.random(512)
        g = self.h1.grad_theta(th, p, t)
        return float(np.max(np.abs(g[:, n - 1])))


# ---------------------------------------------------------------------------
# report


def write_report(manifest_path, outdir=None) -> list:
    """Collate stage artifacts into a summary and plot-ready CSV copies.

    Pure pass-through: tables are copied verbatim from the stage files, so
    the report never recomputes (or silently changes) a number.  Missing
    stages are marked as gaps.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read manifest {manifest_path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"manifest is not valid JSON: {err}") from err
    src_dir = manifest_path.parent
    outdir = Path(outdir) if outdir is not None else src_dir
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["run report", "=========="]
    lines.append(f"seed: {manifest.get('seed')}")
    params = manifest.get("params", {})
    lines.append("params: " + ", ".join(f"{k}={params[k]}" for k in sorted(params)))
    lines.append("")
    for stage in STAGE_ORDER:
        entry = manifest.get("stages", {}).get(stage)
        if entry is None:
            lines.append(f"[{stage}] not configured")
            continue
        lines.append(f"[{stage}] {entry['status']}")
        for key, val in sorted(entry.get("verdicts", {}).items()):
            if isinstance(val, (int, float, bool, str)):
                lines.append(f"    {key}: {val}")
        if entry.get("witness"):
            lines.append(f"    witness: {json.dumps(_jsonable(entry['witness']), sort_keys=True)}")
    lines.append("")
    for family, filename in REPORT_FAMILIES:
        src = src_dir / filename
        if src.exists():
            dst = outdir / f"report_{family}.csv"
            dst.write_bytes(src.read_bytes())
            written.append(dst.name)
            lines.append(f"table {family}: report_{family}.csv")
        else:
            lines.append(f"table {family}: MISSING ({filename} not produced)")
    report_path = outdir / "report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    return [report_path.name] + written


# ---------------------------------------------------------------------------
# command line


def _add_config_flags(p: argparse.ArgumentParser, orbit_flags=False) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta-target", dest="delta_target", type=float)
    p.add_argument("--K-modes", dest="K_modes", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--pf-samples", dest="pf_samples", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--model", help="model JSON file or inline JSON object")
    if orbit_flags:
        p.add_argument("--T", dest="orbit_T", type=float)
        p.add_argument("--dt", dest="orbit_dt", type=float)
        p.add_argument("--orbit-seeds", dest="orbit_seeds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftlab",
        description="resonance-channel diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _add_config_flags(p, orbit_flags=(name == "orbit"))
    p = sub.add_parser("pipeline", help="run all configured stages plus report")
    _add_config_flags(p, orbit_flags=True)
    p.add_argument("--stages", help="comma-separated stage subset")
    p = sub.add_parser("report", help="collate an existing run into a report")
    p.add_argument("manifest", help="path to manifest.json")
    p.add_argument("--outdir")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for key in ("outdir", "seed", "eps", "delta_target", "K_modes", "beta",
                "gamma", "pf_samples", "N", "M", "workers", "orbit_T",
                "orbit_dt", "orbit_seeds"):
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "model", None) is not None:
        raw = args.model.strip()
        if raw.startswith("{"):
            try:
                overrides["model"] = json.loads(raw)
            except json.JSONDecodeError as err:
                raise ConfigError(f"--model is not valid JSON: {err}") from err
        else:
            try:
                overrides["model"] = json.loads(Path(raw).read_text())
            except OSError as err:
                raise ConfigError(f"cannot read model file {raw}: {err}") from err
            except json.JSONDecodeError as err:
                raise ConfigError(f"model file is not valid JSON: {err}") from err
    if getattr(args, "stages", None) is not None:
        overrides["stages"] = tuple(s.strip() for s in args.stages.split(",")
                                    if s.strip())
    return load_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            files = write_report(args.manifest, args.outdir)
            print("\n".join(files))
            return EXIT_PASS
        cfg = _config_from_args(args)
        if args.command != "pipeline":
            cfg.stages = (args.command,)
            cfg.validate()
        pipe = Pipeline(cfg)
        code = pipe.run()
        manifest_path = pipe.outdir / "manifest.json"
        if args.command == "pipeline":
            report_files = write_report(manifest_path)
            entry = {"status": "pass", "files": report_files, "params": {}}
            pipe.manifest["stages"]["report"] = entry
            for f in report_files:
                if f not in pipe.manifest["files"]:
                    pipe.manifest["files"].append(f)
            pipe.write_manifest()
        print(f"manifest: {manifest_path}")
        for stage, entry in pipe.manifest["stages"].items():
            print(f"{stage}: {entry['status']}")
        return code
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
