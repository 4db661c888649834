"""Command-line runner: ``fracgauge {solve,gauge,verify} --config PATH``.

The configuration is a JSON object with the fields of :class:`RunConfig`;
unknown keys are rejected.  Example::

    {
      "domain": {"kind": "disk"},
      "alpha": 1.5,
      "resolution": 64,
      "omega": {"kind": "density", "density": "phi", "scale": 0.5},
      "nu": {"kind": "density", "density": "constant", "c": 1.0},
      "tolerance": 1e-10,
      "max_terms": 10000,
      "seed": 0,
      "A_mode": "calibrated",
      "output": {"json": "report.json", "csv": "values.csv"}
    }

Exit codes: 0 converged / checks passed, 1 usage or configuration error,
2 divergence detected or a check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .geometry import Domain, build_mesh
from .kernels import CALIBRATED, EXACT_BALL, LITERATURE, MODEL, FracParams, KernelBackend, literature_A
from .operators import SchrodingerOp, SolveReport, fubini_check, gauge, neumann_solve, operator_norm
from .quadrature import (
    KernelMatrix,
    WeightVector,
    assemble_green_matrix,
    calibrate_A,
    constant_density,
    lebesgue,
    phi_density,
    radial_polynomial,
)
from .sobolev import coercivity_check, embedding_constant
from .verify import (
    check_gphi,
    check_green_equivalence,
    fit_exponential_bounds,
    g1_equivalence,
    gauge_poisson_bounds,
    hardy_constant,
    run_counterexample,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2

CHECKS = ("gphi", "equivalence", "bounds", "counterexample", "fubini", "tnorm", "hardy", "coercivity")

# check thresholds
GPHI_TOL = 0.03
FUBINI_TOL = 1e-10
TNORM_TOL = 1e-8
EQUIV_SAMPLES = 10_000
COERCIVITY_MAX_NODES = 6000


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"missing key(s) in {where}: {', '.join(missing)}")


def _number(v, where) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where} must be a finite number")
    return float(v)


def _integer(v, where) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer")
    return int(v)


@dataclass(frozen=True)
class MeasureSpec:
    """``zero``, a scaled density (``phi``, ``constant``, ``polynomial``) or atoms."""

    kind: str = "zero"
    density: Optional[str] = None
    c: float = 1.0
    coeffs: tuple = ()
    scale: float = 1.0
    atoms: tuple = ()

    @classmethod
    def parse(cls, obj, where) -> "MeasureSpec":
        if obj is None:
            return cls()
        _check_keys(obj, ("kind", "density", "c", "coeffs", "scale", "atoms"), ("kind",), where)
        kind = obj["kind"]
        if kind == "zero":
            extra = set(obj) - {"kind"}
            if extra:
                raise ConfigError(f"{where}: 'zero' takes no further keys")
            return cls()
        if kind == "density":
            dens = obj.get("density")
            if dens not in ("phi", "constant", "polynomial"):
                raise ConfigError(f"{where}.density must be 'phi', 'constant' or 'polynomial'")
            scale = _number(obj.get("scale", 1.0), f"{where}.scale")
            if scale < 0:
                raise ConfigError(f"{where}.scale must be nonnegative")
            c = _number(obj.get("c", 1.0), f"{where}.c")
            if dens == "constant" and c < 0:
                raise ConfigError(f"{where}.c must be nonnegative")
            coeffs = obj.get("coeffs", [])
            if dens == "polynomial":
                if not isinstance(coeffs, list) or not coeffs:
                    raise ConfigError(f"{where}.coeffs must be a nonempty list")
                coeffs = [_number(v, f"{where}.coeffs") for v in coeffs]
            elif "coeffs" in obj:
                raise ConfigError(f"{where}.coeffs only applies to 'polynomial'")
            return cls("density", dens, c, tuple(coeffs), scale)
        if kind == "atoms":
            atoms = obj.get("atoms")
            if not isinstance(atoms, list):
                raise ConfigError(f"{where}.atoms must be a list of [x, y, mass]")
            out = []
            for a in atoms:
                if not isinstance(a, list) or len(a) != 3:
                    raise ConfigError(f"{where}.atoms entries must be [x, y, mass]")
                x, y, m = (_number(v, f"{where}.atoms") for v in a)
                if m < 0:
                    raise ConfigError(f"{where}: atom masses must be nonnegative")
                out.append((x, y, m))
            return cls("atoms", atoms=tuple(out))
        raise ConfigError(f"{where}.kind must be 'zero', 'density' or 'atoms'")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "density" and self.scale == 0.0)

    def unit_density(self, params, domain):
        if self.density == "phi":
            return phi_density(params, domain)
        if self.density == "constant":
            return constant_density(self.c)
        return radial_polynomial(self.coeffs)


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration."""

    domain: Domain
    alpha: float
    resolution: int
    omega: MeasureSpec = MeasureSpec()
    nu: MeasureSpec = MeasureSpec("density", "constant")
    tolerance: float = 1e-10
    max_terms: int = 10_000
    seed: int = 0
    A_mode: str = CALIBRATED
    output: dict = field(default_factory=dict)

    FIELDS = ("domain", "alpha", "resolution", "omega", "nu", "tolerance", "max_terms", "seed", "A_mode", "output")

    @classmethod
    def from_dict(cls, obj) -> "RunConfig":
        _check_keys(obj, cls.FIELDS, ("domain", "alpha", "resolution"), "config")
        dom = obj["domain"]
        _check_keys(dom, ("kind", "bounds"), ("kind",), "domain")
        if dom["kind"] == "disk":
            if "bounds" in dom:
                raise ConfigError("the disk takes no bounds")
            domain = Domain("disk")
        elif dom["kind"] == "box":
            b = dom.get("bounds")
            if not (isinstance(b, list) and len(b) == 2 and all(isinstance(p, list) and len(p) == 2 for p in b)):
                raise ConfigError("box bounds must be [[xlo, xhi], [ylo, yhi]]")
            try:
                domain = Domain("box", tuple(tuple(_number(v, "domain.bounds") for v in p) for p in b))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        else:
            raise ConfigError("domain.kind must be 'disk' or 'box'")
        alpha = _number(obj["alpha"], "alpha")
        if not 0 < alpha < 2:
            raise ConfigError("alpha must lie in (0, 2)")
        res = _integer(obj["resolution"], "resolution")
        if res < 4:
            raise ConfigError("resolution must be at least 4")
        omega = MeasureSpec.parse(obj.get("omega"), "omega")
        nu = MeasureSpec.parse(obj["nu"], "nu") if "nu" in obj else cls.nu
        tol = _number(obj.get("tolerance", 1e-10), "tolerance")
        if tol <= 0:
            raise ConfigError("tolerance must be positive")
        max_terms = _integer(obj.get("max_terms", 10_000), "max_terms")
        if max_terms < 1:
            raise ConfigError("max_terms must be positive")
        seed = _integer(obj.get("seed", 0), "seed")
        A_mode = obj.get("A_mode", CALIBRATED)
        if A_mode not in (CALIBRATED, LITERATURE):
            raise ConfigError("A_mode must be 'calibrated' or 'literature'")
        output = obj.get("output", {})
        _check_keys(output, ("json", "csv", "matrix"), (), "output")
        for k, v in output.items():
            if not isinstance(v, str) or not v:
                raise ConfigError(f"output.{k} must be a nonempty path")
        return cls(domain, alpha, res, omega, nu, tol, max_terms, seed, A_mode, dict(output))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(obj)

    @property
    def params(self) -> FracParams:
        return FracParams(self.alpha)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    config: RunConfig
    K: KernelMatrix
    omega: WeightVector
    nu: WeightVector
    A: float

    @property
    def op(self) -> SchrodingerOp:
        return SchrodingerOp(self.K, self.omega)


def build_problem(cfg: RunConfig, threads: Optional[int] = None) -> Problem:
    """Assemble the Green matrix and the discrete measures of a run.

    On the disk the exact ball kernel is used; when a measure is a density
    the diagonal is adapted to it (the potential takes precedence) and the
    matrix is folded onto grid-symmetry orbits unless atoms are present.
    Boxes use the model kernel with the cell scheme.
    """
    params = cfg.params
    domain = cfg.domain
    mesh = build_mesh(domain, cfg.resolution)
    specs = (cfg.omega, cfg.nu)
    if domain.is_disk:
        backend = KernelBackend(EXACT_BALL, params, domain)
        dens = [s for s in specs if s.kind == "density"]
        reference = dens[0].unit_density(params, domain) if dens else None
        fold = not any(s.kind == "atoms" for s in specs)
    else:
        backend = KernelBackend(MODEL, params, domain)
        reference, fold = None, False
    K = assemble_green_matrix(backend, mesh, reference=reference, fold=fold, threads=threads)

    unit_phi = K.weights(phi_density(params, domain))
    A = calibrate_A(K, unit_phi) if cfg.A_mode == CALIBRATED else literature_A(params)

    def measure(spec: MeasureSpec) -> WeightVector:
        if spec.kind == "zero":
            return WeightVector(np.zeros(K.size))
        if spec.kind == "atoms":
            a = np.asarray(spec.atoms, dtype=float).reshape(-1, 3)
            return K.atoms(a[:, :2], a[:, 2])
        if spec.density == "phi":
            return unit_phi.scaled(A * spec.scale)
        return K.weights(spec.unit_density(params, domain)).scaled(spec.scale)

    return Problem(cfg, K, measure(cfg.omega), measure(cfg.nu), A)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(path: Path, mesh, values, bound) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_x", "node_y", "delta", "value", "bound", "margin"])
        for (x, y), d, v, b in zip(mesh.nodes, mesh.delta, values, bound):
            w.writerow([_fmt(x), _fmt(y), _fmt(d), _fmt(v), _fmt(b), _fmt(b - v)])


def _paths(cfg: RunConfig, out: Path, stem: str):
    o = cfg.output
    j = out / o.get("json", f"{stem}.json")
    c = out / o.get("csv", f"{stem}.csv")
    m = out / o["matrix"] if "matrix" in o else None
    return j, c, m


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _bound_columns(prob: Problem, rep: SolveReport, gauge_mode: bool) -> np.ndarray:
    """Upper bound per orbit written next to the values (NaN if unavailable)."""
    nan = np.full(prob.K.size, np.nan)
    if not rep.converged:
        return nan
    if gauge_mode:
        return nan
    try:
        fit = fit_exponential_bounds(prob.op, rep)
    except ValueError:
        return nan
    return fit.bound


def _run_series(cfg: RunConfig, out: Path, threads, gauge_mode: bool) -> int:
    prob = build_problem(cfg, threads)
    op = prob.op
    if gauge_mode:
        rep = gauge(op, tol=cfg.tolerance, max_terms=cfg.max_terms)
    else:
        rep = neumann_solve(op, prob.nu, tol=cfg.tolerance, max_terms=cfg.max_terms)
    K = prob.K
    values = K.expand(rep.values)
    bound = K.expand(_bound_columns(prob, rep, gauge_mode))
    jpath, cpath, mpath = _paths(cfg, out, "gauge" if gauge_mode else "solve")
    _dump_json(rep.to_dict(values), jpath)
    _write_csv(cpath, K.mesh, values, bound)
    if mpath is not None:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        K.dump(mpath)
    status = "converged" if rep.converged else rep.status
    print(f"{'gauge' if gauge_mode else 'solve'}: {status} after {rep.terms_used} terms, "
          f"||T|| ~ {rep.t_norm_estimate:.6g}", file=sys.stderr)
    return EXIT_OK if rep.converged else EXIT_DIVERGED


def cmd_solve(cfg: RunConfig, out: Path, threads: Optional[int] = None) -> int:
    return _run_series(cfg, out, threads, gauge_mode=False)


def cmd_gauge(cfg: RunConfig, out: Path, threads: Optional[int] = None) -> int:
    return _run_series(cfg, out, threads, gauge_mode=True)


def _verify(cfg: RunConfig, which: str, threads) -> tuple[bool, dict]:
    params = cfg.params
    if which == "hardy":
        alphas = [round(1.1 + 0.1 * k, 10) for k in range(9)]
        table = {f"{a:.1f}": hardy_constant(a) for a in alphas}
        vals = list(table.values())
        for a, v in table.items():
            print(f"alpha={a}  C1={v:.12g}")
        ok = all(v > 0 and math.isfinite(v) for v in vals)
        return ok, {"hardy_constant": table, "monotone_decreasing": all(b < a for a, b in zip(vals, vals[1:]))}
    if which == "equivalence":
        if not cfg.domain.is_disk:
            raise ConfigError("the equivalence check needs the disk")
        lo1, hi1 = check_green_equivalence(params, samples=EQUIV_SAMPLES, seed=cfg.seed)
        lo2, hi2 = check_green_equivalence(params, samples=2 * EQUIV_SAMPLES, seed=cfg.seed + 1)
        prob = build_problem(cfg, threads)
        g_lo, g_hi = g1_equivalence(prob.K)
        stable = lo2 >= 0.5 * lo1 and lo2 <= 2 * lo1 and hi2 >= 0.5 * hi1 and hi2 <= 2 * hi1
        ok = lo1 > 0 and math.isfinite(hi1) and stable and g_lo > 0 and math.isfinite(g_hi)
        return ok, {"ratio": [lo1, hi1], "ratio_doubled": [lo2, hi2], "g1_ratio": [g_lo, g_hi]}
    if which == "gphi":
        rep = check_gphi(params, cfg.domain, build_mesh(cfg.domain, cfg.resolution), cfg.A_mode, threads=threads)
        return rep["deviation"] <= GPHI_TOL, rep
    if which == "counterexample":
        rep = run_counterexample(params, build_mesh(cfg.domain, cfg.resolution), cfg.A_mode, threads=threads)
        ok = rep["norm_below_one"] and rep["terms_within_tolerance"] and rep["partial_sum_within_tolerance"]
        return ok, rep

    prob = build_problem(cfg, threads)
    op = prob.op
    if which == "fubini":
        r = fubini_check(op, prob.nu, tol=cfg.tolerance)
        return r <= FUBINI_TOL, {"residual": r}
    if which == "tnorm":
        a = operator_norm(op)
        b = embedding_constant(prob.K, prob.omega)
        return abs(a - b) <= TNORM_TOL, {"operator_norm": a, "embedding_constant": b, "gap": abs(a - b)}
    if which == "bounds":
        sol = neumann_solve(op, prob.K.weights(lebesgue()), tol=cfg.tolerance, max_terms=cfg.max_terms)
        if not sol.converged:
            return False, {"converged": False, "status": sol.status}
        fit = fit_exponential_bounds(op, sol)
        rep = {"exponential": fit.to_dict()}
        if cfg.domain.is_disk and prob.K.folding.trivial:
            g = gauge(op, tol=cfg.tolerance, max_terms=cfg.max_terms)
            if g.converged:
                rep["poisson"] = gauge_poisson_bounds(op, g)
        return fit.violations == 0, rep
    if which == "coercivity":
        K = prob.K
        mesh = K.mesh
        if mesh.size > COERCIVITY_MAX_NODES:
            raise ConfigError("coercivity check is limited to meshes with at most 6000 nodes")
        beta2 = embedding_constant(K, prob.omega)
        if not beta2 < 1:
            return False, {"beta2": beta2}
        per_node = K.expand(prob.omega.mass / K.multiplicity)
        rng = np.random.default_rng(cfg.seed)
        u = rng.standard_normal(mesh.size)
        B, lower = coercivity_check(params, cfg.domain, mesh, WeightVector(per_node), u, beta2, cfg.A_mode, prob.A)
        return B >= lower, {"beta2": beta2, "B": B, "lower": lower}
    raise ConfigError(f"unknown check {which!r}")


def cmd_verify(cfg: RunConfig, which: str, out: Path, threads: Optional[int] = None) -> int:
    if which not in CHECKS:
        raise ConfigError(f"unknown check {which!r}; choose from {', '.join(CHECKS)}")
    ok, rep = _verify(cfg, which, threads)
    rep = {"check": which, "passed": bool(ok), "report": rep}
    jpath = out / cfg.output.get("json", f"verify_{which}.json")
    _dump_json(_jsonable(rep), jpath)
    print(f"verify {which}: {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DIVERGED


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracgauge", description="Fractional Schrödinger equation solver and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("solve", "series solution u0 of u = G(u omega) + G nu"),
                        ("gauge", "gauge u1 = 1 + sum_j T^j G omega"),
                        ("verify", "run a named check")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--out", default=".", help="output directory (default: current)")
        s.add_argument("--threads", type=int, default=None, help="worker threads (default: $FRACGAUGE_THREADS or 1)")
        if name == "verify":
            s.add_argument("--check", required=True, help="one of: " + ", ".join(CHECKS))
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    threads = args.threads
    if threads is None and os.environ.get("FRACGAUGE_THREADS"):
        try:
            threads = int(os.environ["FRACGAUGE_THREADS"])
        except ValueError:
            print("error: FRACGAUGE_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    threads = max(1, threads or 1)
    out = Path(args.out)
    try:
        if args.command == "verify" and args.check not in CHECKS:
            raise ConfigError(f"unknown check {args.check!r}; choose from {', '.join(CHECKS)}")
        cfg = RunConfig.load(args.config)
        with threadpool_limits(limits=threads):
            if args.command == "solve":
                return cmd_solve(cfg, out, threads)
            if args.command == "gauge":
                return cmd_gauge(cfg, out, threads)
            return cmd_verify(cfg, args.check, out, threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
