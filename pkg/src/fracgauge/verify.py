"""Scenario-level checks: kernel equivalence, ``G phi = 1``, exponential
bounds for ``u0``, Poisson-type bounds for the gauge, the ``omega = phi dx``
counterexample and the Hardy constant."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.special import roots_jacobi

from .geometry import Domain, Mesh, build_mesh, unit_disk
from .kernels import (
    CALIBRATED,
    EXACT_BALL,
    LITERATURE,
    FracParams,
    KernelBackend,
    fractional_laplacian_constant,
    green_exact_ball,
    green_model,
    literature_A,
    poisson_exact_ball,
)
from .operators import SchrodingerOp, SolveReport, apply_T, operator_norm
from .quadrature import (
    KernelMatrix,
    WeightVector,
    assemble_green_matrix,
    calibrate_A,
    lebesgue,
    phi_density,
)

__all__ = [
    "BoundFitReport",
    "PhiSetup",
    "phi_setup",
    "clear_phi_cache",
    "interior_mask",
    "interior_mean",
    "sample_disk",
    "check_green_equivalence",
    "g1_equivalence",
    "check_gphi",
    "fit_exponential_bounds",
    "gauge_poisson_bounds",
    "exterior_rule",
    "run_counterexample",
    "hardy_constant",
]


# ---------------------------------------------------------------------------
# shared set-up for phi-based scenarios
# ---------------------------------------------------------------------------


@dataclass
class PhiSetup:
    """Green matrix adapted to ``phi`` together with its masses.

    Attributes
    ----------
    K : KernelMatrix
    phi_unit : WeightVector
        Masses of ``phi`` with ``A = 1``.
    A_calibrated : float
    A_literature : float
    """

    K: KernelMatrix
    phi_unit: WeightVector
    A_calibrated: float
    A_literature: float

    def A(self, mode: str) -> float:
        if mode == CALIBRATED:
            return self.A_calibrated
        if mode == LITERATURE:
            return self.A_literature
        raise ValueError(f"unknown A_mode {mode!r}")

    def phi(self, mode: str) -> WeightVector:
        return self.phi_unit.scaled(self.A(mode))


_PHI_CACHE: dict = {}


def phi_setup(params: FracParams, resolution: int, fold: bool = True, threads: Optional[int] = None) -> PhiSetup:
    """Disk Green matrix whose diagonal is adapted to ``phi``.

    Results are cached per ``(alpha, n, resolution, fold)``; see
    :func:`clear_phi_cache`.
    """
    key = (params.alpha, params.n, int(resolution), bool(fold))
    if key not in _PHI_CACHE:
        domain = unit_disk()
        mesh = build_mesh(domain, resolution)
        ref = phi_density(params, domain)
        backend = KernelBackend(EXACT_BALL, params, domain)
        K = assemble_green_matrix(backend, mesh, reference=ref, fold=fold, threads=threads)
        w = K.weights(ref)
        _PHI_CACHE[key] = PhiSetup(K, w, calibrate_A(K, w), literature_A(params))
    return _PHI_CACHE[key]


def clear_phi_cache(resolution: Optional[int] = None) -> None:
    """Drop cached matrices (all, or those of one resolution)."""
    for key in list(_PHI_CACHE):
        if resolution is None or key[2] == resolution:
            del _PHI_CACHE[key]


def interior_mask(K: KernelMatrix, margin: float) -> np.ndarray:
    return K.delta >= margin


def interior_mean(K: KernelMatrix, values, margin: float = 0.1) -> float:
    """Mean over mesh nodes with depth >= margin (orbits counted with
    their multiplicity)."""
    m = interior_mask(K, margin)
    return float(np.average(np.asarray(values)[m], weights=K.multiplicity[m]))


# ---------------------------------------------------------------------------
# kernel equivalence
# ---------------------------------------------------------------------------


def sample_disk(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform points in the open unit disk."""
    r = np.sqrt(rng.random(count))
    t = 2 * np.pi * rng.random(count)
    r = np.minimum(r, 1.0 - 1e-15)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def check_green_equivalence(params: FracParams, mesh: Optional[Mesh] = None, samples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Min and max of ``G_exact / G_model`` over random pairs in the disk.

    `mesh` only fixes the domain (which must be the disk); pairs are drawn
    uniformly from the continuum.
    """
    if mesh is not None and not mesh.domain.is_disk:
        raise ValueError("the exact Green function is known on the disk only")
    rng = np.random.default_rng(seed)
    x = sample_disk(rng, samples)
    y = sample_disk(rng, samples)
    keep = np.any(x != y, axis=1)
    x, y = x[keep], y[keep]
    dx = 1.0 - np.hypot(*x.T)
    dy = 1.0 - np.hypot(*y.T)
    ge = green_exact_ball(params, x, y, px=dx * (2 - dx), py=dy * (2 - dy))
    gm = green_model(params, unit_disk(), x, y, dx=dx, dy=dy)
    r = ge / gm
    return float(r.min()), float(r.max())


def g1_equivalence(K: KernelMatrix) -> tuple[float, float]:
    """Extremes of ``(G 1)(x) / delta(x)^(alpha/2)`` over the nodes."""
    g1 = K.entries @ K.weights(lebesgue()).mass
    r = g1 / K.delta ** K.backend.params.half
    return float(r.min()), float(r.max())


# ---------------------------------------------------------------------------
# G phi = 1
# ---------------------------------------------------------------------------


def check_gphi(
    params: FracParams,
    domain: Domain,
    mesh: Mesh,
    A_mode: str = CALIBRATED,
    interior_margin: float = 0.1,
    fold: bool = True,
    threads: Optional[int] = None,
) -> dict:
    """Deviation of the discrete ``G phi`` from 1 on nodes deeper than the margin.

    Returns a dict with ``deviation`` (the checked quantity) and diagnostics.
    """
    if not domain.is_disk:
        raise ValueError("G phi = 1 is checked with the exact ball kernel on the disk")
    setup = phi_setup(params, mesh.resolution, fold=fold, threads=threads)
    K = setup.K
    g = K.entries @ setup.phi(A_mode).mass
    m = interior_mask(K, interior_margin)
    return {
        "alpha": params.alpha,
        "resolution": mesh.resolution,
        "A_mode": A_mode,
        "A": setup.A(A_mode),
        "A_calibrated": setup.A_calibrated,
        "A_literature": setup.A_literature,
        "A_fractional_laplacian": fractional_laplacian_constant(params),
        "deviation": float(np.max(np.abs(g[m] - 1.0))),
        "deviation_all_nodes": float(np.max(np.abs(g - 1.0))),
        "nodes": int(mesh.size),
    }


# ---------------------------------------------------------------------------
# exponential bounds for u0
# ---------------------------------------------------------------------------


@dataclass
class BoundFitReport:
    """Fitted constants of ``c1 m e^(c Tm/m) <= u0 <= C1 m e^(C Tm/m)``."""

    fitted_C_upper: float
    fitted_c_lower: float
    C1_envelope: float
    c1_envelope: float
    violations: int
    margins: np.ndarray = field(repr=False)
    bound: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "fitted_C_upper": float(self.fitted_C_upper),
            "fitted_c_lower": float(self.fitted_c_lower),
            "C1_envelope": float(self.C1_envelope),
            "c1_envelope": float(self.c1_envelope),
            "violations": int(self.violations),
        }


def fit_exponential_bounds(op: SchrodingerOp, solve: SolveReport, G1: Optional[np.ndarray] = None) -> BoundFitReport:
    """Smallest constants in the two-sided exponential bound for ``u0``
    solved with Lebesgue data, with ``m = delta^(alpha/2)``.

    Parameters
    ----------
    G1 : ndarray, optional
        ``G`` applied to Lebesgue measure (computed if omitted).
    """
    if not solve.converged:
        raise ValueError("fit_exponential_bounds needs a converged solve")
    K = op.G
    if G1 is None:
        G1 = K.entries @ K.weights(lebesgue()).mass
    m = K.delta ** K.backend.params.half
    Tm = apply_T(op, m)
    u0 = solve.values
    C1 = float(np.max(G1 / m))
    c1 = float(np.min(G1 / m))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(Tm > 0, m / Tm, np.inf)
        up = np.log(u0 / (C1 * m)) * ratio
        lo = np.log(u0 / (c1 * m)) * ratio
    up = np.where(np.isfinite(up), up, 0.0)
    C = float(max(0.0, np.max(up)))
    lo_f = lo[np.isfinite(lo)]
    c = float(np.min(lo_f)) if lo_f.size else 0.0
    violations = int(np.sum(u0 < G1 * (1 - 1e-12)) + np.sum(u0 < c1 * m * (1 - 1e-12)))
    with np.errstate(over="ignore", invalid="ignore"):
        bound = C1 * m * np.exp(np.where(np.isfinite(ratio), C / ratio, 0.0))
    return BoundFitReport(C, c, C1, c1, violations, bound - u0, bound)


# ---------------------------------------------------------------------------
# gauge versus Poisson-kernel bounds
# ---------------------------------------------------------------------------


def exterior_rule(params: FracParams, radial: int = 64, angular: int = 128):
    """Quadrature for ``int_{|z|>1} f(z) dz`` after ``s = 1/|z|``.

    Gauss-Jacobi in ``s`` carries both the ``(1 - s)^(-alpha/2)`` edge
    behaviour of the Poisson kernel and its ``s^(alpha-1)`` decay at
    infinity; the angle uses the midpoint rule.  Returns points ``z`` and
    weights (Jacobian included) for integrands behaving like the Poisson
    kernel.
    """
    a = params.half
    b = params.alpha - 1.0
    x, w = roots_jacobi(radial, -a, b)
    s = 0.5 * (x + 1.0)
    # int_0^1 g ds = sum w_k 2^(a-b-1) g(s_k) (1-s_k)^a s_k^(-b)
    ws = w * 2.0 ** (a - b - 1.0) * (1.0 - s) ** a * s ** (-b)
    th = 2 * np.pi * (np.arange(angular) + 0.5) / angular
    S, TH = np.meshgrid(s, th, indexing="ij")
    z = np.stack([np.cos(TH) / S, np.sin(TH) / S], axis=-1).reshape(-1, 2)
    wt = ((ws * s**-3)[:, None] * np.full(angular, 2 * np.pi / angular)[None, :]).reshape(-1)
    return z, wt


def gauge_poisson_bounds(
    op: SchrodingerOp,
    gauge_report: SolveReport,
    radial: int = 64,
    angular: int = 128,
    chunk: int = 256,
) -> dict:
    """Fit ``c3 int e^(c4 E) P dz <= u1 <= C3 int e^(C4 E) P dz`` with
    ``E(x, z) = int G(x, y) P(y, z) / P(x, z) d omega(y)``.

    ``C3`` (``c3``) is the constant needed for ``omega = 0`` on this
    quadrature, i.e. the extreme of ``1 / int P dz`` over the nodes; ``C4`` is
    then the smallest (``c4`` the largest) exponent constant for which the
    bound holds at every node, found by bisection.
    """
    if not gauge_report.converged:
        raise ValueError("gauge_poisson_bounds needs a converged gauge")
    K = op.G
    if K.backend.kind != EXACT_BALL:
        raise ValueError("the exact Poisson kernel needs the disk")
    if not K.folding.trivial:
        raise ValueError("gauge_poisson_bounds needs an unfolded matrix")
    params = K.backend.params
    z, wt = exterior_rule(params, radial, angular)
    x = K.nodes
    px = K.delta * (2 - K.delta)
    w = op.omega.mass
    u1 = gauge_report.values
    # E = (G diag(w) P(y, z)) / P(x, z)
    Pyz = poisson_exact_ball(params, x[:, None, :], z[None, :, :], px=px[:, None], check=False)
    E = (K.entries @ (w[:, None] * Pyz)) / Pyz
    base = Pyz @ wt
    C3 = float(np.max(1.0 / base))
    c3 = float(np.min(1.0 / base))

    def F(c):
        return (np.exp(c * E) * Pyz) @ wt

    def upper_ok(c):
        return bool(np.all(u1 <= C3 * F(c) * (1 + 1e-12)))

    def lower_ok(c):
        return bool(np.all(u1 >= c3 * F(c) * (1 - 1e-12)))

    def bisect(ok, lo, hi, want_small):
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if ok(mid) == want_small:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-10 * max(1.0, hi):
                break
        return hi if want_small else lo

    if upper_ok(0.0):
        C4 = 0.0
    else:
        hi = 1.0
        while not upper_ok(hi) and hi < 1e6:
            hi *= 2
        C4 = bisect(upper_ok, 0.0, hi, True)
    if not lower_ok(0.0):
        c4 = 0.0
    else:
        hi = 1.0
        while lower_ok(hi) and hi < 1e6:
            hi *= 2
        c4 = bisect(lambda c: not lower_ok(c), 0.0, hi, True)
        c4 = c4 if lower_ok(c4) else max(0.0, c4 - 1e-10 * max(1.0, c4))
    return {
        "C3": C3,
        "C4": float(C4),
        "c3": c3,
        "c4": float(c4),
        "poisson_mass_min": float(base.min()),
        "poisson_mass_max": float(base.max()),
        "exponent_max": float(E.max()),
    }


# ---------------------------------------------------------------------------
# counterexample
# ---------------------------------------------------------------------------


def run_counterexample(
    params: FracParams,
    mesh: Mesh,
    A_mode: str = CALIBRATED,
    J: int = 20,
    margin: float = 0.1,
    tolerance: float = 0.03,
    threads: Optional[int] = None,
) -> dict:
    """Terms ``T^j G omega`` (j = 0..J) for ``omega = phi dx`` on the disk.

    Reports interior means of each term and of the partial sums, the
    discrete operator norm and pass flags at the given relative tolerance.
    """
    if not mesh.domain.is_disk:
        raise ValueError("the counterexample is run on the disk")
    setup = phi_setup(params, mesh.resolution, threads=threads)
    K = setup.K
    omega = setup.phi(A_mode)
    op = SchrodingerOp(K, omega)
    term = K.entries @ omega.mass
    total = term.copy()
    means = [interior_mean(K, term, margin)]
    sums = [means[0]]
    for _ in range(J):
        term = apply_T(op, term)
        total += term
        means.append(interior_mean(K, term, margin))
        sums.append(interior_mean(K, total, margin))
    norm = operator_norm(op)
    terms_ok = bool(all(abs(v - 1.0) <= tolerance for v in means))
    sum_ok = bool(abs(sums[-1] - (J + 1)) <= tolerance * (J + 1))
    return {
        "alpha": params.alpha,
        "resolution": mesh.resolution,
        "A_mode": A_mode,
        "exploratory": not (1.0 < params.alpha < 2.0),
        "term_means": means,
        "partial_sum_means": sums,
        "operator_norm": norm,
        "norm_below_one": bool(norm < 1.0),
        "terms_within_tolerance": terms_ok,
        "partial_sum_within_tolerance": sum_ok,
    }


# ---------------------------------------------------------------------------
# Hardy constant
# ---------------------------------------------------------------------------


def hardy_constant(alpha: float, n: int = 2) -> float:
    """``alpha Gamma((n+alpha)/2) / (2^(2-alpha) pi^((n-2)/2) Gamma(1-alpha/2) Gamma((alpha+1)/2)^2)``."""
    alpha = float(alpha)
    if not (1.0 < alpha < 2.0):
        raise ValueError("the Hardy constant formula needs 1 < alpha < 2")
    log = (
        np.log(alpha)
        + special.gammaln(0.5 * (n + alpha))
        - (2.0 - alpha) * np.log(2.0)
        - 0.5 * (n - 2) * np.log(np.pi)
        - special.gammaln(1.0 - 0.5 * alpha)
        - 2.0 * special.gammaln(0.5 * (alpha + 1.0))
    )
    return float(np.exp(log))
