"""Discrete Schrödinger operator ``T f = G(f omega)``, its norm on
``L^2(omega)``, iterated kernels, the Neumann-series solver and the gauge."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .quadrature import KernelMatrix, WeightVector

__all__ = [
    "SchrodingerOp",
    "SolveReport",
    "ConvergenceError",
    "apply_T",
    "operator_norm",
    "iterated_kernel",
    "neumann_solve",
    "direct_solve",
    "gauge",
    "fubini_check",
]

DIVERGENCE_RATIO = 1.0 - 1e-6
DIVERGENCE_RUN = 5


class ConvergenceError(RuntimeError):
    """Power iteration did not converge; ``estimate`` is the last value."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


@dataclass
class SchrodingerOp:
    """``T`` on the nodes of `G` with potential masses `omega`."""

    G: KernelMatrix
    omega: WeightVector

    def __post_init__(self):
        if len(self.omega) != self.G.size:
            raise ValueError("omega and G have different sizes")
        if np.any(self.omega.mass < 0):
            raise ValueError("omega must be nonnegative")

    @property
    def size(self) -> int:
        return self.G.size

    def scaled(self, gamma: float) -> "SchrodingerOp":
        return SchrodingerOp(self.G, self.omega.scaled(gamma))


@dataclass
class SolveReport:
    """Result of a series solve.

    ``status`` (not serialised) is one of ``"converged"``, ``"diverged"``
    (increments stopped decaying) and ``"max_terms"``.
    """

    values: np.ndarray = field(repr=False)
    terms_used: int
    last_increment_sup: float
    t_norm_estimate: float
    converged: bool
    residual_sup: float
    status: str = "converged"

    FIELDS = ("values", "terms_used", "last_increment_sup", "t_norm_estimate", "converged", "residual_sup")

    def to_dict(self, values=None) -> dict:
        v = self.values if values is None else values
        return {
            "values": [float(x) for x in np.asarray(v)],
            "terms_used": int(self.terms_used),
            "last_increment_sup": float(self.last_increment_sup),
            "t_norm_estimate": float(self.t_norm_estimate),
            "converged": bool(self.converged),
            "residual_sup": float(self.residual_sup),
        }

    def to_json(self, values=None) -> str:
        return json.dumps(self.to_dict(values), indent=1)


def apply_T(op: SchrodingerOp, f) -> np.ndarray:
    """``(T f)_i = sum_j G_ij f_j omega_j``."""
    f = np.asarray(f, dtype=float)
    if f.shape != (op.size,):
        raise ValueError("dimension mismatch in apply_T")
    return op.G.entries @ (op.omega.mass * f)


def operator_norm(op: SchrodingerOp, tol: float = 1e-13, max_iter: int = 200_000) -> float:
    """Largest eigenvalue of ``D^(1/2) G D^(1/2)`` by power iteration.

    Starts from the all-ones vector and stops when the Rayleigh quotient
    changes by less than ``tol`` relative.

    Raises
    ------
    ValueError
        If omega vanishes identically or a negative Rayleigh quotient is met.
    ConvergenceError
        If `max_iter` is exhausted.
    """
    w = op.omega.mass
    if not np.any(w > 0):
        raise ValueError("operator_norm needs a nonzero omega")
    d = np.sqrt(w)
    K = op.G.entries
    x = np.ones(op.size)
    x /= np.linalg.norm(x)
    lam = None
    for _ in range(max_iter):
        y = d * (K @ (d * x))
        new = float(x @ y)
        if new < 0:
            raise ValueError("negative Rayleigh quotient: the kernel matrix is not positive")
        if lam is not None and abs(new - lam) <= tol * abs(new):
            return new
        lam = new
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    raise ConvergenceError("power iteration did not converge", lam)


def iterated_kernel(op: SchrodingerOp, j: int) -> np.ndarray:
    """``G_1 = G`` and ``G_j = G_{j-1} D G``."""
    if j < 1:
        raise ValueError("j must be at least 1")
    K = op.G.entries
    out = K.copy()
    WK = op.omega.mass[:, None] * K
    for _ in range(j - 1):
        out = out @ WK
    return 0.5 * (out + out.T)


def _series(op: SchrodingerOp, first: np.ndarray, tol: float, max_terms: int, q: float):
    """Partial sums of ``sum_j T^j first`` with the stopping rules of the solver."""
    w = op.omega.mass
    K = op.G.entries
    term = first.copy()
    total = term.copy()
    inc = float(np.max(np.abs(term))) if term.size else 0.0
    terms = 1
    run = 0
    threshold = tol * (1.0 - q) / max(q, 1e-300) if q < 1 else -np.inf
    status = "max_terms"
    while True:
        if inc <= threshold:
            status = "converged"
            break
        if run >= DIVERGENCE_RUN:
            status = "diverged"
            break
        if terms >= max_terms:
            break
        term = K @ (w * term)
        new = float(np.max(np.abs(term)))
        run = run + 1 if (inc > 0 and new >= DIVERGENCE_RATIO * inc) else 0
        inc = new
        total += term
        terms += 1
    return total, terms, inc, status


def neumann_solve(
    op: SchrodingerOp,
    nu: WeightVector,
    tol: float = 1e-10,
    max_terms: int = 10_000,
    norm: Optional[float] = None,
) -> SolveReport:
    """Minimal solution ``u0 = sum_j T^j G nu`` of ``u = T u + G nu``.

    The series stops once the last increment is below
    ``tol (1 - q) / q`` (geometric tail bound, ``q`` the operator norm), or
    declares divergence when the sup-norm of the increments fails to shrink
    (ratio >= 1 - 1e-6) for 5 consecutive terms.  Exhausting `max_terms` is
    reported as not converged as well.

    Parameters
    ----------
    norm : float, optional
        Precomputed operator norm (otherwise obtained by power iteration).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if len(nu) != op.size:
        raise ValueError("nu and the operator have different sizes")
    q = 0.0 if not np.any(op.omega.mass > 0) else (operator_norm(op) if norm is None else float(norm))
    Gnu = op.G.entries @ nu.mass
    u, terms, inc, status = _series(op, Gnu, tol, max_terms, q)
    res = float(np.max(np.abs(u - apply_T(op, u) - Gnu))) if u.size else 0.0
    return SolveReport(u, terms, inc, q, status == "converged", res, status)


def direct_solve(op: SchrodingerOp, nu: WeightVector) -> np.ndarray:
    """Dense solve of ``(I - G D) u = G nu``."""
    K = op.G.entries
    A = np.eye(op.size) - K * op.omega.mass[None, :]
    return np.linalg.solve(A, K @ nu.mass)


def gauge(op: SchrodingerOp, tol: float = 1e-10, max_terms: int = 10_000, norm: Optional[float] = None) -> SolveReport:
    """``u1 = 1 + sum_j T^j G omega``, the minimal solution of ``u = 1 + G(u omega)``."""
    rep = neumann_solve(op, op.omega, tol=tol, max_terms=max_terms, norm=norm)
    u = 1.0 + rep.values
    res = float(np.max(np.abs(u - 1.0 - apply_T(op, u)))) if u.size else 0.0
    return SolveReport(u, rep.terms_used, rep.last_increment_sup, rep.t_norm_estimate, rep.converged, res, rep.status)


def fubini_check(op: SchrodingerOp, nu: WeightVector, lebesgue: Optional[WeightVector] = None, terms: Optional[int] = None, tol: float = 1e-12) -> float:
    """Relative residual of ``int u1 d nu = nu(Omega) + int u0 d omega``.

    ``u1`` is the gauge and ``u0`` the series solution with data `nu`
    (Lebesgue measure gives the familiar ``|Omega| + int u0 d omega``).
    Both series are cut after the same number of terms, so the identity
    is an exact transpose identity of the truncated sums.

    Parameters
    ----------
    lebesgue : WeightVector, optional
        Alias for `nu` kept for symmetry with the continuum statement.
    terms : int, optional
        Common truncation depth; by default the larger of the depths at
        which the two series converge to `tol`.
    """
    if lebesgue is not None:
        nu = lebesgue
    w = op.omega.mass
    K = op.G.entries
    if terms is None:
        q = 0.0 if not np.any(w > 0) else operator_norm(op)
        _, k1, _, _ = _series(op, K @ w, tol, 10_000, q)
        _, k2, _, _ = _series(op, K @ nu.mass, tol, 10_000, q)
        terms = max(k1, k2)
    a = K @ w
    b = K @ nu.mass
    ua = a.copy()
    ub = b.copy()
    for _ in range(terms - 1):
        a = K @ (w * a)
        b = K @ (w * b)
        ua += a
        ub += b
    omega_total = float(nu.mass.sum())
    lhs = omega_total + float(nu.mass @ ua)  # int u1 d nu
    rhs = omega_total + float(w @ ub)  # nu(Omega) + int u0 d omega
    return abs(lhs - rhs) / abs(rhs) if rhs != 0 else abs(lhs - rhs)
