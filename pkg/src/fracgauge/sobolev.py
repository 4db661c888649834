"""Discrete fractional Sobolev energies.

The energy of ``u`` vanishing outside the domain splits into a Gagliardo
double sum over the domain and a boundary term weighted by the exterior
density ``phi``; its dual is the Green energy ``mu^T G mu`` of a measure.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import eigsh

from .geometry import Domain, Mesh
from .kernels import CALIBRATED, LITERATURE, FracParams, literature_A, phi_unit
from .quadrature import KernelMatrix, WeightVector

__all__ = [
    "EnergyReport",
    "gagliardo_energy",
    "green_energy",
    "embedding_constant",
    "solution_energy",
    "coercivity_check",
]


@dataclass(frozen=True)
class EnergyReport:
    """``total = gagliardo + phi_term``."""

    gagliardo: float
    phi_term: float
    total: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _resolve_A(params: FracParams, A_mode: str, A: Optional[float]) -> float:
    if A_mode == LITERATURE:
        return literature_A(params) if A is None else float(A)
    if A_mode == CALIBRATED:
        if A is None:
            raise ValueError("Calibrated mode needs the calibrated constant A")
        return float(A)
    raise ValueError(f"unknown A_mode {A_mode!r}")


def gagliardo_energy(
    params: FracParams,
    domain: Domain,
    mesh: Mesh,
    u,
    A_mode: str = LITERATURE,
    A: Optional[float] = None,
    block: int = 1024,
) -> EnergyReport:
    """Discrete ``(A/2) sum_{i != j} (u_i - u_j)^2 |x_i - x_j|^(-n-alpha) a_i a_j``
    plus ``sum_i u_i^2 phi(x_i) a_i``.

    Parameters
    ----------
    u : array_like, shape (N,)
        Node values on the full mesh.
    A : float, optional
        Normalisation of ``phi`` and of the double sum (required in
        Calibrated mode).
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.size,):
        raise ValueError("u must have one value per mesh node")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    Av = _resolve_A(params, A_mode, A)
    x = mesh.nodes
    a = mesh.cell_area
    expo = -0.5 * (params.n + params.alpha)
    acc = 0.0
    for b0 in range(0, mesh.size, block):
        b1 = min(mesh.size, b0 + block)
        d2 = np.sum((x[b0:b1, None, :] - x[None, :, :]) ** 2, axis=-1)
        diff = (u[b0:b1, None] - u[None, :]) ** 2
        with np.errstate(divide="ignore"):
            k = np.where(d2 > 0, d2**expo, 0.0)
        acc += float(np.einsum("i,ij,j->", a[b0:b1], diff * k, a))
    gag = 0.5 * Av * acc
    ph = Av * phi_unit(params, domain, mesh.nodes, depth=mesh.delta if domain.is_disk else None)
    pterm = float(np.sum(u * u * ph * a))
    return EnergyReport(gag, pterm, gag + pterm)


def green_energy(K: KernelMatrix, mu: WeightVector) -> float:
    """``mu^T G mu``."""
    if len(mu) != K.size:
        raise ValueError("mu and G have different sizes")
    return float(mu.mass @ (K.entries @ mu.mass))


def solution_energy(K: KernelMatrix, omega: WeightVector, nu: WeightVector, u) -> float:
    """Green energy of ``u = G(u omega + nu)``, i.e. ``mu^T G mu`` with
    ``mu = u omega + nu``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (K.size,):
        raise ValueError("u must have one value per matrix row")
    return green_energy(K, WeightVector(u * omega.mass + nu.mass))


def embedding_constant(K: KernelMatrix, omega: WeightVector) -> float:
    """``beta^2 = sup_g (g omega)^T G (g omega) / sum g_i^2 omega_i``.

    Computed as the top eigenvalue of ``D^(1/2) G D^(1/2)`` with a dense
    symmetric eigensolver (Lanczos for large matrices), independently of
    the power iteration in :func:`fracgauge.operators.operator_norm`.
    """
    w = omega.mass
    if len(w) != K.size:
        raise ValueError("omega and G have different sizes")
    if not np.any(w > 0):
        raise ValueError("embedding_constant needs a nonzero omega")
    d = np.sqrt(w)
    M = d[:, None] * K.entries * d[None, :]
    M = 0.5 * (M + M.T)
    n = M.shape[0]
    if n <= 4000:
        return float(linalg.eigh(M, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
    val = eigsh(M, k=1, which="LA", tol=1e-15, v0=np.ones(n), return_eigenvectors=False)
    return float(val[0])


def coercivity_check(
    params: FracParams,
    domain: Domain,
    mesh: Mesh,
    omega: WeightVector,
    u,
    beta2: float,
    A_mode: str = LITERATURE,
    A: Optional[float] = None,
) -> tuple[float, float]:
    """Discrete ``B(u, u) = ||u||^2 - int u^2 d omega`` and its lower bound
    ``(1 - beta^2) ||u||^2``.

    `omega` holds per-node masses on the full mesh.
    """
    if not beta2 < 1:
        raise ValueError("coercivity needs beta^2 < 1")
    u = np.asarray(u, dtype=float)
    if len(omega) != mesh.size:
        raise ValueError("omega must have one mass per mesh node")
    e = gagliardo_energy(params, domain, mesh, u, A_mode, A)
    B = e.total - float(np.sum(u * u * omega.mass))
    return B, (1.0 - beta2) * e.total
