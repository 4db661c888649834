"""Pointwise kernels: Riesz, exact unit-ball Green function, model Green
kernel, unit-ball Poisson kernel and the exterior density ``phi``.

Everything is vectorised over leading axes of point arrays.  Where the
boundary factor ``1 - |x|^2`` matters near the circle it can be passed in
explicitly (computed from the depth as ``d (2 - d)``), which avoids the
cancellation in ``1 - |x|^2`` for nodes at depth ~1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from .geometry import Domain, _depth, _disk_exit, _pts

__all__ = [
    "FracParams",
    "KernelBackend",
    "EXACT_BALL",
    "MODEL",
    "LITERATURE",
    "CALIBRATED",
    "riesz_constant",
    "riesz_kernel",
    "green_constant",
    "green_exact_ball",
    "green_exact_ball_quad",
    "green_model",
    "poisson_constant",
    "poisson_exact_ball",
    "literature_A",
    "fractional_laplacian_constant",
    "expected_exit_time_ball",
    "phi_unit",
    "phi",
    "DiskPhi",
]

EXACT_BALL = "exact_ball"
MODEL = "model"
LITERATURE = "literature"
CALIBRATED = "calibrated"


@dataclass(frozen=True)
class FracParams:
    """Order ``alpha`` of the fractional Laplacian and dimension ``n``."""

    alpha: float
    n: int = 2

    def __post_init__(self):
        a = float(self.alpha)
        if not (0.0 < a < 2.0):
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        if not a < self.n:
            raise ValueError("alpha must be smaller than n")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "n", int(self.n))

    @property
    def half(self) -> float:
        """``alpha / 2``, the boundary exponent of the Green function."""
        return 0.5 * self.alpha


@dataclass(frozen=True)
class KernelBackend:
    """Choice of Green kernel on a domain."""

    kind: str
    params: FracParams
    domain: Domain

    def __post_init__(self):
        if self.kind not in (EXACT_BALL, MODEL):
            raise ValueError(f"unknown kernel backend {self.kind!r}")
        if self.kind == EXACT_BALL and not self.domain.is_disk:
            raise ValueError("the exact ball Green function needs the unit disk")
        if self.params.n != 2:
            raise ValueError("meshes are planar; kernels are assembled for n = 2 only")

    def __call__(self, x, y, dx=None, dy=None):
        """Kernel values for point arrays `x`, `y` with optional depths."""
        if self.kind == EXACT_BALL:
            px = None if dx is None else dx * (2.0 - dx)
            py = None if dy is None else dy * (2.0 - dy)
            return green_exact_ball(self.params, x, y, px=px, py=py, check=False)
        return green_model(self.params, self.domain, x, y, dx=dx, dy=dy, check=False)

    def near_field_constant(self) -> float:
        """Limit of ``G(x, y) |x - y|^(n - alpha)`` as ``y -> x`` (interior x)."""
        if self.kind == EXACT_BALL:
            return riesz_constant(self.params)
        return 1.0


def riesz_constant(params: FracParams) -> float:
    a, n = params.alpha, params.n
    return float(
        np.exp(
            special.gammaln((n - a) / 2)
            - a * np.log(2.0)
            - 0.5 * n * np.log(np.pi)
            - special.gammaln(a / 2)
        )
    )


def _dist2(x, y):
    d = _pts(x) - _pts(y)
    return np.sum(d * d, axis=-1)


def riesz_kernel(params: FracParams, x, y):
    """``c |x - y|^(alpha - n)``; raises for coincident points."""
    d2 = _dist2(x, y)
    if np.any(d2 == 0):
        raise ValueError("riesz_kernel is singular at x = y")
    out = riesz_constant(params) * d2 ** (0.5 * (params.alpha - params.n))
    return float(out) if np.ndim(out) == 0 else out


def green_constant(params: FracParams) -> float:
    """``Gamma(n/2) / (2^alpha pi^(n/2) Gamma(alpha/2)^2)``."""
    a, n = params.alpha, params.n
    return float(
        np.exp(
            special.gammaln(n / 2)
            - a * np.log(2.0)
            - 0.5 * n * np.log(np.pi)
            - 2 * special.gammaln(a / 2)
        )
    )


def _ball_factor(x, p):
    if p is not None:
        return np.asarray(p, dtype=float)
    x = _pts(x)
    return 1.0 - np.sum(x * x, axis=-1)


def green_exact_ball(params: FracParams, x, y, px=None, py=None, check: bool = True):
    """Green function of the unit ball in closed form.

    The defining integral ``int_0^r0 t^(a-1) (1+t)^(-n/2) dt`` with
    ``a = alpha/2`` becomes, after ``t = u / (1 - u)``, a regularised
    incomplete beta function: ``B(a, b) I_s(a, b)`` with
    ``b = (n - alpha)/2`` and ``s = r0 / (1 + r0)``.

    Parameters
    ----------
    params : FracParams
    x, y : array_like, shape (..., 2)
    px, py : array_like, optional
        Precomputed ``1 - |x|^2`` and ``1 - |y|^2``.
    check : bool
        Validate that points are interior and distinct.
    """
    a = params.half
    b = 0.5 * (params.n - params.alpha)
    d2 = _dist2(x, y)
    pxv = _ball_factor(x, px)
    pyv = _ball_factor(y, py)
    if check:
        if np.any(d2 == 0):
            raise ValueError("green_exact_ball is singular at x = y")
        if np.any(pxv <= 0) or np.any(pyv <= 0):
            raise ValueError("green_exact_ball needs points inside the unit ball")
    num = pxv * pyv
    s = num / (num + d2)
    with np.errstate(divide="ignore"):
        out = (green_constant(params) * special.beta(a, b)) * d2 ** (-b) * special.betainc(a, b, s)
    return float(out) if np.ndim(out) == 0 else out


def green_exact_ball_quad(params: FracParams, x, y, epsrel: float = 1e-12) -> float:
    """Scalar reference evaluation of the ball Green function by adaptive
    quadrature, using ``t = s^(2/alpha)`` to remove the endpoint singularity."""
    x = _pts(x)
    y = _pts(y)
    d2 = float(_dist2(x, y))
    if d2 == 0:
        raise ValueError("green_exact_ball_quad is singular at x = y")
    r0 = (1 - x @ x) * (1 - y @ y) / d2
    if r0 <= 0:
        raise ValueError("points must lie inside the unit ball")
    a, n = params.half, params.n
    # t^(a-1) dt = (1/a) ds  with t = s^(1/a)
    f = lambda s: (1.0 + s ** (1.0 / a)) ** (-0.5 * n) / a
    upper = r0**a
    val, _ = integrate.quad(f, 0.0, min(upper, 1.0), epsabs=0, epsrel=epsrel, limit=200)
    if upper > 1.0:
        # beyond s = 1 the integrand is a pure decay; integrate in log s
        g = lambda v: f(np.exp(v)) * np.exp(v)
        tail, _ = integrate.quad(g, 0.0, np.log(upper), epsabs=0, epsrel=epsrel, limit=400)
        val += tail
    return green_constant(params) * d2 ** (0.5 * (params.alpha - n)) * val


def green_model(params: FracParams, domain: Domain, x, y, dx=None, dy=None, check: bool = True):
    """Two-sided comparison kernel
    ``dx^a dy^a / (|x-y|^(n-alpha) (|x-y| + dx + dy)^alpha)``."""
    a = params.half
    x = _pts(x)
    y = _pts(y)
    dxv = _depth(domain, x) if dx is None else np.asarray(dx, dtype=float)
    dyv = _depth(domain, y) if dy is None else np.asarray(dy, dtype=float)
    r = np.sqrt(_dist2(x, y))
    if check:
        if np.any(r == 0):
            raise ValueError("green_model is singular at x = y")
        if np.any(dxv <= 0) or np.any(dyv <= 0):
            raise ValueError("green_model needs interior points")
    with np.errstate(divide="ignore"):
        out = (dxv * dyv) ** a / (r ** (params.n - params.alpha) * (r + dxv + dyv) ** params.alpha)
    return float(out) if np.ndim(out) == 0 else out


def poisson_constant(params: FracParams) -> float:
    """``Gamma(n/2) sin(pi alpha/2) / pi^(n/2 + 1)``."""
    n = params.n
    return float(
        np.exp(special.gammaln(n / 2) - (0.5 * n + 1) * np.log(np.pi))
        * np.sin(0.5 * np.pi * params.alpha)
    )


def poisson_exact_ball(params: FracParams, x, z, px=None, check: bool = True):
    """Poisson kernel of the unit ball for ``|x| < 1 < |z|``."""
    x = _pts(x)
    z = _pts(z)
    pxv = _ball_factor(x, px)
    qz = np.sum(z * z, axis=-1) - 1.0
    if check and (np.any(pxv <= 0) or np.any(qz <= 0)):
        raise ValueError("poisson_exact_ball needs |x| < 1 < |z|")
    out = poisson_constant(params) * (pxv / qz) ** params.half * _dist2(x, z) ** (-0.5 * params.n)
    return float(out) if np.ndim(out) == 0 else out


def literature_A(params: FracParams) -> float:
    """The fixed normalisation of ``phi`` used in Literature mode."""
    return poisson_constant(params)


def fractional_laplacian_constant(params: FracParams) -> float:
    """Normalising constant of the singular-integral form of the fractional
    Laplacian, ``alpha 2^(alpha-1) Gamma((n+alpha)/2) / (pi^(n/2) Gamma(1-alpha/2))``.

    With this constant the identity ``G phi = 1`` holds exactly; it is
    reported next to the calibrated value for comparison.
    """
    a, n = params.alpha, params.n
    return float(
        a
        * np.exp(
            (a - 1) * np.log(2.0)
            + special.gammaln(0.5 * (n + a))
            - 0.5 * n * np.log(np.pi)
            - special.gammaln(1 - 0.5 * a)
        )
    )


def expected_exit_time_ball(params: FracParams, x=None, p=None):
    """``G1(x) = Gamma(n/2) (1-|x|^2)^(alpha/2) / (2^alpha Gamma(1+alpha/2) Gamma((n+alpha)/2))``.

    Closed form of the Green potential of Lebesgue measure on the unit ball,
    used as an oracle for assembled matrices.
    """
    a, n = params.alpha, params.n
    c = np.exp(
        special.gammaln(n / 2)
        - a * np.log(2.0)
        - special.gammaln(1 + a / 2)
        - special.gammaln((n + a) / 2)
    )
    return c * _ball_factor(x, p) ** (a / 2)


# ---------------------------------------------------------------------------
# exterior density phi
# ---------------------------------------------------------------------------

_GL_ORDER = 10


def _graded_template(levels: int = 30, ratio: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [0, 1] graded geometrically towards
    both endpoints."""
    g = ratio ** np.arange(levels)[::-1] * 0.5
    edges = np.unique(np.concatenate([[0.0], g, 1.0 - g, [1.0]]))
    gx, gw = np.polynomial.legendre.leggauss(_GL_ORDER)
    lo, hi = edges[:-1, None], edges[1:, None]
    t = lo + 0.5 * (gx + 1.0) * (hi - lo)
    w = 0.5 * gw * (hi - lo)
    return t.ravel(), w.ravel()


_TEMPLATE = _graded_template()


def _disk_angle_rule():
    """Rule for psi in [0, pi], graded towards psi = pi/2 where the exit
    distance switches from the near to the far side of the circle."""
    t, w = _graded_template(levels=36, ratio=0.5)
    th = np.concatenate([0.5 * np.pi * t, 0.5 * np.pi * (1.0 + t)])
    wt = np.concatenate([0.5 * np.pi * w, 0.5 * np.pi * w])
    return th, wt


_DISK_PSI, _DISK_PSI_W = _disk_angle_rule()


def _phi_unit_disk_depth(alpha: float, depth: np.ndarray, chunk: int = 4096) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    flat = depth.ravel()
    out = np.empty_like(flat)
    c = np.cos(_DISK_PSI)
    for s in range(0, len(flat), chunk):
        d = flat[s : s + chunk, None]
        rho = 1.0 - d
        R = _disk_exit(rho * c, d * (2.0 - d))
        out[s : s + chunk] = 2.0 * (R ** (-alpha) @ _DISK_PSI_W)
    return (out / alpha).reshape(depth.shape)


def _phi_unit_box(alpha: float, domain: Domain, x: np.ndarray) -> np.ndarray:
    (x0, x1), (y0, y1) = domain.bounds
    corners = np.array([[x1, y1], [x0, y1], [x0, y0], [x1, y0]])
    flat = x.reshape(-1, 2)
    out = np.empty(len(flat))
    t, w = _TEMPLATE
    for i, p in enumerate(flat):
        ang = np.arctan2(corners[:, 1] - p[1], corners[:, 0] - p[0])
        ang = np.sort(np.mod(ang, 2 * np.pi))
        edges = np.concatenate([ang, [ang[0] + 2 * np.pi]])
        lo, hi = edges[:-1, None], edges[1:, None]
        th = (lo + t * (hi - lo)).ravel()
        wt = (w * (hi - lo)).ravel()
        u = np.stack([np.cos(th), np.sin(th)], axis=1)
        R = np.full(len(th), np.inf)
        for k, (a, b) in enumerate(domain.bounds):
            uk = u[:, k]
            with np.errstate(divide="ignore", invalid="ignore"):
                tk = np.where(uk > 0, (b - p[k]) / uk, np.where(uk < 0, (a - p[k]) / uk, np.inf))
            R = np.minimum(R, tk)
        out[i] = R ** (-alpha) @ wt
    return (out / alpha).reshape(x.shape[:-1])


def phi_unit(params: FracParams, domain: Domain, x, depth=None):
    """``int_{complement} |x - z|^(-n-alpha) dz`` (``phi`` with ``A = 1``).

    Uses the exact radial reduction ``R(theta)^(-alpha) / alpha`` and a
    composite Gauss rule in the angle that is graded towards the directions
    where the exit distance is not smooth.

    Parameters
    ----------
    depth : array_like, optional
        Distance to the boundary (disk only); if given, `x` may be None and
        the radial symmetry of the disk is used directly.
    """
    if params.n != 2:
        raise ValueError("phi is implemented for planar domains")
    if domain.is_disk:
        if depth is None:
            depth = distance_to_boundary_checked(domain, x)
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0):
            raise ValueError("phi needs interior points")
        out = _phi_unit_disk_depth(params.alpha, depth)
    else:
        x = _pts(x)
        if np.any(_depth(domain, x) <= 0):
            raise ValueError("phi needs interior points")
        out = _phi_unit_box(params.alpha, domain, x)
    return float(out) if np.ndim(out) == 0 else out


def distance_to_boundary_checked(domain, x):
    d = _depth(domain, _pts(x))
    if np.any(d <= 0):
        raise ValueError("phi needs interior points")
    return d


def phi(params: FracParams, domain: Domain, x, A_mode: str = LITERATURE, A: Optional[float] = None, depth=None):
    """Exterior density ``A int_{complement} |x - z|^(-n-alpha) dz``.

    In Literature mode ``A`` is :func:`literature_A`; in Calibrated mode the
    caller supplies the calibrated value (see
    :func:`fracgauge.quadrature.calibrate_A`).
    """
    if A_mode == LITERATURE:
        A = literature_A(params) if A is None else A
    elif A_mode == CALIBRATED:
        if A is None:
            raise ValueError("Calibrated mode needs the calibrated constant A")
    else:
        raise ValueError(f"unknown A_mode {A_mode!r}")
    return A * phi_unit(params, domain, x, depth=depth)


class DiskPhi:
    """Fast evaluation of the unit-disk ``phi`` (``A = 1``) as a function of
    depth through a cubic spline of ``log(phi d^alpha)`` in ``log d``."""

    def __init__(self, params: FracParams, dmin: float = 1e-18, knots: int = 2000):
        self.params = params
        ld = np.linspace(np.log(dmin), 0.0, knots)
        d = np.exp(ld)
        vals = np.log(_phi_unit_disk_depth(params.alpha, d) * d**params.alpha)
        self._spline = CubicSpline(ld, vals)
        self._dmin = dmin

    def __call__(self, depth):
        d = np.asarray(depth, dtype=float)
        ld = np.log(np.clip(d, self._dmin, 1.0))
        return np.exp(self._spline(ld)) * d ** (-self.params.alpha)

    @cached_property
    def centre_value(self) -> float:
        return 2.0 * np.pi / self.params.alpha
