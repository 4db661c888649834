"""Discrete measures and dense Green matrices.

Two assembly schemes are provided.

``"cell"``
    Point values ``G(x_i, x_j)`` off the diagonal, masses
    ``density(x_i) * cell_area_i`` and a cell-averaged diagonal in which
    the smooth part of the kernel is frozen and ``|x - y|^(alpha-2)`` is
    integrated over the square exactly.  Works for every backend.

``"corrected"`` (exact ball kernel on the unit disk)
    Masses are product-integrated against the boundary behaviour of the
    kernel, ``w_j = int_{V_j} rho(y) (delta(y)/delta_j)^(alpha/2) dy`` over the
    nearest-node region ``V_j``, using a boundary-layer quadrature graded
    down to depth ~1e-6 h.  The diagonal is then chosen per row so that
    ``sum_j G_ij w_j`` reproduces ``int G(x_i, y) rho(y) dy`` for a reference
    density ``rho``: the 3x3 block of cells around ``x_i`` is integrated in
    polar coordinates centred at ``x_i`` (Gauss-Jacobi in the radius for the
    ``r^(alpha-1)`` and boundary singularities), the remaining near field
    with the fine quadrature, and the product-rule contributions of the near
    field are subtracted.  Off-diagonal entries stay point values, so the
    matrix stays symmetric.  The diagonal is specific to the reference
    density; other densities are still integrated consistently but without
    the near-field correction.

For data invariant under the symmetry group of the square grid on the disk
(radial densities), the matrix can be folded onto symmetry orbits, which
reduces the dense size about eightfold without changing any result in the
invariant subspace.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree
from scipy.special import roots_jacobi, roots_legendre

from .geometry import Mesh, _depth, _disk_exit
from .kernels import (
    EXACT_BALL,
    DiskPhi,
    FracParams,
    KernelBackend,
    green_exact_ball,
    phi_unit,
)

__all__ = [
    "Density",
    "lebesgue",
    "constant_density",
    "radial_polynomial",
    "phi_density",
    "WeightVector",
    "Folding",
    "LayerQuadrature",
    "QuadratureOptions",
    "KernelMatrix",
    "discretize_density",
    "snap_atoms",
    "assemble_green_matrix",
    "calibrate_A",
    "integrate_values",
    "dump_matrix",
    "load_matrix",
]


# ---------------------------------------------------------------------------
# densities and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Density:
    """Nonnegative density on the domain.

    Parameters
    ----------
    func : callable
        ``func(points, depth) -> values`` with ``points`` of shape (..., 2)
        and ``depth`` the matching distances to the boundary.
    radial : bool
        Whether the density is invariant under rotations of the disk.
    boundary_exponent : float
        ``e`` such that the density behaves like ``depth**e`` at the
        boundary; used to pick Gauss-Jacobi weights.
    name : str
    """

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    radial: bool = False
    boundary_exponent: float = 0.0
    name: str = "custom"

    def __call__(self, points, depth) -> np.ndarray:
        v = np.asarray(self.func(np.asarray(points, float), np.asarray(depth, float)), float)
        return np.broadcast_to(v, np.shape(depth))

    def scaled(self, gamma: float) -> "Density":
        gamma = float(gamma)
        if gamma < 0:
            raise ValueError("density scale must be nonnegative")
        f = self.func
        return replace(self, func=lambda p, d: gamma * np.asarray(f(p, d)), name=f"{gamma:g}*{self.name}")


def lebesgue() -> Density:
    return Density(lambda p, d: np.ones(np.shape(d)), radial=True, name="lebesgue")


def constant_density(c: float) -> Density:
    if c < 0:
        raise ValueError("constant density must be nonnegative")
    return Density(lambda p, d: np.full(np.shape(d), float(c)), radial=True, name=f"const({c:g})")


def radial_polynomial(coeffs: Sequence[float]) -> Density:
    """``sum_k c_k |x|^k``."""
    c = np.asarray(coeffs, dtype=float)

    def f(p, d):
        return np.polynomial.polynomial.polyval(np.hypot(p[..., 0], p[..., 1]), c)

    return Density(f, radial=True, name="radial_poly")


def phi_density(params: FracParams, domain, A: float = 1.0) -> Density:
    """The exterior density ``A int_{complement} |x - z|^(-2-alpha) dz``."""
    if domain.is_disk:
        table = DiskPhi(params)
        return Density(
            lambda p, d: A * table(d),
            radial=True,
            boundary_exponent=-params.alpha,
            name="phi",
        )
    return Density(
        lambda p, d: A * phi_unit(params, domain, p),
        radial=False,
        boundary_exponent=-params.alpha,
        name="phi",
    )


@dataclass(frozen=True)
class WeightVector:
    """Per-node masses of a discretised measure."""

    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 1 or not np.all(np.isfinite(m)):
            raise ValueError("masses must be a finite 1-d array")
        object.__setattr__(self, "mass", m)

    def __len__(self):
        return len(self.mass)

    def scaled(self, gamma: float) -> "WeightVector":
        return WeightVector(gamma * self.mass)

    @property
    def total(self) -> float:
        return float(self.mass.sum())


def discretize_density(mesh: Mesh, density) -> WeightVector:
    """``mass_i = density(node_i) * cell_area_i``.

    `density` is a :class:`Density` or a plain callable of the node array.
    """
    if isinstance(density, Density):
        vals = density(mesh.nodes, mesh.delta)
    else:
        vals = np.asarray(density(mesh.nodes), dtype=float)
        vals = np.broadcast_to(vals, (mesh.size,))
    if np.any(vals < 0):
        raise ValueError("density must be nonnegative")
    if not np.all(np.isfinite(vals)):
        raise ValueError("density must be finite at the nodes")
    return WeightVector(vals * mesh.cell_area)


def snap_atoms(mesh: Mesh, positions, masses) -> WeightVector:
    """Point masses moved to the nearest node (masses add on collisions)."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    m = np.asarray(masses, dtype=float).ravel()
    if len(pos) != len(m):
        raise ValueError("positions and masses differ in length")
    if np.any(m < 0):
        raise ValueError("atom masses must be nonnegative")
    out = np.zeros(mesh.size)
    if len(m):
        _, idx = cKDTree(mesh.nodes).query(pos)
        np.add.at(out, idx, m)
    return WeightVector(out)


def integrate_values(values, weights: WeightVector) -> float:
    """``sum_i values_i mass_i``."""
    v = np.asarray(values, dtype=float)
    if v.shape != weights.mass.shape:
        raise ValueError("values and weights differ in length")
    return float(v @ weights.mass)


# ---------------------------------------------------------------------------
# symmetry folding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Folding:
    """Partition of mesh nodes into orbits.

    Attributes
    ----------
    orbit : ndarray, shape (N,)
        Orbit number of every mesh node.
    rep : ndarray, shape (M,)
        Mesh index of each orbit's representative (its smallest index).
    size : ndarray, shape (M,)
        Number of nodes in each orbit.
    """

    orbit: np.ndarray = field(repr=False)
    rep: np.ndarray = field(repr=False)
    size: np.ndarray = field(repr=False)

    @property
    def trivial(self) -> bool:
        return len(self.rep) == len(self.orbit)

    @classmethod
    def identity(cls, n: int) -> "Folding":
        i = np.arange(n)
        return cls(orbit=i, rep=i, size=np.ones(n, dtype=np.int64))

    @classmethod
    def disk_symmetry(cls, mesh: Mesh) -> "Folding":
        """Orbits of the 8 symmetries of the square grid on the disk."""
        if not mesh.domain.is_disk:
            raise ValueError("symmetry folding is only defined on the disk")
        c = 2 * mesh.grid_index + 1 - 2 * mesh.resolution  # odd integers
        a = np.abs(c)
        key = np.stack([a.min(axis=1), a.max(axis=1)], axis=1)
        _, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.ravel()
        first = np.full(inv.max() + 1, mesh.size)
        np.minimum.at(first, inv, np.arange(mesh.size))
        order = np.argsort(first, kind="stable")
        renum = np.empty_like(order)
        renum[order] = np.arange(len(order))
        orbit = renum[inv]
        return cls(orbit=orbit, rep=first[order], size=np.bincount(orbit))

    def expand(self, values) -> np.ndarray:
        """Orbit values -> per-node values."""
        return np.asarray(values)[..., self.orbit]

    def collapse(self, per_node_mass) -> np.ndarray:
        """Per-node masses -> orbit totals."""
        return np.bincount(self.orbit, weights=np.asarray(per_node_mass, float), minlength=len(self.rep))


# ---------------------------------------------------------------------------
# options and fine quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureOptions:
    """Tuning of the corrected scheme (lengths in units of the cell side).

    Attributes
    ----------
    tangential : float
        Fine boundary-layer points per cell side along the boundary.
    legendre : int
        Gauss points per radial panel of the fine quadrature.
    geometric_panels : int
        Panels graded geometrically from ``layer_floor`` to one cell side.
    layer_floor : float
        Depth (relative to the cell side) below which a single Gauss-Jacobi
        panel with the exact boundary power is used.
    layer_cells : float
        Cells with depth below this use the boundary-layer points; deeper
        cells use a tensor Gauss rule.
    tensor : int
        Tensor Gauss order per axis for deep cells.
    near : float
        Radius of the near field that is integrated with fine quadrature.
    """

    tangential: float = 6.0
    legendre: int = 6
    geometric_panels: int = 16
    layer_floor: float = 1e-6
    layer_cells: float = 4.0
    tensor: int = 4
    near: float = 6.0


@dataclass
class LayerQuadrature:
    """Fine quadrature of the disk, partitioned by nearest mesh node.

    Points are sorted by owner; ``offsets[j]:offsets[j+1]`` are node j's.
    """

    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)
    owner: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, mesh: Mesh, params: FracParams, opts: QuadratureOptions, power: float) -> "LayerQuadrature":
        """`power` is the exponent of the integrands at the boundary, used
        for the innermost Gauss-Jacobi panel."""
        s = mesh.side
        # radial (depth) rule for the boundary ring
        ring = opts.layer_cells + 1.0
        floor = opts.layer_floor * s
        jx, jw = roots_jacobi(8, 0.0, power)
        d0 = 0.5 * (jx + 1.0) * floor
        w0 = jw * (0.5 * floor) ** (1.0 + power) / d0**power
        lx, lw = roots_legendre(opts.legendre)
        edges = np.concatenate(
            [np.geomspace(floor, s, opts.geometric_panels + 1), s * np.arange(2.0, ring + 1.0)]
        )
        lo, hi = edges[:-1, None], edges[1:, None]
        d1 = (lo + 0.5 * (lx + 1.0) * (hi - lo)).ravel()
        w1 = (0.5 * lw * (hi - lo)).ravel()
        dr = np.concatenate([d0, d1])
        wr = np.concatenate([w0, w1])
        nth = 8 * int(np.ceil(2 * np.pi * mesh.resolution * opts.tangential / 8))
        th = 2 * np.pi * (np.arange(nth) + 0.5) / nth
        rho = 1.0 - dr
        pts = np.stack(
            [np.outer(rho, np.cos(th)).ravel(), np.outer(rho, np.sin(th)).ravel()], axis=1
        )
        wts = np.outer(wr * rho, np.full(nth, 2 * np.pi / nth)).ravel()
        dep = np.repeat(dr, nth)
        _, own = cKDTree(mesh.nodes).query(pts)
        deep = mesh.delta >= opts.layer_cells * s
        keep = ~deep[own]
        pts, wts, dep, own = pts[keep], wts[keep], dep[keep], own[keep]
        # tensor rule on deep cells (entirely inside the disk)
        gx, gw = roots_legendre(opts.tensor)
        off = 0.5 * s * gx
        ox, oy = np.meshgrid(off, off, indexing="ij")
        ow = np.outer(gw, gw).ravel() * (0.5 * s) ** 2
        idx = np.flatnonzero(deep)
        tp = (mesh.nodes[idx, None, :] + np.stack([ox.ravel(), oy.ravel()], axis=1)[None]).reshape(-1, 2)
        tw = np.tile(ow, len(idx))
        td = 1.0 - np.hypot(tp[:, 0], tp[:, 1])
        to = np.repeat(idx, len(ow))
        pts = np.concatenate([pts, tp])
        wts = np.concatenate([wts, tw])
        dep = np.concatenate([dep, td])
        own = np.concatenate([own, to])
        order = np.argsort(own, kind="stable")
        own = own[order]
        offsets = np.searchsorted(own, np.arange(mesh.size + 1))
        return cls(pts[order], wts[order], dep[order], own, offsets)

    def owned(self, nodes) -> np.ndarray:
        """Indices of the points owned by any of `nodes`."""
        nodes = np.asarray(nodes)
        starts = self.offsets[nodes]
        stops = self.offsets[nodes + 1]
        lens = stops - starts
        total = int(lens.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64)
        base = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
        return base + np.arange(total)

    def masses(self, mesh: Mesh, density: Density, half: float) -> np.ndarray:
        """Per-node product-integrated masses."""
        vals = density(self.points, self.depth)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("density must be finite and nonnegative")
        f = vals * self.weights * (self.depth / mesh.delta[self.owner]) ** half
        return np.bincount(self.owner, weights=f, minlength=mesh.size)


# ---------------------------------------------------------------------------
# the matrix
# ---------------------------------------------------------------------------


@dataclass
class KernelMatrix:
    """Dense symmetric discrete Green operator.

    Attributes
    ----------
    entries : ndarray, shape (M, M)
        Matrix acting on orbit values; equals the node matrix when the
        folding is trivial.
    backend : KernelBackend
    mesh : Mesh
    folding : Folding
    scheme : {"cell", "corrected"}
    reference : Density or None
        Density the diagonal was adapted to (corrected scheme).
    layer : LayerQuadrature or None
    node_mass : ndarray or None
        Per-node masses of the reference density.
    """

    entries: np.ndarray = field(repr=False)
    backend: KernelBackend
    mesh: Mesh = field(repr=False)
    folding: Folding = field(repr=False)
    scheme: str = "cell"
    reference: Optional[Density] = None
    layer: Optional[LayerQuadrature] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def nodes(self) -> np.ndarray:
        return self.mesh.nodes[self.folding.rep]

    @property
    def delta(self) -> np.ndarray:
        return self.mesh.delta[self.folding.rep]

    @property
    def multiplicity(self) -> np.ndarray:
        return self.folding.size

    def weights(self, density: Density) -> WeightVector:
        """Discretise `density` consistently with this matrix."""
        if not self.folding.trivial and not getattr(density, "radial", False):
            raise ValueError("a folded matrix only accepts radial densities")
        if self.layer is not None:
            per_node = self.layer.masses(self.mesh, density, self.backend.params.half)
        else:
            per_node = discretize_density(self.mesh, density).mass
        return WeightVector(self.folding.collapse(per_node))

    def atoms(self, positions, masses) -> WeightVector:
        if not self.folding.trivial:
            raise ValueError("atoms break the symmetry of a folded matrix")
        return snap_atoms(self.mesh, positions, masses)

    def expand(self, values) -> np.ndarray:
        return self.folding.expand(values)

    def dump(self, path) -> None:
        dump_matrix(self.entries, path)


def dump_matrix(entries: np.ndarray, path) -> None:
    """Binary format: N as little-endian int64, then N*N little-endian float64."""
    e = np.ascontiguousarray(entries, dtype="<f8")
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise ValueError("expected a square matrix")
    with open(path, "wb") as fh:
        fh.write(np.int64(e.shape[0]).astype("<i8").tobytes())
        fh.write(e.tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError("truncated matrix file")
    n = int(np.frombuffer(raw[:8], dtype="<i8")[0])
    if n < 0 or len(raw) != 8 + 8 * n * n:
        raise ValueError("matrix file size does not match its header")
    return np.frombuffer(raw[8:], dtype="<f8").reshape(n, n).astype(float)


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("FRACGAUGE_THREADS", "1") or 1)
    return max(1, int(threads))


def _offdiagonal(backend: KernelBackend, mesh: Mesh, fold: Folding, threads: int, block_entries: int = 2_000_000) -> np.ndarray:
    """Orbit-summed point values ``sum_{j in J} G(x_I, x_j) / |J|`` with the
    coincident pair left out; only orbit pairs J >= I are evaluated."""
    M = len(fold.rep)
    perm = np.argsort(fold.orbit, kind="stable")
    starts = np.searchsorted(fold.orbit[perm], np.arange(M + 1))
    nodes, delta = mesh.nodes, mesh.delta
    out = np.zeros((M, M))
    avg_cols = max(1, mesh.size // 2)
    bsize = max(1, block_entries // avg_cols)
    blocks = [(b, min(M, b + bsize)) for b in range(0, M, bsize)]

    def work(blk):
        b0, b1 = blk
        rows = fold.rep[b0:b1]
        cols = perm[starts[b0] :]
        with np.errstate(divide="ignore", invalid="ignore"):
            g = backend(nodes[rows, None, :], nodes[None, cols, :], delta[rows, None], delta[None, cols])
        g[rows[:, None] == cols[None, :]] = 0.0
        sums = np.add.reduceat(g, starts[b0:M] - starts[b0], axis=1)
        out[b0:b1, b0:] = sums / fold.size[None, b0:]

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, blocks))
    else:
        for blk in blocks:
            work(blk)
    iu = np.triu_indices(M, 1)
    out[iu[1], iu[0]] = out[iu]
    return out


def _square_power_average(alpha: float, side: float) -> float:
    """``(1/side^2) int_square |y|^(alpha-2) dy`` for the centred square."""
    J, _ = integrate.quad(lambda t: np.cos(t) ** (-alpha), 0.0, np.pi / 4, epsabs=0, epsrel=1e-13)
    return 8.0 / alpha * (0.5 * side) ** alpha * J / side**2


def _cell_diagonal(backend: KernelBackend, mesh: Mesh, idx: np.ndarray) -> np.ndarray:
    """Cell-averaged kernel with the smooth factor frozen from 4 sub-cell samples."""
    s = mesh.side
    alpha = backend.params.alpha
    x = mesh.nodes[idx]
    rho = np.zeros(len(idx))
    for sx in (-0.25, 0.25):
        for sy in (-0.25, 0.25):
            y = x + np.array([sx, sy]) * s
            dy = _depth(mesh.domain, y)
            inside = dy > 0
            g = backend(x, y, mesh.delta[idx], np.where(inside, dy, 0.0))
            rho += np.where(inside, g, 0.0) * (np.hypot(sx, sy) * s) ** (2.0 - alpha)
    rho /= 4.0
    return rho * _square_power_average(alpha, s)


# polar block integrals ------------------------------------------------------


def _graded(levels: int, ratio: float, order: int, both: bool = True):
    """Composite Gauss-Legendre on [0, 1], graded geometrically to 0 (and 1)."""
    if levels <= 0:
        x, w = roots_legendre(order)
        return 0.5 * (x + 1.0), 0.5 * w
    g = ratio ** np.arange(levels, 0, -1)
    if both:
        g = 0.5 * g
        edges = np.unique(np.concatenate([[0.0], g, [0.5], 1.0 - g, [1.0]]))
    else:
        edges = np.unique(np.concatenate([[0.0], g, [1.0]]))
    x, w = roots_legendre(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    return (lo + 0.5 * (x + 1.0) * (hi - lo)).ravel(), (0.5 * w * (hi - lo)).ravel()


class _BlockIntegrator:
    """``int_{B_i cap disk} G(x_i, y) rho(y) dy`` for the square block B_i of
    half-width ``hw`` centred at node i, in polar coordinates about x_i."""

    def __init__(self, backend: KernelBackend, density: Density, hw: float):
        self.backend = backend
        self.density = density
        self.alpha = backend.params.alpha
        self.hw = hw
        self.power = backend.params.half + density.boundary_exponent
        self.jac_origin = roots_jacobi(20, 0.0, self.alpha - 1.0)
        self.jac_both = roots_jacobi(20, self.power, self.alpha - 1.0)
        self.jac_exit = roots_jacobi(10, self.power, 0.0)
        self.leg = roots_legendre(10)

    def _integrand(self, x, dxi, u, r):
        """``G rho r`` along rays; u (A,2), r (A,K)."""
        y = x[None, None, :] + r[..., None] * u[:, None, :]
        xd = u @ x
        q = dxi * (2.0 - dxi)
        py = q - 2.0 * r * xd[:, None] - r * r
        py = np.clip(py, 0.0, None)
        dy = py / (1.0 + np.sqrt(np.clip(1.0 - py, 0.0, None)))
        g = green_exact_ball(self.backend.params, x, y, px=q, py=py, check=False)
        return g * self.density(y, np.maximum(dy, 1e-300)) * r

    def _angles(self, x, dxi, levels):
        hw = self.hw
        corners = x + hw * np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
        br = [np.arctan2(corners[:, 1] - x[1], corners[:, 0] - x[0])]
        br.append(np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi]))
        if levels > 0:
            # circle / block-edge intersections
            for k in range(4):
                a0, a1 = corners[k], corners[(k + 1) % 4]
                D = a1 - a0
                A = D @ D
                B = 2 * a0 @ D
                C = a0 @ a0 - 1.0
                disc = B * B - 4 * A * C
                if disc > 0:
                    for sg in (-1.0, 1.0):
                        t = (-B + sg * np.sqrt(disc)) / (2 * A)
                        if 0.0 < t < 1.0:
                            p = a0 + t * D - x
                            br.append(np.array([np.arctan2(p[1], p[0])]))
            n = np.arctan2(x[1], x[0])
            br.append(np.array([n, n + 0.5 * np.pi, n + np.pi, n - 0.5 * np.pi]))
        b = np.unique(np.mod(np.concatenate(br), 2 * np.pi))
        b = b[np.concatenate([[True], np.diff(b) > 1e-13])]
        b = np.concatenate([b, [b[0] + 2 * np.pi]])
        t, w = _graded(levels, 0.3, 12 if levels == 0 else 8)
        lo, hi = b[:-1, None], b[1:, None]
        return (lo + t * (hi - lo)).ravel(), (w * (hi - lo)).ravel()

    def node(self, x, dxi) -> float:
        """Block integral for one node."""
        hw = self.hw
        s = hw / 1.5
        interior = dxi > hw * np.sqrt(2.0) + 0.5 * s
        levels = 0 if interior else int(np.clip(np.ceil(np.log(hw / max(dxi, 1e-300) * 8) / np.log(1 / 0.3)), 2, 40))
        th, tw = self._angles(x, dxi, levels)
        u = np.stack([np.cos(th), np.sin(th)], axis=1)
        with np.errstate(divide="ignore"):
            rsq = hw / np.maximum(np.abs(u[:, 0]), np.abs(u[:, 1]))
        xd = u @ x
        rdisk = _disk_exit(xd, dxi * (2.0 - dxi))
        R = np.minimum(rsq, rdisk)
        hits = rdisk < rsq
        a = self.alpha
        total = 0.0
        if interior:
            jx, jw = self.jac_origin
            r = R[:, None] * 0.5 * (jx + 1.0)[None]
            f = self._integrand(x, dxi, u, r) / r ** (a - 1.0)
            return float(((f * jw[None]).sum(1) * (0.5 * R) ** a) @ tw)
        # graded radial panels: [0, tau_L R], ..., [tau_1 R, R]
        L = levels
        tau = 0.25 ** np.arange(L, 0, -1)  # increasing, < 1
        # first panel with the origin weight
        jx, jw = self.jac_origin
        r0 = (tau[0] * R)[:, None] * 0.5 * (jx + 1.0)[None]
        f = self._integrand(x, dxi, u, r0) / r0 ** (a - 1.0)
        total += ((f * jw[None]).sum(1) * (0.5 * tau[0] * R) ** a) @ tw
        # interior Legendre panels
        lx, lw = self.leg
        for k in range(len(tau) - 1):
            lo, hi = tau[k] * R, tau[k + 1] * R
            r = lo[:, None] + (hi - lo)[:, None] * 0.5 * (lx + 1.0)[None]
            f = self._integrand(x, dxi, u, r)
            total += ((f * lw[None]).sum(1) * 0.5 * (hi - lo)) @ tw
        # last panel: exit weight where the ray leaves through the circle
        lo = tau[-1] * R
        span = R - lo
        ex, ew = self.jac_exit
        r = lo[:, None] + span[:, None] * 0.5 * (ex + 1.0)[None]
        f = self._integrand(x, dxi, u, r)
        fe = f / np.maximum(R[:, None] - r, 1e-300) ** self.power
        part_exit = (fe * ew[None]).sum(1) * (0.5 * span) ** (1.0 + self.power)
        r2 = lo[:, None] + span[:, None] * 0.5 * (lx + 1.0)[None]
        f2 = self._integrand(x, dxi, u, r2)
        part_plain = (f2 * lw[None]).sum(1) * 0.5 * span
        total += np.where(hits, part_exit, part_plain) @ tw
        return float(total)


def _corrected_diagonal(backend, mesh, fold, layer, density, node_mass, opts, offdiag_point) -> np.ndarray:
    """Per-representative diagonal values of the corrected scheme."""
    s = mesh.side
    hw = 1.5 * s
    blk = _BlockIntegrator(backend, density, hw)
    tree = cKDTree(mesh.nodes)
    out = np.empty(len(fold.rep))
    for I, i in enumerate(fold.rep):
        x = mesh.nodes[i]
        dxi = mesh.delta[i]
        P = blk.node(x, dxi)
        near = np.asarray(tree.query_ball_point(x, opts.near * s + 1e-12), dtype=np.int64)
        near.sort()
        q = layer.owned(near)
        Q = layer.points[q]
        outside = np.max(np.abs(Q - x), axis=1) >= hw
        q = q[outside]
        F = 0.0
        if len(q):
            g = backend(x, layer.points[q], dxi, layer.depth[q])
            F = float(
                g @ (density(layer.points[q], layer.depth[q]) * layer.weights[q])
            )
        others = near[near != i]
        S = float(offdiag_point(i, others) @ node_mass[others])
        out[I] = (P + F - S) / node_mass[i]
    return out


def assemble_green_matrix(
    backend: KernelBackend,
    mesh: Mesh,
    scheme: str = "auto",
    reference: Optional[Density] = None,
    fold: bool = False,
    threads: Optional[int] = None,
    options: QuadratureOptions = QuadratureOptions(),
) -> KernelMatrix:
    """Dense Green matrix on `mesh`.

    Parameters
    ----------
    backend : KernelBackend
    mesh : Mesh
    scheme : {"auto", "cell", "corrected"}
        ``"auto"`` selects ``"corrected"`` for the exact ball kernel when a
        reference density is given, ``"cell"`` otherwise.
    reference : Density, optional
        Density the corrected diagonal is adapted to.
    fold : bool
        Fold onto symmetry orbits of the disk grid (radial data only).
    threads : int, optional
        Worker threads for the off-diagonal blocks (defaults to the
        ``FRACGAUGE_THREADS`` environment variable, else 1).  Results do not
        depend on the thread count.
    """
    if backend.domain != mesh.domain:
        raise ValueError("backend and mesh live on different domains")
    if backend.params.n != 2:
        raise ValueError("assembly is planar")
    if scheme == "auto":
        scheme = "corrected" if (backend.kind == EXACT_BALL and reference is not None) else "cell"
    if scheme not in ("cell", "corrected"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "corrected":
        if backend.kind != EXACT_BALL:
            raise ValueError("the corrected scheme needs the exact ball kernel")
        if reference is None:
            raise ValueError("the corrected scheme needs a reference density")
    folding = Folding.disk_symmetry(mesh) if fold else Folding.identity(mesh.size)
    if fold and reference is not None and not reference.radial:
        raise ValueError("folding needs a radial reference density")
    nthreads = _threads(threads)

    K = _offdiagonal(backend, mesh, folding, nthreads)
    layer = None
    reps = folding.rep
    if scheme == "cell":
        diag = _cell_diagonal(backend, mesh, reps)
    else:
        power = backend.params.half + reference.boundary_exponent
        layer = LayerQuadrature.build(mesh, backend.params, options, power)
        node_mass = layer.masses(mesh, reference, backend.params.half)

        def point_row(i, js):
            return backend(mesh.nodes[i], mesh.nodes[js], mesh.delta[i], mesh.delta[js])

        diag = _corrected_diagonal(backend, mesh, folding, layer, reference, node_mass, options, point_row)
    K[np.arange(len(reps)), np.arange(len(reps))] += diag / folding.size
    K = 0.5 * (K + K.T)
    return KernelMatrix(
        entries=K,
        backend=backend,
        mesh=mesh,
        folding=folding,
        scheme=scheme,
        reference=reference,
        layer=layer,
    )


def calibrate_A(K: KernelMatrix, unit_phi: WeightVector) -> float:
    """Constant A making the discrete ``G phi`` equal 1 at the node closest
    to the domain centroid (``unit_phi`` are the masses of phi with A = 1)."""
    centre = K.mesh.domain.centroid
    d = np.hypot(*(K.nodes - centre).T)
    c = int(np.argmin(d))
    return float(1.0 / (K.entries[c] @ unit_phi.mass))
