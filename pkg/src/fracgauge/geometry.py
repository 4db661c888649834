"""Planar domains (unit disk, axis-aligned box) and Cartesian cell meshes.

All queries are vectorised: a point is an array whose last axis has
length 2, and every function broadcasts over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "Domain",
    "Mesh",
    "unit_disk",
    "box",
    "contains",
    "distance_to_boundary",
    "ray_exit_distance",
    "build_mesh",
]

DISK = "disk"
BOX = "box"


@dataclass(frozen=True)
class Domain:
    """Bounded planar region.

    Parameters
    ----------
    kind : {"disk", "box"}
        ``"disk"`` is the open unit disk centred at the origin, ``"box"``
        the open rectangle described by `bounds`.
    bounds : tuple of (lo, hi) pairs, optional
        Per-axis bounds, required for boxes and ignored for the disk.
    """

    kind: str
    bounds: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.kind == DISK:
            object.__setattr__(self, "bounds", None)
            return
        if self.kind != BOX:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.bounds is None or len(self.bounds) != 2:
            raise ValueError("a box needs one (lo, hi) pair per axis (2 axes)")
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in b:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid box bounds {b}")
        object.__setattr__(self, "bounds", b)

    @property
    def is_disk(self) -> bool:
        return self.kind == DISK

    @property
    def area(self) -> float:
        if self.is_disk:
            return float(np.pi)
        (x0, x1), (y0, y1) = self.bounds
        return (x1 - x0) * (y1 - y0)

    @property
    def centroid(self) -> np.ndarray:
        if self.is_disk:
            return np.zeros(2)
        return np.array([0.5 * (lo + hi) for lo, hi in self.bounds])

    def to_dict(self) -> dict:
        if self.is_disk:
            return {"kind": DISK}
        return {"kind": BOX, "bounds": [list(b) for b in self.bounds]}


def unit_disk() -> Domain:
    return Domain(DISK)


def box(xlo: float, xhi: float, ylo: float, yhi: float) -> Domain:
    return Domain(BOX, ((xlo, xhi), (ylo, yhi)))


def _pts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError("points must have a trailing axis of length 2")
    return x


def _depth(domain: Domain, x: np.ndarray) -> np.ndarray:
    """Signed distance to the boundary (positive inside)."""
    if domain.is_disk:
        return 1.0 - np.hypot(x[..., 0], x[..., 1])
    (x0, x1), (y0, y1) = domain.bounds
    return np.minimum.reduce(
        [x[..., 0] - x0, x1 - x[..., 0], x[..., 1] - y0, y1 - x[..., 1]]
    )


def contains(domain: Domain, x) -> np.ndarray | bool:
    """True where `x` lies in the open domain."""
    out = _depth(domain, _pts(x)) > 0
    return bool(out) if out.ndim == 0 else out


def distance_to_boundary(domain: Domain, x) -> np.ndarray | float:
    """Exact Euclidean distance to the boundary.

    Raises
    ------
    ValueError
        If any point is not interior.
    """
    d = _depth(domain, _pts(x))
    if np.any(~(d > 0)):
        raise ValueError("distance_to_boundary requires interior points")
    return float(d) if d.ndim == 0 else d


def _disk_exit(xd, q):
    """Positive root of t^2 + 2 t xd - q = 0 without cancellation.

    ``xd`` is x.theta and ``q = 1 - |x|^2`` (computed by the caller from the
    depth when accuracy near the boundary matters).
    """
    sq = np.sqrt(xd * xd + q)
    pos = xd > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        near = q / (xd + sq)
    return np.where(pos, near, sq - xd)


def ray_exit_distance(domain: Domain, x, theta) -> np.ndarray | float:
    """Distance from `x` to the boundary along the unit direction `theta`.

    Parameters
    ----------
    x : array_like, shape (..., 2)
        Interior points.
    theta : array_like, shape (..., 2)
        Unit direction vectors, broadcast against `x`.
    """
    x = _pts(x)
    u = _pts(theta)
    if not np.allclose(np.hypot(u[..., 0], u[..., 1]), 1.0, atol=1e-12):
        raise ValueError("theta must be a unit vector")
    d = _depth(domain, x)
    if np.any(~(d > 0)):
        raise ValueError("ray_exit_distance requires interior points")
    if domain.is_disk:
        xd = np.sum(x * u, axis=-1)
        out = _disk_exit(xd, d * (2.0 - d))
    else:
        out = np.full(np.broadcast_shapes(x.shape, u.shape)[:-1], np.inf)
        for k, (lo, hi) in enumerate(domain.bounds):
            uk = u[..., k]
            xk = x[..., k]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(uk > 0, (hi - xk) / uk, np.where(uk < 0, (lo - xk) / uk, np.inf))
            out = np.minimum(out, t)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Mesh:
    """Cell-centred Cartesian mesh of a domain.

    Attributes
    ----------
    domain : Domain
    resolution : int
        Cells per unit length; cell side is ``1 / resolution``.
    nodes : ndarray, shape (N, 2)
        Centroids of the included cells, row-major (y outer, x inner).
    cell_area : ndarray, shape (N,)
        Full cell area times the fraction of the 4 corners lying in the
        closed domain.
    delta : ndarray, shape (N,)
        Exact distance of each node to the boundary.
    grid_index : ndarray, shape (N, 2)
        Integer (ix, iy) cell indices, used for symmetry bookkeeping.
    """

    domain: Domain
    resolution: int
    nodes: np.ndarray = field(repr=False)
    cell_area: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    grid_index: np.ndarray = field(repr=False)

    @property
    def side(self) -> float:
        return 1.0 / self.resolution

    @property
    def h(self) -> float:
        """Nominal cell diameter."""
        return np.sqrt(2.0) / self.resolution

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def p(self) -> np.ndarray:
        """``1 - |x|^2`` evaluated from the depth (disk meshes only)."""
        return self.delta * (2.0 - self.delta)


def build_mesh(domain: Domain, resolution: int) -> Mesh:
    """Cells of side ``1/resolution`` whose centroid lies inside `domain`."""
    resolution = int(resolution)
    if resolution < 4:
        raise ValueError("resolution must be at least 4")
    s = 1.0 / resolution
    if domain.is_disk:
        # grid aligned with the origin so the mesh shares the disk's symmetries
        ox = oy = -1.0
        nx = ny = 2 * resolution
    else:
        (x0, x1), (y0, y1) = domain.bounds
        ox, oy = x0, y0
        nx = int(np.ceil((x1 - x0) * resolution - 1e-9))
        ny = int(np.ceil((y1 - y0) * resolution - 1e-9))
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ix = ix.ravel()
    iy = iy.ravel()
    cx = ox + (ix + 0.5) * s
    cy = oy + (iy + 0.5) * s
    centres = np.stack([cx, cy], axis=1)
    depth = _depth(domain, centres)
    keep = depth > 0
    if not keep.any():
        raise ValueError("resolution too coarse: mesh has no nodes")
    centres = centres[keep]
    ix, iy = ix[keep], iy[keep]
    frac = np.zeros(len(centres))
    for sx in (-0.5, 0.5):
        for sy in (-0.5, 0.5):
            corner = centres + np.array([sx, sy]) * s
            frac += _depth(domain, corner) >= -1e-14 * s
    return Mesh(
        domain=domain,
        resolution=resolution,
        nodes=centres,
        cell_area=frac / 4.0 * s * s,
        delta=depth[keep],
        grid_index=np.stack([ix, iy], axis=1),
    )
