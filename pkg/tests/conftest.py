import numpy as np
import pytest

from fracgauge.geometry import build_mesh, unit_disk
from fracgauge.kernels import EXACT_BALL, FracParams, KernelBackend
from fracgauge.operators import SchrodingerOp, operator_norm
from fracgauge.quadrature import WeightVector, assemble_green_matrix


@pytest.fixture(scope="session")
def small_disk_matrix():
    """Cell-scheme exact-ball matrix on a coarse disk mesh (alpha = 1)."""
    params = FracParams(1.0)
    mesh = build_mesh(unit_disk(), 16)
    return assemble_green_matrix(KernelBackend(EXACT_BALL, params, unit_disk()), mesh)


def random_instance(K, seed, target_norm=None, density=0.3):
    """Random nonnegative omega and nu on the nodes of K.

    omega is rescaled so that the discrete norm of T equals `target_norm`
    (a value drawn from [0.2, 0.8] when omitted).
    """
    rng = np.random.default_rng(seed)
    w = rng.random(K.size) * (rng.random(K.size) < density) * K.mesh.cell_area
    nu = WeightVector(rng.random(K.size) * K.mesh.cell_area)
    op = SchrodingerOp(K, WeightVector(w))
    q = operator_norm(op)
    target = rng.uniform(0.2, 0.8) if target_norm is None else target_norm
    return op.scaled(target / q), nu
