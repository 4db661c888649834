import numpy as np
import pytest

from fracgauge.geometry import box, build_mesh, unit_disk
from fracgauge.kernels import EXACT_BALL, MODEL, FracParams, KernelBackend, expected_exit_time_ball, fractional_laplacian_constant
from fracgauge.quadrature import (
    Folding,
    WeightVector,
    assemble_green_matrix,
    calibrate_A,
    constant_density,
    discretize_density,
    dump_matrix,
    integrate_values,
    lebesgue,
    load_matrix,
    phi_density,
    radial_polynomial,
    snap_atoms,
)

DISK = unit_disk()


def test_discretize_density_and_integrate():
    mesh = build_mesh(box(0, 1, 0, 1), 4)
    w = discretize_density(mesh, constant_density(2.0))
    assert w.total == pytest.approx(2.0)
    assert integrate_values(np.ones(16), w) == pytest.approx(2.0)
    w2 = discretize_density(mesh, lambda x: x[:, 0])
    assert w2.total == pytest.approx(0.5)
    with pytest.raises(ValueError):
        discretize_density(mesh, lambda x: -x[:, 0])
    with pytest.raises(ValueError):
        integrate_values(np.ones(3), w)


def test_radial_polynomial_density():
    d = radial_polynomial([1.0, 0.0, 2.0])
    assert d(np.array([[0.5, 0.0]]), np.array([0.5]))[0] == pytest.approx(1.5)
    assert d.scaled(2.0)(np.array([[0.0, 0.0]]), np.array([1.0]))[0] == pytest.approx(2.0)


def test_snap_atoms_adds_collisions():
    mesh = build_mesh(box(0, 1, 0, 1), 4)
    w = snap_atoms(mesh, [[0.1, 0.1], [0.13, 0.12], [0.9, 0.9]], [1.0, 2.0, 0.5])
    assert w.mass[0] == 3.0 and w.mass[-1] == 0.5 and w.total == 3.5
    with pytest.raises(ValueError):
        snap_atoms(mesh, [[0.1, 0.1]], [-1.0])


def test_folding_orbits():
    mesh = build_mesh(DISK, 8)
    f = Folding.disk_symmetry(mesh)
    assert f.size.sum() == mesh.size
    assert set(np.unique(f.size)) <= {4, 8}
    r = np.hypot(*mesh.nodes.T)
    # every orbit has a single radius
    assert np.allclose(r, r[f.rep][f.orbit])
    assert np.allclose(f.collapse(np.ones(mesh.size)), f.size)
    with pytest.raises(ValueError):
        Folding.disk_symmetry(build_mesh(box(0, 1, 0, 1), 4))


def test_matrix_dump_roundtrip(tmp_path):
    a = np.arange(9.0).reshape(3, 3)
    path = tmp_path / "k.bin"
    dump_matrix(a, path)
    raw = path.read_bytes()
    assert len(raw) == 8 + 72 and int.from_bytes(raw[:8], "little") == 3
    assert np.array_equal(load_matrix(path), a)


@pytest.fixture(scope="module")
def folded_pair():
    p = FracParams(1.0)
    mesh = build_mesh(DISK, 12)
    b = KernelBackend(EXACT_BALL, p, DISK)
    ref = phi_density(p, DISK)
    full = assemble_green_matrix(b, mesh, reference=ref)
    fold = assemble_green_matrix(b, mesh, reference=ref, fold=True)
    return full, fold, ref


def test_folded_matrix_reproduces_radial_products(folded_pair):
    full, fold, ref = folded_pair
    assert fold.scheme == "corrected" and fold.size < full.size
    g_full = full.entries @ full.weights(ref).mass
    g_fold = fold.entries @ fold.weights(ref).mass
    assert np.allclose(fold.expand(g_fold), g_full, rtol=1e-12)
    assert np.allclose(fold.entries, fold.entries.T)
    with pytest.raises(ValueError):
        fold.weights(phi_density(FracParams(1.0), box(0, 1, 0, 1)))
    with pytest.raises(ValueError):
        fold.atoms([[0, 0]], [1.0])


def test_assembly_is_thread_independent():
    p = FracParams(1.3)
    mesh = build_mesh(DISK, 10)
    b = KernelBackend(EXACT_BALL, p, DISK)
    k1 = assemble_green_matrix(b, mesh, threads=1).entries
    k3 = assemble_green_matrix(b, mesh, threads=3).entries
    assert np.array_equal(k1, k3)


@pytest.mark.parametrize("alpha", [0.6, 1.4])
def test_corrected_green_potential_of_lebesgue(alpha):
    p = FracParams(alpha)
    mesh = build_mesh(DISK, 24)
    K = assemble_green_matrix(KernelBackend(EXACT_BALL, p, DISK), mesh, reference=lebesgue(), fold=True)
    g1 = K.entries @ K.weights(lebesgue()).mass
    exact = expected_exit_time_ball(p, p=K.delta * (2 - K.delta))
    assert np.max(np.abs(g1 / exact - 1)) < 0.01


def test_cell_scheme_green_potential_is_rough_but_close():
    p = FracParams(1.0)
    mesh = build_mesh(DISK, 24)
    K = assemble_green_matrix(KernelBackend(EXACT_BALL, p, DISK), mesh)
    assert K.scheme == "cell"
    g1 = K.entries @ K.weights(lebesgue()).mass
    exact = expected_exit_time_ball(p, mesh.nodes)
    inner = mesh.delta > 0.2
    assert np.max(np.abs(g1[inner] / exact[inner] - 1)) < 0.05


def test_calibrated_A_close_to_fractional_laplacian_constant(folded_pair):
    _, fold, ref = folded_pair
    A = calibrate_A(fold, fold.weights(ref))
    assert A / fractional_laplacian_constant(FracParams(1.0)) == pytest.approx(1.0, abs=0.02)


def test_assembly_validation():
    p = FracParams(1.0)
    bx = box(0, 1, 0, 1)
    with pytest.raises(ValueError):
        assemble_green_matrix(KernelBackend(MODEL, p, bx), build_mesh(DISK, 8))
    with pytest.raises(ValueError):
        assemble_green_matrix(KernelBackend(MODEL, p, bx), build_mesh(bx, 8), scheme="corrected", reference=lebesgue())
    with pytest.raises(ValueError):
        assemble_green_matrix(KernelBackend(MODEL, p, bx), build_mesh(bx, 8), scheme="spectral")
    K = assemble_green_matrix(KernelBackend(MODEL, p, bx), build_mesh(bx, 8))
    assert np.all(np.diag(K.entries) > 0) and np.allclose(K.entries, K.entries.T)
    assert K.weights(lebesgue()).total == pytest.approx(1.0)
    assert isinstance(K.atoms([[0.5, 0.5]], [1.0]), WeightVector)


@pytest.mark.parametrize("alpha", [0.4, 1.0])
def test_diagonal_dominates_nearest_neighbour(alpha):
    p = FracParams(alpha)
    bx = box(0, 1, 0, 1)
    mesh = build_mesh(bx, 10)
    K = assemble_green_matrix(KernelBackend(MODEL, p, bx), mesh).entries
    off = K - np.diag(np.diag(K))
    assert np.all(np.diag(K) >= off.max(axis=1))


def test_fubini_symmetry_of_weights(small_disk_matrix):
    K = small_disk_matrix
    rng = np.random.default_rng(9)
    a, b = WeightVector(rng.random(K.size)), WeightVector(rng.random(K.size))
    lhs = integrate_values(K.entries @ a.mass, b)
    rhs = integrate_values(K.entries @ b.mass, a)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
