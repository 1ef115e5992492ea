import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from core.errors import ConfigError, SolverError
from core.psor import PSORSettings, PSORSolver


def laplacian_system(size=30):
    """Diagonally dominant tridiagonal M = I - dt * A with a diffusion-like A"""
    main = np.full(size, 1.0 + 2.0 * 0.4)
    off = np.full(size - 1, -0.4)
    return sp.diags([off, main, off], [-1, 0, 1], format='csr')


def odd_even_colors(size):
    idx = np.arange(size)
    return [idx[idx % 2 == 0], idx[idx % 2 == 1]]


def test_settings_validation():
    with pytest.raises(ConfigError):
        PSORSettings(omega=2.5)
    with pytest.raises(ConfigError):
        PSORSettings(tolerance=0.0)
    with pytest.raises(ConfigError):
        PSORSettings(ordering='diagonal')
    assert PSORSettings.from_config(None) == PSORSettings()


def test_red_black_needs_colors():
    with pytest.raises(ConfigError):
        PSORSolver(laplacian_system(), PSORSettings(ordering='red_black'))


def test_nonpositive_diagonal_rejected():
    with pytest.raises(SolverError):
        PSORSolver(sp.identity(3) * -1.0)


@pytest.mark.parametrize("ordering", ['lexicographic', 'red_black'])
def test_solution_satisfies_complementarity(ordering):
    size = 30
    M = laplacian_system(size)
    x_grid = np.linspace(-1.0, 1.0, size)
    obstacle = 0.5 - x_grid ** 2
    rhs = np.full(size, 0.1)
    solver = PSORSolver(M, PSORSettings(ordering=ordering, tolerance=1e-12), odd_even_colors(size))
    x, iterations, change = solver.solve(rhs, obstacle)

    residual = M @ x - rhs
    assert iterations >= 1
    assert change < 1e-12
    assert np.all(x >= obstacle)
    assert np.all(residual >= -1e-9)
    assert np.max(np.abs((x - obstacle) * residual)) < 1e-9


def test_orderings_agree():
    size = 25
    M = laplacian_system(size)
    obstacle = np.maximum(0.3 - np.abs(np.linspace(-1, 1, size)), 0.0)
    rhs = np.linspace(0.0, 0.2, size)
    colors = odd_even_colors(size)
    lex, _, _ = PSORSolver(M, PSORSettings(tolerance=1e-13)).solve(rhs, obstacle)
    rb, _, _ = PSORSolver(M, PSORSettings(ordering='red_black', tolerance=1e-13), colors).solve(rhs, obstacle)
    assert np.allclose(lex, rb, atol=1e-10)


def test_inactive_obstacle_reduces_to_linear_solve():
    size = 20
    M = laplacian_system(size)
    rhs = np.ones(size)
    x, _, _ = PSORSolver(M, PSORSettings(tolerance=1e-13)).solve(rhs, np.full(size, -10.0))
    assert np.allclose(x, spsolve(M.tocsc(), rhs), atol=1e-10)


def test_iteration_cap_raises_with_layer_and_residual():
    settings = PSORSettings(max_iterations=1, tolerance=1e-14)
    solver = PSORSolver(laplacian_system(), settings)
    with pytest.raises(SolverError) as excinfo:
        solver.solve(np.ones(30), np.zeros(30), initial=np.zeros(30), layer=7)
    assert excinfo.value.layer == 7
    assert excinfo.value.residual > 0
