from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, SolverError


ORDERINGS = ('lexicographic', 'red_black')


@dataclass(frozen=True)
class PSORSettings:
    """Relaxation, per-node absolute tolerance, iteration cap and sweep ordering"""

    omega: float = 1.5
    tolerance: float = 1e-9
    max_iterations: int = 10000
    ordering: str = 'lexicographic'

    def __post_init__(self):
        if not 0.0 < self.omega < 2.0:
            raise ConfigError(f"PSOR relaxation must lie in (0, 2), got {self.omega}")
        if not self.tolerance > 0:
            raise ConfigError(f"PSOR tolerance must be positive, got {self.tolerance}")
        if int(self.max_iterations) < 1:
            raise ConfigError(f"PSOR iteration cap must be positive, got {self.max_iterations}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"Unknown PSOR ordering '{self.ordering}', expected one of {ORDERINGS}")

    @classmethod
    def from_config(cls, section):
        section = section or {}
        return cls(
            omega=float(section.get('omega', 1.5)),
            tolerance=float(section.get('tolerance', 1e-9)),
            max_iterations=int(section.get('max_iterations', 10000)),
            ordering=str(section.get('ordering', 'lexicographic')),
        )


class PSORSolver:
    """Projected SOR for the LCP  A x >= b, x >= g, (A x - b)(x - g) = 0"""

    def __init__(self, matrix, settings=None, colors=None):
        """
        Args:
            matrix: Square sparse matrix with positive diagonal
            settings (PSORSettings, optional): Solver parameters
            colors (list, optional): Index arrays partitioning the unknowns so that no two
                indices of one color are coupled; required for the red_black ordering
        """
        self.settings = settings or PSORSettings()
        self.matrix = sp.csr_matrix(matrix)
        self.diagonal = self.matrix.diagonal()
        if np.any(self.diagonal <= 0):
            raise SolverError("PSOR needs a strictly positive diagonal")

        if self.settings.ordering == 'red_black':
            if not colors:
                raise ConfigError("Red-black PSOR ordering needs a node coloring")
            self._color_blocks = []
            off_diagonal = self.matrix - sp.diags(self.diagonal)
            for color in colors:
                color = np.asarray(color, dtype=int)
                self._color_blocks.append((color, sp.csr_matrix(off_diagonal[color]), self.diagonal[color]))
        else:
            self._indptr = self.matrix.indptr.tolist()
            self._indices = self.matrix.indices.tolist()
            self._data = self.matrix.data.tolist()

    def solve(self, rhs, obstacle, initial=None, layer=None):
        """
        Iterate until the largest per-node update is below tolerance

        Returns:
            tuple: (solution array, iteration count, final max update)
        """
        obstacle = np.asarray(obstacle, dtype=float)
        rhs = np.asarray(rhs, dtype=float)
        x = np.maximum(np.asarray(initial if initial is not None else obstacle, dtype=float), obstacle)

        if self.settings.ordering == 'red_black':
            return self._solve_colored(rhs, obstacle, x.copy(), layer)
        return self._solve_lexicographic(rhs, obstacle, x.tolist(), layer)

    def _solve_lexicographic(self, rhs, obstacle, x, layer):
        omega = self.settings.omega
        tol = self.settings.tolerance
        indptr, indices, data = self._indptr, self._indices, self._data
        diag = self.diagonal.tolist()
        b = rhs.tolist()
        g = obstacle.tolist()
        size = len(x)

        change = float('inf')
        for iteration in range(1, self.settings.max_iterations + 1):
            change = 0.0
            for i in range(size):
                acc = b[i]
                for pos in range(indptr[i], indptr[i + 1]):
                    j = indices[pos]
                    if j != i:
                        acc -= data[pos] * x[j]
                old = x[i]
                new = old + omega * (acc / diag[i] - old)
                if new < g[i]:
                    new = g[i]
                x[i] = new
                delta = abs(new - old)
                if delta > change:
                    change = delta
            if change < tol:
                return np.array(x), iteration, change

        raise SolverError(
            f"PSOR did not converge on layer {layer} within {self.settings.max_iterations} iterations "
            f"(residual {change:.3e})", layer=layer, residual=change)

    def _solve_colored(self, rhs, obstacle, x, layer):
        omega = self.settings.omega
        tol = self.settings.tolerance

        change = float('inf')
        for iteration in range(1, self.settings.max_iterations + 1):
            change = 0.0
            for color, off_diag, diag in self._color_blocks:
                old = x[color]
                gauss_seidel = (rhs[color] - off_diag @ x) / diag
                new = np.maximum(obstacle[color], old + omega * (gauss_seidel - old))
                x[color] = new
                if new.size:
                    change = max(change, float(np.max(np.abs(new - old))))
            if change < tol:
                return x, iteration, change

        raise SolverError(
            f"PSOR did not converge on layer {layer} within {self.settings.max_iterations} iterations "
            f"(residual {change:.3e})", layer=layer, residual=change)
