import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .errors import (ExtrapolationError, ModelValidationError, PreconditionError,
                     SolverError, UnsupportedModelError)
from .market_model import validate_model
from .payoff import payoff_gradient, payoff_values
from .psor import PSORSettings, PSORSolver
from .sde_sim import TimeGrid


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Uniform log-space nodes per asset, aligned with a TimeGrid"""

    x_nodes: Tuple[np.ndarray, ...]
    time_grid: TimeGrid

    def __post_init__(self):
        nodes = tuple(np.asarray(x, dtype=float) for x in self.x_nodes)
        object.__setattr__(self, 'x_nodes', nodes)
        for i, x in enumerate(nodes):
            if x.size < 3:
                raise PreconditionError(f"Asset {i + 1} needs at least 3 space nodes, got {x.size}")
            if np.any(np.diff(x) <= 0):
                raise PreconditionError(f"Space nodes of asset {i + 1} must be strictly increasing")
        if self.time_grid.steps < 1:
            raise PreconditionError("The space-time grid needs at least one time step")

    @classmethod
    def around(cls, model, S0, space_nodes, time_steps, margin=5.0):
        """
        Grid centred on ln S0 spanning `margin` standard-deviation widths per asset

        Args:
            model (MarketModel): Supplies a-hat at (0, ln S0) for the widths
            S0 (array): Spot prices
            space_nodes (int or list): Nodes per asset
            time_steps (int): Number of time layers minus one
            margin (float): Half-width in units of sqrt(a-hat_ii * T)

        Returns:
            SpatialGrid: The grid
        """
        S0 = np.asarray(S0, dtype=float).reshape(model.n)
        if np.any(S0 <= 0):
            raise PreconditionError("S0 must be componentwise positive")
        if not margin > 0:
            raise PreconditionError(f"Grid margin must be positive, got {margin}")
        counts = [int(space_nodes)] * model.n if np.isscalar(space_nodes) else [int(m) for m in space_nodes]
        if len(counts) != model.n:
            raise PreconditionError(f"Expected {model.n} node counts, got {len(counts)}")

        centre = np.log(S0)
        a = model.diffusion_fn(0.0, centre)
        widths = margin * np.sqrt(np.diag(a) * model.T)
        if np.any(widths <= 0):
            raise ModelValidationError("Degenerate volatility at S0; cannot size the grid")
        nodes = tuple(np.linspace(c - w, c + w, m) for c, w, m in zip(centre, widths, counts))
        return cls(x_nodes=nodes, time_grid=TimeGrid(0.0, model.T, int(time_steps)))

    @property
    def n(self):
        return len(self.x_nodes)

    @property
    def shape(self):
        return tuple(x.size for x in self.x_nodes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return tuple(float(x[1] - x[0]) for x in self.x_nodes)

    @property
    def strides(self):
        shape = self.shape
        return tuple(int(np.prod(shape[i + 1:])) for i in range(len(shape)))

    @property
    def log_mesh(self):
        """Node log-coordinates, shape (size, n), C order over the asset axes"""
        mesh = np.meshgrid(*self.x_nodes, indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def price_mesh(self):
        return np.exp(self.log_mesh)

    @property
    def multi_index(self):
        return np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=-1)

    @property
    def interior_indices(self):
        idx = self.multi_index
        inside = np.all((idx > 0) & (idx < np.array(self.shape) - 1), axis=-1)
        return np.flatnonzero(inside)

    @property
    def boundary_indices(self):
        mask = np.ones(self.size, dtype=bool)
        mask[self.interior_indices] = False
        return np.flatnonzero(mask)

    def colors(self):
        """Parity classes of the multi-index; no stencil couples two nodes of one class"""
        idx = self.multi_index
        color_id = np.sum((idx % 2) * (2 ** np.arange(self.n)), axis=-1)
        return [np.flatnonzero(color_id == c) for c in range(2 ** self.n)]


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Grid-sampled v(t, S), its price-unit gradient and the exercise mask"""

    grid: SpatialGrid
    values: np.ndarray
    gradient: np.ndarray
    exercise_mask: np.ndarray
    model: object
    payoff: object
    payoff_layer: np.ndarray
    terminal_gradient_from_payoff: bool = True
    report: Dict = field(default_factory=dict)

    def __post_init__(self):
        g = self.grid
        axes = (g.time_grid.times,) + g.x_nodes
        layers = g.time_grid.steps + 1
        value_interp = RegularGridInterpolator(
            axes, self.values.reshape((layers,) + g.shape), method='linear', bounds_error=False, fill_value=None)
        grad_interp = RegularGridInterpolator(
            axes, self.gradient.reshape((layers,) + g.shape + (g.n,)), method='linear', bounds_error=False,
            fill_value=None)
        object.__setattr__(self, '_value_interp', value_interp)
        object.__setattr__(self, '_grad_interp', grad_interp)

    def query_points(self, t, S):
        """Validate (t, S) against the space-time box and return interpolation points"""
        S = np.asarray(S, dtype=float)
        single = S.ndim == 1
        S = np.atleast_2d(S)
        if S.shape[-1] != self.grid.n:
            raise PreconditionError(f"Query has {S.shape[-1]} assets, surface has {self.grid.n}")
        t = np.broadcast_to(np.asarray(t, dtype=float), S.shape[:-1])
        if np.any(S <= 0):
            raise ExtrapolationError("Surface query at a nonpositive price")
        x = np.log(S)

        tg = self.grid.time_grid
        slack = 1e-12 * max(1.0, abs(tg.T))
        lower = np.array([nodes[0] for nodes in self.grid.x_nodes])
        upper = np.array([nodes[-1] for nodes in self.grid.x_nodes])
        x_slack = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lower), np.abs(upper)))
        outside = (t < tg.t0 - slack) | (t > tg.T + slack) | np.any(
            (x < lower - x_slack) | (x > upper + x_slack), axis=-1)
        if np.any(outside):
            bad = int(np.flatnonzero(outside)[0])
            raise ExtrapolationError(
                f"Query (t={float(t[bad])}, S={S[bad].tolist()}) lies outside the surface box "
                f"t in [{tg.t0}, {tg.T}], S in [{np.exp(lower).tolist()}, {np.exp(upper).tolist()}]")

        t = np.clip(t, tg.t0, tg.T)
        x = np.clip(x, lower, upper)
        return np.column_stack([t, x]), single

    def frame_columns(self):
        """Column-wise surface dump: t, x_i, S_i, v, dv_dS_i, exercised"""
        g = self.grid
        layers = g.time_grid.steps + 1
        mesh = g.log_mesh
        columns = {'t': np.repeat(g.time_grid.times, g.size)}
        for i in range(g.n):
            columns[f"x{i + 1}"] = np.tile(mesh[:, i], layers)
        for i in range(g.n):
            columns[f"S{i + 1}"] = np.tile(np.exp(mesh[:, i]), layers)
        columns['v'] = self.values.ravel()
        for i in range(g.n):
            columns[f"dv_dS{i + 1}"] = self.gradient[:, :, i].ravel()
        columns['exercised'] = self.exercise_mask.ravel().astype(int)
        return columns


def assemble_operator(model, grid, t):
    """
    Sparse spatial part of L in log coordinates at time t

    Rows of boundary nodes are empty; interior rows use central first and second
    differences plus the four-point cross difference when n = 2.
    """
    mesh = grid.log_mesh
    interior = grid.interior_indices
    x = mesh[interior]
    a = model.diffusion_fn(t, x)
    mu = model.log_drift(t, x)
    h = grid.spacing
    strides = grid.strides

    rows, cols, vals = [], [], []
    diag = np.full(interior.size, -model.r, dtype=float)
    for i in range(grid.n):
        second = 0.5 * a[:, i, i] / h[i] ** 2
        first = mu[:, i] / (2.0 * h[i])
        rows += [interior, interior]
        cols += [interior + strides[i], interior - strides[i]]
        vals += [second + first, second - first]
        diag -= 2.0 * second

    if grid.n == 2:
        cross = a[:, 0, 1] / (4.0 * h[0] * h[1])
        s0, s1 = strides
        for offset, sign in ((s0 + s1, 1.0), (-s0 - s1, 1.0), (s0 - s1, -1.0), (-s0 + s1, -1.0)):
            rows.append(interior)
            cols.append(interior + offset)
            vals.append(sign * cross)

    rows.append(interior)
    cols.append(interior)
    vals.append(diag)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size)).tocsr()


def apply_L(layers, grid, model, k):
    """
    Discrete L f at interior nodes of layer k

    Args:
        layers (array): Function values, shape (steps+1, grid.size)
        grid (SpatialGrid): The grid the layers live on
        model (MarketModel): Coefficients
        k (int): Layer index, 0 <= k < steps; the time derivative is (f^{k+1} - f^k) / dt

    Returns:
        array: L f at grid.interior_indices
    """
    layers = np.asarray(layers, dtype=float)
    steps = grid.time_grid.steps
    if layers.shape != (steps + 1, grid.size):
        raise PreconditionError(f"Layer array shape {layers.shape} does not match grid {(steps + 1, grid.size)}")
    if not 0 <= k < steps:
        raise PreconditionError(f"Layer index {k} outside [0, {steps})")
    if not grid.interior_indices.size:
        raise PreconditionError("Grid has no interior nodes")

    interior = grid.interior_indices
    t = grid.time_grid.times[k]
    A = assemble_operator(model, grid, t)
    spatial = (A @ layers[k])[interior]
    time_derivative = (layers[k + 1, interior] - layers[k, interior]) / grid.time_grid.dt
    return spatial + time_derivative


def solve_obstacle(model, payoff, grid, settings=None, progress_callback=None):
    """
    Implicit-Euler PSOR solution of max{Lf, psi - f} = 0 with f(T, .) = psi

    Args:
        model (MarketModel): Coefficients; must pass the sampled ellipticity check
        payoff (PayoffSpec): Obstacle and terminal condition
        grid (SpatialGrid): Space-time grid (n in {1, 2})
        settings (PSORSettings, optional): Solver parameters
        progress_callback (callable, optional): progress_callback(percentage, message) -> bool

    Returns:
        ValueSurface: Values, gradient and exercise mask on every layer
    """
    if grid.n != model.n:
        raise PreconditionError(f"Grid has {grid.n} assets, model has {model.n}")
    if grid.n not in (1, 2):
        raise UnsupportedModelError(f"The grid solver supports n in {{1, 2}}, got n = {grid.n}")
    payoff.check_dimension(grid.n)
    settings = settings or PSORSettings()

    tg = grid.time_grid
    times = tg.times
    mesh = grid.log_mesh
    prices = np.exp(mesh)

    samples = [(t, x) for t in (times[0], times[len(times) // 2], times[-1]) for x in mesh]
    checks = validate_model(model, samples)

    psi = payoff_values(payoff, prices)
    boundary = grid.boundary_indices
    colors = grid.colors() if settings.ordering == 'red_black' else None

    values = np.empty((tg.steps + 1, grid.size))
    values[-1] = psi
    iterations = [0] * tg.steps
    residuals = [0.0] * tg.steps
    identity = sp.identity(grid.size, format='csr')

    solver = None
    for k in range(tg.steps - 1, -1, -1):
        if solver is None or not model.is_constant:
            A = assemble_operator(model, grid, times[k])
            solver = PSORSolver(identity - tg.dt * A, settings, colors)

        rhs = values[k + 1].copy()
        rhs[boundary] = psi[boundary]
        try:
            layer, its, change = solver.solve(rhs, psi, initial=values[k + 1], layer=k)
        except SolverError as e:
            logging.error(f"Obstacle solve failed: {e}")
            raise
        values[k] = layer
        iterations[k] = its
        residuals[k] = change
        logging.debug(f"Layer {k}: {its} PSOR iterations, last update {change:.3e}")

        if progress_callback is not None:
            done = 100.0 * (tg.steps - k) / tg.steps
            if not progress_callback(done, f"Solved layer {k}"):
                logging.info("Obstacle solve stopped by request")
                raise SolverError("Obstacle solve stopped by request", layer=k)

    gradient = np.empty((tg.steps + 1, grid.size, grid.n))
    for k in range(tg.steps):
        layer = values[k].reshape(grid.shape)
        for i in range(grid.n):
            d_dx = np.gradient(layer, grid.spacing[i], axis=i, edge_order=1)
            gradient[k, :, i] = d_dx.ravel() / prices[:, i]
    gradient[-1] = payoff_gradient(payoff, prices)

    mask = (values - psi[None, :]) <= settings.tolerance

    report = {
        'grid': {
            'space_nodes': list(grid.shape),
            'time_steps': tg.steps,
            'dt': tg.dt,
            'h': list(grid.spacing),
            'x_min': [float(x[0]) for x in grid.x_nodes],
            'x_max': [float(x[-1]) for x in grid.x_nodes],
        },
        'psor': {
            'omega': settings.omega,
            'tolerance': settings.tolerance,
            'max_iterations': settings.max_iterations,
            'ordering': settings.ordering,
            'iterations': iterations,
            'total_iterations': int(sum(iterations)),
            'max_final_update': float(max(residuals)) if residuals else 0.0,
        },
        'model_checks': checks,
        'terminal_gradient_from_payoff': True,
    }
    logging.info(f"Obstacle problem solved on {grid.shape} nodes x {tg.steps} steps "
                 f"({report['psor']['total_iterations']} PSOR iterations)")

    return ValueSurface(
        grid=grid,
        values=values,
        gradient=gradient,
        exercise_mask=mask,
        model=model,
        payoff=payoff,
        payoff_layer=psi,
        terminal_gradient_from_payoff=True,
        report=report,
    )


def complementarity_residual(surface, model):
    """
    (max positive part of Lf over interior nodes, max |Lf| over continuation nodes)

    Layers 0..steps-1 are checked; the terminal layer has no forward time difference.
    """
    grid = surface.grid
    interior = grid.interior_indices
    positive = 0.0
    continuation = 0.0
    for k in range(grid.time_grid.steps):
        Lf = apply_L(surface.values, grid, model, k)
        if Lf.size:
            positive = max(positive, float(np.max(np.maximum(Lf, 0.0))))
        free = ~surface.exercise_mask[k, interior]
        if np.any(free):
            continuation = max(continuation, float(np.max(np.abs(Lf[free]))))
    return positive, continuation


def eval_v(surface, t, S):
    """Multilinear interpolation of v in (time, log-price); v(T, .) is psi itself. Raises outside the box"""
    points, single = surface.query_points(t, S)
    out = surface._value_interp(points)
    terminal = points[:, 0] >= surface.grid.time_grid.T
    if np.any(terminal):
        out[terminal] = payoff_values(surface.payoff, np.exp(points[terminal, 1:]))
    return float(out[0]) if single else out


def eval_grad(surface, t, S):
    """Componentwise multilinear interpolation of the price-unit gradient"""
    points, single = surface.query_points(t, S)
    out = surface._grad_interp(points)
    return out[0] if single else out


def near_exercise(surface, t, S):
    """
    Whether some node within one grid step of (t, S), in time and in every log-price
    coordinate, belongs to the exercise mask

    The terminal layer equals psi, so every point in the last time step qualifies.
    """
    points, single = surface.query_points(t, S)
    g = surface.grid
    tg = g.time_grid
    mask = surface.exercise_mask.reshape((tg.steps + 1,) + g.shape)

    coords = [(points[:, 0] - tg.t0) / (tg.dt or 1.0)]
    coords += [(points[:, i + 1] - x[0]) / h for i, (x, h) in enumerate(zip(g.x_nodes, g.spacing))]
    tops = [tg.steps] + [m - 1 for m in g.shape]
    ranges = []
    for u, top in zip(coords, tops):
        low = np.clip(np.ceil(u - 1.0 - 1e-9), 0, top).astype(int)
        high = np.clip(np.floor(u + 1.0 + 1e-9), 0, top).astype(int)
        ranges.append((low, high))

    hit = np.zeros(points.shape[0], dtype=bool)
    for offsets in itertools.product(range(3), repeat=g.n + 1):
        index = tuple(np.minimum(low + o, high) for (low, high), o in zip(ranges, offsets))
        hit |= mask[index]
    return bool(hit[0]) if single else hit
