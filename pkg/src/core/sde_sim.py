import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import PreconditionError, SimulationError
from .payoff import payoff_values
from .utils import Utils


@dataclass(frozen=True)
class TimeGrid:
    """Uniform node times theta_k = t0 + k * dt on [t0, T]"""

    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if self.t0 < 0:
            raise PreconditionError(f"Grid start must be nonnegative, got {self.t0}")
        if int(self.steps) < 0:
            raise PreconditionError(f"Step count must be nonnegative, got {self.steps}")
        if self.steps > 0 and not self.T > self.t0:
            raise PreconditionError(f"Grid end {self.T} must exceed start {self.t0}")

    @property
    def dt(self):
        return (self.T - self.t0) / self.steps if self.steps else 0.0

    @property
    def times(self):
        if self.steps == 0:
            return np.array([self.t0])
        times = self.t0 + self.dt * np.arange(self.steps + 1)
        times[-1] = self.T
        return times

    def checkpoint_indices(self, fractions):
        """Nearest node indices of the given fractions of the horizon"""
        return [Utils.nearest_index(f, self.steps) for f in fractions]


@dataclass(frozen=True)
class PathView:
    """Zero-copy window on a bundle from node `start` onward"""

    start: int
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray


@dataclass(frozen=True)
class PathBundle:
    """Simulated asset paths together with the Brownian increments that drove them"""

    grid: TimeGrid
    n_paths: int
    states: np.ndarray
    increments: np.ndarray
    seed: int

    @property
    def n_assets(self):
        return self.states.shape[2]

    @property
    def times(self):
        return self.grid.times


def _path_generator(seed, path_index):
    """Counter-based substream keyed by (seed, path index)"""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(sequence))


def _simulate_block(model, x0, grid, seed, first_path, last_path):
    """Draw increments and step the log-Euler scheme for one block of paths"""
    steps = grid.steps
    n = model.n
    count = last_path - first_path
    sqrt_dt = math.sqrt(grid.dt)

    increments = np.empty((count, steps, n))
    for p in range(count):
        increments[p] = _path_generator(seed, first_path + p).standard_normal((steps, n)) * sqrt_dt

    log_states = np.empty((count, steps + 1, n))
    log_states[:, 0, :] = x0
    times = grid.times
    for k in range(steps):
        x = log_states[:, k, :]
        drift = model.log_drift(times[k], x)
        vol = model.vol_fn(times[k], x)
        nxt = x + drift * grid.dt + np.einsum('pij,pj->pi', vol, increments[:, k, :])
        if not np.all(np.isfinite(nxt)):
            bad = int(np.argwhere(~np.isfinite(nxt))[0][0])
            raise SimulationError(
                f"Non-finite state on path {first_path + bad} at step {k + 1}", path=first_path + bad, step=k + 1)
        log_states[:, k + 1, :] = nxt

    return np.exp(log_states), increments


def simulate(model, S0, grid, n_paths, seed, workers=None, block_size=256, progress_callback=None):
    """
    Euler-Maruyama in log coordinates with stored Brownian increments

    Args:
        model (MarketModel): Coefficients of the asset SDE
        S0 (array): Initial prices, all positive
        grid (TimeGrid): Simulation grid inside [0, T]
        n_paths (int): Number of paths
        seed (int): Master seed; path p uses the substream (seed, p)
        workers (int, optional): Thread count; results do not depend on it
        block_size (int): Paths per work item
        progress_callback (callable, optional): progress_callback(percentage, message) -> bool

    Returns:
        PathBundle: States (paths, steps+1, n) and increments (paths, steps, n)
    """
    S0 = np.asarray(S0, dtype=float).reshape(-1)
    if S0.size != model.n:
        raise PreconditionError(f"S0 has {S0.size} entries for a {model.n}-asset model")
    if np.any(S0 <= 0):
        raise PreconditionError("S0 must be componentwise positive")
    if grid.t0 < 0 or grid.T > model.T + 1e-12:
        raise PreconditionError(f"Grid [{grid.t0}, {grid.T}] not inside [0, {model.T}]")
    if int(n_paths) < 1:
        raise PreconditionError(f"Path count must be positive, got {n_paths}")
    if seed is None:
        raise PreconditionError("A seed is mandatory for simulation")

    n_paths = int(n_paths)
    workers = workers or Utils.default_worker_count()
    blocks = [(start, min(start + block_size, n_paths)) for start in range(0, n_paths, block_size)]
    x0 = np.log(S0)

    states = np.empty((n_paths, grid.steps + 1, model.n))
    increments = np.empty((n_paths, grid.steps, model.n))

    def run(block):
        return block, _simulate_block(model, x0, grid, seed, block[0], block[1])

    done = 0
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run, blocks)
            for (start, stop), (block_states, block_increments) in results:
                states[start:stop] = block_states
                increments[start:stop] = block_increments
                done += stop - start
                if progress_callback and not progress_callback(100.0 * done / n_paths, "Simulating paths..."):
                    logging.info("Simulation stopped by request")
                    raise SimulationError("Simulation stopped by request")
    else:
        for block in blocks:
            (start, stop), (block_states, block_increments) = run(block)
            states[start:stop] = block_states
            increments[start:stop] = block_increments
            done += stop - start
            if progress_callback and not progress_callback(100.0 * done / n_paths, "Simulating paths..."):
                logging.info("Simulation stopped by request")
                raise SimulationError("Simulation stopped by request")

    # exp(ln S0) may differ from S0 in the last bit
    states[:, 0, :] = S0
    states.setflags(write=False)
    increments.setflags(write=False)
    logging.info(f"Simulated {n_paths} paths over {grid.steps} steps (seed {seed})")
    return PathBundle(grid=grid, n_paths=n_paths, states=states, increments=increments, seed=int(seed))


def subpath_view(bundle, from_index):
    """States and increments from node `from_index` onward, without copying"""
    steps = bundle.grid.steps
    if not 0 <= int(from_index) <= steps:
        raise PreconditionError(f"Subpath index {from_index} outside [0, {steps}]")
    k = int(from_index)
    return PathView(
        start=k,
        times=bundle.grid.times[k:],
        states=bundle.states[:, k:, :],
        increments=bundle.increments[:, k:, :],
    )


def european_estimate(bundle, payoff, r):
    """Discounted terminal payoff mean and its standard error"""
    horizon = bundle.grid.T - bundle.grid.t0
    discounted = math.exp(-r * horizon) * payoff_values(payoff, bundle.states[:, -1, :])
    mean = float(np.mean(discounted))
    stderr = float(np.std(discounted, ddof=1) / math.sqrt(bundle.n_paths)) if bundle.n_paths > 1 else 0.0
    return mean, stderr


def paths_frame(bundle):
    """Path dump table: path_id, k, theta, S1..Sn, dW1..dWn (dW empty at the last node)"""
    n_paths, nodes, n = bundle.states.shape
    path_id = np.repeat(np.arange(n_paths), nodes)
    k = np.tile(np.arange(nodes), n_paths)
    data = {'path_id': path_id, 'k': k, 'theta': np.tile(bundle.grid.times, n_paths)}
    for i in range(n):
        data[f"S{i + 1}"] = bundle.states[:, :, i].ravel()
    padded = np.full((n_paths, nodes, n), np.nan)
    padded[:, :-1, :] = bundle.increments
    for i in range(n):
        data[f"dW{i + 1}"] = padded[:, :, i].ravel()
    return pd.DataFrame(data)
