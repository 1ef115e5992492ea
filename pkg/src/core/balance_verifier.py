import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .errors import PreconditionError, ProbeSpecificationError, SpecificationError
from .obstacle_pde import SpatialGrid, eval_grad, eval_v, near_exercise, solve_obstacle
from .payoff import payoff_values
from .sde_sim import PathView, TimeGrid, simulate, subpath_view
from .utils import Utils


@dataclass(frozen=True, eq=False)
class HedgeField:
    """Bounded map (t, S) -> phi(t, S) in R^n, evaluated at left endpoints"""

    descriptor: str
    fn: Callable
    n: int
    bound: float = math.inf

    def __call__(self, t, S):
        values = np.asarray(self.fn(t, S), dtype=float)
        if not np.all(np.isfinite(values)):
            raise PreconditionError(f"Hedge field '{self.descriptor}' returned a non-finite value")
        if values.size and np.max(np.abs(values)) > self.bound:
            raise PreconditionError(
                f"Hedge field '{self.descriptor}' exceeds its declared bound {self.bound:.6g}")
        return values

    @property
    def label(self):
        return "grad" if self.descriptor == "grad" else f"perturbed:{self.descriptor}"

    @classmethod
    def from_surface(cls, surface):
        """The surface gradient; bounded by its largest grid value"""
        bound = float(np.max(np.abs(surface.gradient))) if surface.gradient.size else 0.0
        return cls("grad", lambda t, S: eval_grad(surface, t, S), surface.grid.n, bound * (1.0 + 1e-9) + 1e-12)

    @classmethod
    def zero(cls, n):
        return cls("zero", lambda t, S: np.zeros(np.shape(S)), n, 0.0)

    @classmethod
    def scaled(cls, base, delta):
        """(1 + delta) times the base field"""
        factor = 1.0 + float(delta)
        return cls(f"scaled:{delta:g}", lambda t, S: factor * base.fn(t, S), base.n, abs(factor) * base.bound)

    @classmethod
    def zero_asset(cls, base, asset):
        """Base field with component `asset` (1-based) set to zero"""
        if not 1 <= int(asset) <= base.n:
            raise SpecificationError(f"Asset {asset} outside 1..{base.n}")
        i = int(asset) - 1

        def fn(t, S):
            values = np.array(base.fn(t, S), dtype=float)
            values[..., i] = 0.0
            return values
        return cls(f"zero_asset:{int(asset)}", fn, base.n, base.bound)

    @classmethod
    def shifted(cls, base, offset):
        """Base field plus a constant in every component"""
        offset = float(offset)
        return cls(f"shift:{offset:g}", lambda t, S: base.fn(t, S) + offset, base.n, base.bound + abs(offset))

    @classmethod
    def parse(cls, descriptor, base):
        """
        Build a perturbation from a config descriptor

        Args:
            descriptor (str): "grad", "zero", "scaled:<delta>", "zero_asset:<i>" or "shift:<c>"
            base (HedgeField): The reference field the descriptor perturbs

        Returns:
            HedgeField: The perturbed field
        """
        text = str(descriptor).strip().lower()
        kind, _, arg = text.partition(':')
        try:
            if kind == 'grad' and not arg:
                return base
            if kind == 'zero' and not arg:
                return cls.zero(base.n)
            if kind == 'scaled':
                return cls.scaled(base, float(arg))
            if kind == 'zero_asset':
                return cls.zero_asset(base, int(arg))
            if kind == 'shift':
                return cls.shifted(base, float(arg))
        except ValueError as e:
            raise SpecificationError(f"Invalid perturbation '{descriptor}': {e}") from e
        raise SpecificationError(f"Unknown perturbation '{descriptor}'")


@dataclass(frozen=True)
class CheckpointStats:
    index: int
    t: float
    mean: float
    std: float
    max_abs: float
    stderr: float
    argmax_at_T_fraction: float
    argmax_exercise_or_T_fraction: float

    def to_dict(self):
        return {
            't': self.t,
            'mean': self.mean,
            'std': self.std,
            'max_abs': self.max_abs,
            'stderr': self.stderr,
            'argmax_at_T_fraction': self.argmax_at_T_fraction,
            'argmax_exercise_or_T_fraction': self.argmax_exercise_or_T_fraction,
        }


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Residual statistics per checkpoint for one hedge field"""

    checkpoints: List[CheckpointStats]
    config: Dict
    residuals: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {'checkpoints': [c.to_dict() for c in self.checkpoints], 'config': dict(self.config)}

    def stds(self):
        return [c.std for c in self.checkpoints]


@dataclass(frozen=True, eq=False)
class ProbeReport:
    reference: BalanceReport
    probes: List[Dict]

    def to_dict(self):
        return {
            'reference': self.reference.to_dict(),
            'probes': [
                {
                    'field': p['report'].config['field'],
                    'ratios': [{'t': c.t, 'ratio': r} for c, r in zip(p['report'].checkpoints, p['ratios'])],
                    'report': p['report'].to_dict(),
                }
                for p in self.probes
            ],
        }


def discrete_integral(view, hedge_field, model):
    """
    Left-point Ito sum of e^{-r(theta_j - t)} z^T sigma dW_j from the view's first node

    Args:
        view (PathView): Paths from node t onward, with their increments
        hedge_field (HedgeField): phi; z_i = S_i phi_i
        model (MarketModel): Supplies r and sigma(theta, S)

    Returns:
        array: I, shape (paths, nodes); I[:, 0] = 0
    """
    if view.increments is None:
        raise PreconditionError("Path view carries no Brownian increments")
    n_paths, nodes, n = view.states.shape
    t0 = float(view.times[0])
    integral = np.zeros((n_paths, nodes))
    for j in range(nodes - 1):
        theta = float(view.times[j])
        S = view.states[:, j, :]
        z = S * hedge_field(theta, S)
        sigma = model.price_volatility(theta, S)
        step = np.einsum('pi,pik,pk->p', z, sigma, view.increments[:, j, :])
        integral[:, j + 1] = integral[:, j] + math.exp(-model.r * (theta - t0)) * step
    return integral


def _block_residuals(bundle, surface, hedge_field, checkpoints, first, last):
    """Residuals, argmax nodes and exercise flags of the argmax for one block of paths"""
    model = surface.model
    grid = bundle.grid
    times = grid.times
    states = bundle.states[first:last]
    view = PathView(start=0, times=times, states=states, increments=bundle.increments[first:last])

    discount = np.exp(-model.r * (times - times[0]))
    # G_k: integral from the grid start, discounted to it
    G = discrete_integral(view, hedge_field, model)
    psi = payoff_values(surface.payoff, states.reshape(-1, model.n)).reshape(states.shape[:2])
    D = discount[None, :] * psi - G

    count = last - first
    steps = grid.steps
    best = np.full(count, -np.inf)
    best_at = np.full(count, steps, dtype=int)
    suffix_best = {}
    wanted = set(checkpoints)
    for k in range(steps, -1, -1):
        better = D[:, k] >= best
        best = np.where(better, D[:, k], best)
        best_at = np.where(better, k, best_at)
        if k in wanted:
            suffix_best[k] = (best.copy(), best_at.copy())

    residuals = np.empty((count, len(checkpoints)))
    argmax = np.empty((count, len(checkpoints)), dtype=int)
    for c, k in enumerate(checkpoints):
        value, at = suffix_best[k]
        v = eval_v(surface, times[k], states[:, k, :])
        residuals[:, c] = (value + G[:, k]) / discount[k] - v
        argmax[:, c] = at

    exercised = np.zeros_like(argmax, dtype=bool)
    rows = np.arange(count)
    for c in range(len(checkpoints)):
        at = argmax[:, c]
        exercised[:, c] = (at == steps) | near_exercise(surface, times[at], states[rows, at, :])
    return residuals, argmax, exercised


def balance_residuals(bundle, surface, hedge_field, checkpoints, allow_terminal=False, workers=None, block_size=256):
    """
    Pathwise balance residuals R_t = max_u [e^{-r(u-t)} psi(S_u) - I(u)] - v(t, S_t)

    Args:
        bundle (PathBundle): Simulated paths with increments
        surface (ValueSurface): Solved value surface
        hedge_field (HedgeField): Integrand field
        checkpoints (list): Grid node indices of the evaluation times
        allow_terminal (bool): Permit checkpoints in the last two layers
        workers (int, optional): Thread count; the report does not depend on it
        block_size (int): Paths per work item

    Returns:
        BalanceReport: Statistics over all paths per checkpoint
    """
    steps = bundle.grid.steps
    limit = steps if allow_terminal else steps - 2
    checkpoints = [int(k) for k in checkpoints]
    if not checkpoints:
        raise PreconditionError("At least one checkpoint is required")
    for k in checkpoints:
        if not 0 <= k <= limit:
            raise PreconditionError(f"Checkpoint {k} outside [0, {limit}] on a {steps}-step grid")
    if bundle.n_assets != surface.grid.n:
        raise PreconditionError(f"Paths have {bundle.n_assets} assets, surface has {surface.grid.n}")

    n_paths = bundle.n_paths
    blocks = [(start, min(start + block_size, n_paths)) for start in range(0, n_paths, block_size)]
    workers = workers or Utils.default_worker_count()

    def run(block):
        return _block_residuals(bundle, surface, hedge_field, checkpoints, block[0], block[1])

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(block) for block in blocks]

    residuals = np.concatenate([p[0] for p in parts], axis=0)
    argmax = np.concatenate([p[1] for p in parts], axis=0)
    exercised = np.concatenate([p[2] for p in parts], axis=0)
    residuals.setflags(write=False)

    times = bundle.grid.times
    stats = []
    for c, k in enumerate(checkpoints):
        column = residuals[:, c]
        std = float(np.std(column, ddof=1)) if n_paths > 1 else 0.0
        stats.append(CheckpointStats(
            index=k,
            t=float(times[k]),
            mean=float(np.mean(column)),
            std=std,
            max_abs=float(np.max(np.abs(column))),
            stderr=std / math.sqrt(n_paths),
            argmax_at_T_fraction=float(np.mean(argmax[:, c] == steps)),
            argmax_exercise_or_T_fraction=float(np.mean(exercised[:, c])),
        ))

    config = {
        'dt': bundle.grid.dt,
        'h': list(surface.grid.spacing),
        'n_paths': n_paths,
        'seed': bundle.seed,
        'field': hedge_field.label,
    }
    logging.info(f"Balance residuals for field '{hedge_field.label}' at {len(checkpoints)} checkpoints "
                 f"over {n_paths} paths")
    return BalanceReport(checkpoints=stats, config=config, residuals=residuals)


def _grid_samples(surface, layers=3):
    g = surface.grid
    steps = g.time_grid.steps
    picks = sorted({int(round(i * (steps - 1) / max(1, layers - 1))) for i in range(layers)}) if steps > 1 else [0]
    S = g.price_mesh
    return [(float(g.time_grid.times[k]), S) for k in picks]


def dispersion_ratio(std_probe, std_reference):
    if std_reference == 0.0:
        return 1.0 if std_probe == 0.0 else math.inf
    return std_probe / std_reference


def uniqueness_probe(bundle, surface, perturbations, checkpoints, allow_degenerate=False, workers=None,
                     allow_terminal=False):
    """
    Paired balance runs for grad v and each perturbed field on the same paths

    Raises:
        ProbeSpecificationError: if a perturbation equals grad v at every grid node
    """
    reference_field = HedgeField.from_surface(surface)
    fields = [HedgeField.parse(p, reference_field) if isinstance(p, str) else p for p in perturbations]

    for hedge_field in fields:
        same = all(
            np.array_equal(hedge_field.fn(t, S), reference_field.fn(t, S)) for t, S in _grid_samples(surface))
        if same and not allow_degenerate:
            raise ProbeSpecificationError(
                f"Perturbation '{hedge_field.descriptor}' equals the surface gradient on the grid")

    reference = balance_residuals(bundle, surface, reference_field, checkpoints, allow_terminal, workers)
    probes = []
    for hedge_field in fields:
        report = balance_residuals(bundle, surface, hedge_field, checkpoints, allow_terminal, workers)
        ratios = [dispersion_ratio(p.std, r.std) for p, r in zip(report.checkpoints, reference.checkpoints)]
        probes.append({'report': report, 'ratios': ratios})
        logging.info(f"Probe '{hedge_field.label}': dispersion ratios {[f'{r:.4g}' for r in ratios]}")
    return ProbeReport(reference=reference, probes=probes)


def martingale_part(bundle, surface):
    """M^v: the discrete integral of grad v from the grid start, per path"""
    return discrete_integral(subpath_view(bundle, 0), HedgeField.from_surface(surface), surface.model)


def compensator_increase_fraction(bundle, surface, scale=1.0, martingale=None):
    """
    Fraction of one-step increases of e^{-rt} v(t, S_t) - M^v_t above scale * dt^{3/4}

    The step into maturity is left out.

    Returns:
        dict: fraction, tolerance, max_increase and the number of increments inspected
    """
    grid = bundle.grid
    steps = grid.steps
    tolerance = float(scale) * grid.dt ** 0.75 if steps else 0.0
    if steps < 2:
        return {'fraction': 0.0, 'tolerance': tolerance, 'max_increase': 0.0, 'increments': 0}

    M = martingale if martingale is not None else martingale_part(bundle, surface)
    times = grid.times
    compensator = np.empty((bundle.n_paths, steps + 1))
    for k in range(steps + 1):
        v = eval_v(surface, times[k], bundle.states[:, k, :])
        compensator[:, k] = math.exp(-surface.model.r * (times[k] - times[0])) * v - M[:, k]
    increments = np.diff(compensator[:, :steps], axis=1)
    return {
        'fraction': float(np.mean(increments > tolerance)),
        'tolerance': tolerance,
        'max_increase': float(np.max(increments)),
        'increments': int(increments.size),
    }


@dataclass(frozen=True, eq=False)
class LadderLevel:
    level: int
    dt: float
    h: List[float]
    report: BalanceReport
    compensator: Dict
    surface_value: float
    surface: object = field(repr=False, default=None)
    bundle: object = field(repr=False, default=None)


def run_ladder(model, payoff, S0, space_nodes, time_steps, n_paths, seed, checkpoint_fractions, levels=3,
               margin=5.0, settings=None, workers=None, compensator_scale=1.0, progress_callback=None):
    """
    Refinement ladder: each level halves dt and h with paths and seed fixed

    Args:
        space_nodes (int): Nodes per asset at level 0; level l uses (space_nodes - 1) * 2^l + 1
        time_steps (int): Steps at level 0; level l uses time_steps * 2^l

    Returns:
        list: One LadderLevel per level, coarsest first
    """
    if int(levels) < 1:
        raise PreconditionError(f"The ladder needs at least one level, got {levels}")
    out = []
    for level in range(int(levels)):
        nodes = (int(space_nodes) - 1) * 2 ** level + 1
        steps = int(time_steps) * 2 ** level
        grid = SpatialGrid.around(model, S0, nodes, steps, margin)
        surface = solve_obstacle(model, payoff, grid, settings)
        bundle = simulate(model, S0, TimeGrid(0.0, model.T, steps), n_paths, seed, workers)
        checkpoints = bundle.grid.checkpoint_indices(checkpoint_fractions)
        report = balance_residuals(bundle, surface, HedgeField.from_surface(surface), checkpoints, workers=workers)
        compensator = compensator_increase_fraction(bundle, surface, compensator_scale)
        value = eval_v(surface, 0.0, np.asarray(S0, dtype=float).reshape(model.n))
        out.append(LadderLevel(level=level, dt=grid.time_grid.dt, h=list(grid.spacing), report=report,
                               compensator=compensator, surface_value=float(value), surface=surface,
                               bundle=bundle))
        logging.info(f"Ladder level {level}: dt={grid.time_grid.dt:.6g}, stds {[f'{s:.4g}' for s in report.stds()]}")
        if progress_callback and not progress_callback(100.0 * (level + 1) / levels, f"Ladder level {level}"):
            logging.info("Refinement ladder stopped by request")
            break
    return out


MEAN_GATES = ('finest', 'extrapolated')


def extrapolated_means(ladder):
    """
    Per-checkpoint mean and stderr of 2 R_fine - R_coarse over the two finest levels

    Path p of one level is paired with path p of the next; the residual bias is first order in dt,
    so the combination removes its leading term. With a single level the finest statistics are
    returned unchanged.

    Returns:
        list: Dicts with t, mean and stderr, one per checkpoint
    """
    if not ladder:
        return []
    fine = ladder[-1].report
    if len(ladder) < 2:
        return [{'t': c.t, 'mean': c.mean, 'stderr': c.stderr} for c in fine.checkpoints]
    coarse = ladder[-2].report
    if coarse.residuals is None or fine.residuals is None:
        raise PreconditionError("Extrapolated means need the residual arrays of the two finest levels")
    if coarse.residuals.shape != fine.residuals.shape:
        raise PreconditionError(
            f"Cannot pair residuals of shapes {coarse.residuals.shape} and {fine.residuals.shape}")
    combined = 2.0 * fine.residuals - coarse.residuals
    n = combined.shape[0]
    out = []
    for c, stats in enumerate(fine.checkpoints):
        column = combined[:, c]
        std = float(np.std(column, ddof=1)) if n > 1 else 0.0
        out.append({'t': stats.t, 'mean': float(np.mean(column)), 'stderr': std / math.sqrt(n)})
    return out


def _ladder_gate(ladder, mean_stderr_multiple, std_slack, mean_gate='finest'):
    """Yield (checkpoint time, description) for every failed gate"""
    if mean_gate not in MEAN_GATES:
        raise SpecificationError(f"Unknown mean gate '{mean_gate}', expected one of {list(MEAN_GATES)}")
    for coarse, fine in zip(ladder, ladder[1:]):
        for a, b in zip(coarse.report.checkpoints, fine.report.checkpoints):
            if not b.std < a.std * (1.0 + std_slack) and not (a.std == 0.0 and b.std == 0.0):
                yield b.t, (f"std at t={b.t:g} rose from {a.std:.6g} (level {coarse.level}) "
                            f"to {b.std:.6g} (level {fine.level})")
    if not ladder:
        return
    if mean_gate == 'extrapolated':
        means = extrapolated_means(ladder)
        label = "extrapolated mean"
    else:
        means = [{'t': c.t, 'mean': c.mean, 'stderr': c.stderr} for c in ladder[-1].report.checkpoints]
        label = "mean"
    for m in means:
        if abs(m['mean']) > mean_stderr_multiple * m['stderr'] + 1e-12:
            yield m['t'], (f"{label} at t={m['t']:g} is {m['mean']:.6g}, beyond {mean_stderr_multiple:g} "
                           f"standard errors ({m['stderr']:.6g})")


def ladder_breaches(ladder, mean_stderr_multiple=3.0, std_slack=0.0, mean_gate='finest'):
    """
    Gate failures of a ladder: std must drop level over level at every checkpoint (up to the
    relative slack) and the mean must lie within the stderr multiple of zero

    The mean gate reads the finest level ('finest') or the paired first-order extrapolation of
    the two finest levels ('extrapolated').

    Returns:
        list: Human-readable breach descriptions, empty when every gate passes
    """
    return [message for _, message in _ladder_gate(ladder, mean_stderr_multiple, std_slack, mean_gate)]


def breached_times(ladder, mean_stderr_multiple=3.0, std_slack=0.0, mean_gate='finest'):
    """Checkpoint times with at least one failed gate"""
    return {t for t, _ in _ladder_gate(ladder, mean_stderr_multiple, std_slack, mean_gate)}
