import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import CoefficientError, ConfigError, ModelValidationError, PreconditionError


COEFFICIENT_KINDS = ('constant', 'affine', 'sine', 'sqrt_time', 'table', 'callable')


@dataclass(frozen=True)
class Coefficient:
    """One scalar coefficient map g(t, x) in log coordinates"""

    kind: str
    params: Tuple = ()
    fn: Optional[Callable] = field(default=None, compare=False)

    @classmethod
    def constant(cls, value):
        return cls('constant', (('value', float(value)),))

    @classmethod
    def from_callable(cls, fn):
        """Wrap a vectorised callable fn(t, x) -> array of shape x.shape[:-1]"""
        return cls('callable', (), fn)

    @classmethod
    def from_config(cls, spec):
        """
        Build a coefficient from its config entry

        Args:
            spec: A bare number (constant) or an object with a `kind` key

        Returns:
            Coefficient: The immutable coefficient map
        """
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls.constant(spec)
        if not isinstance(spec, dict) or 'kind' not in spec:
            raise ConfigError(f"Coefficient spec must be a number or an object with 'kind': {spec!r}")

        kind = str(spec['kind']).strip().lower()
        if kind == 'constant':
            return cls.constant(spec.get('value', 0.0))
        if kind == 'affine':
            slope = tuple(float(s) for s in spec.get('slope', []))
            params = (
                ('value', float(spec.get('value', 0.0))),
                ('slope', slope),
                ('time_slope', float(spec.get('time_slope', 0.0))),
                ('lower', None if spec.get('lower') is None else float(spec['lower'])),
                ('upper', None if spec.get('upper') is None else float(spec['upper'])),
            )
            return cls('affine', params)
        if kind == 'sine':
            params = (
                ('base', float(spec.get('base', 0.0))),
                ('amplitude', float(spec.get('amplitude', 0.0))),
                ('axis', int(spec.get('axis', 0))),
                ('frequency', float(spec.get('frequency', 1.0))),
            )
            return cls('sine', params)
        if kind == 'sqrt_time':
            params = (
                ('base', float(spec.get('base', 0.0))),
                ('amplitude', float(spec.get('amplitude', 0.0))),
            )
            return cls('sqrt_time', params)
        if kind == 'table':
            knots = tuple(float(k) for k in spec.get('knots', []))
            values = tuple(float(v) for v in spec.get('values', []))
            if len(knots) < 1 or len(knots) != len(values):
                raise ConfigError("Table coefficient needs matching, nonempty 'knots' and 'values'")
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ConfigError("Table coefficient knots must be strictly increasing")
            axis = spec.get('axis', 0)
            axis = 't' if str(axis).lower() == 't' else int(axis)
            return cls('table', (('axis', axis), ('knots', knots), ('values', values)))

        raise ConfigError(f"Unknown coefficient kind '{kind}', expected one of {COEFFICIENT_KINDS[:-1]}")

    @property
    def options(self) -> Dict:
        return dict(self.params)

    @property
    def is_constant(self):
        return self.kind == 'constant'

    def evaluate(self, t, x):
        """Evaluate on x of shape (..., n) at time(s) t broadcastable to x.shape[:-1]"""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        t = np.broadcast_to(np.asarray(t, dtype=float), shape)
        opts = self.options

        if self.kind == 'constant':
            return np.full(shape, opts['value'])
        if self.kind == 'affine':
            out = np.full(shape, opts['value']) + opts['time_slope'] * t
            slope = opts['slope']
            for k, s in enumerate(slope):
                out = out + s * x[..., k]
            if opts['lower'] is not None or opts['upper'] is not None:
                out = np.clip(out, opts['lower'], opts['upper'])
            return out
        if self.kind == 'sine':
            return opts['base'] + opts['amplitude'] * np.sin(opts['frequency'] * x[..., opts['axis']])
        if self.kind == 'sqrt_time':
            return opts['base'] + opts['amplitude'] * np.sqrt(np.maximum(t, 0.0))
        if self.kind == 'table':
            coord = t if opts['axis'] == 't' else x[..., opts['axis']]
            # np.interp continues the end values beyond the knots
            return np.interp(coord, opts['knots'], opts['values'])
        if self.kind == 'callable':
            return np.broadcast_to(np.asarray(self.fn(t, x), dtype=float), shape)
        raise ConfigError(f"Unknown coefficient kind '{self.kind}'")

    def to_config(self):
        if self.kind == 'constant':
            return self.options['value']
        if self.kind == 'callable':
            raise ConfigError("Callable coefficients cannot be serialized")
        spec = {'kind': self.kind}
        for key, value in self.params:
            spec[key] = list(value) if isinstance(value, tuple) else value
        return spec


@dataclass(frozen=True)
class MarketModel:
    """Risk-neutral dividend-paying diffusion in log coordinates"""

    n: int
    r: float
    T: float
    dividends: Tuple[Coefficient, ...]
    volatility: Tuple[Tuple[Coefficient, ...], ...]
    ellipticity_bound: float = 0.0

    def __post_init__(self):
        if int(self.n) < 1:
            raise ConfigError(f"Asset count n must be positive, got {self.n}")
        if self.r < 0:
            raise ConfigError(f"Risk-free rate must be nonnegative, got {self.r}")
        if not self.T > 0:
            raise ConfigError(f"Horizon T must be positive, got {self.T}")
        if len(self.dividends) != self.n:
            raise ConfigError(f"Expected {self.n} dividend coefficients, got {len(self.dividends)}")
        if len(self.volatility) != self.n or any(len(row) != self.n for row in self.volatility):
            raise ConfigError(f"Volatility must be a {self.n}x{self.n} matrix of coefficients")

    @classmethod
    def constant(cls, r, T, dividends, volatility, ellipticity_bound=0.0):
        """Model with constant coefficients; volatility is an n x n nested list"""
        vol = np.atleast_2d(np.asarray(volatility, dtype=float))
        div = np.atleast_1d(np.asarray(dividends, dtype=float))
        return cls(
            n=vol.shape[0],
            r=float(r),
            T=float(T),
            dividends=tuple(Coefficient.constant(d) for d in div),
            volatility=tuple(tuple(Coefficient.constant(s) for s in row) for row in vol),
            ellipticity_bound=float(ellipticity_bound),
        )

    @classmethod
    def from_config(cls, config):
        """Build the model from the [model], [dividends] and [volatility] sections"""
        section = config['model']
        try:
            n = int(section['n'])
            r = float(section['r'])
            T = float(section['T'])
            lam = float(section.get('lambda', 0.0))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Section [model] is incomplete or invalid: {e}") from e

        div_specs = config.get('dividends', [0.0] * n)
        if not isinstance(div_specs, list):
            div_specs = [div_specs] * n
        vol_specs = config.get('volatility')
        if vol_specs is None:
            raise ConfigError("Missing required section [volatility]")
        if not isinstance(vol_specs, list):
            if n != 1:
                raise ConfigError("A scalar [volatility] entry is only allowed for n = 1")
            vol_specs = [[vol_specs]]

        return cls(
            n=n,
            r=r,
            T=T,
            dividends=tuple(Coefficient.from_config(s) for s in div_specs),
            volatility=tuple(tuple(Coefficient.from_config(s) for s in row) for row in vol_specs),
            ellipticity_bound=lam,
        )

    @property
    def is_constant(self):
        return all(c.is_constant for c in self.dividends) and all(
            c.is_constant for row in self.volatility for c in row)

    def all_coefficients(self):
        """Every scalar coefficient map, dividends first then volatility row by row"""
        return list(self.dividends) + [c for row in self.volatility for c in row]

    def dividend_fn(self, t, x):
        """d-hat(t, x) stacked over assets: shape (..., n)"""
        x = np.asarray(x, dtype=float)
        out = np.stack([c.evaluate(t, x) for c in self.dividends], axis=-1)
        self._check_finite(out, t, x, "dividend")
        return out

    def vol_fn(self, t, x):
        """sigma-hat(t, x): shape (..., n, n)"""
        x = np.asarray(x, dtype=float)
        rows = [np.stack([c.evaluate(t, x) for c in row], axis=-1) for row in self.volatility]
        out = np.stack(rows, axis=-2)
        self._check_finite(out, t, x, "volatility")
        return out

    def diffusion_fn(self, t, x):
        """a-hat = sigma-hat sigma-hat^T: shape (..., n, n)"""
        sigma = self.vol_fn(t, x)
        return np.einsum('...ik,...jk->...ij', sigma, sigma)

    def log_drift(self, t, x):
        """Ito log-drift r - d-hat - a-hat_ii / 2: shape (..., n)"""
        sigma = self.vol_fn(t, x)
        return self.r - self.dividend_fn(t, x) - 0.5 * np.sum(sigma * sigma, axis=-1)

    def price_dividends(self, t, S):
        return self.dividend_fn(t, np.log(np.asarray(S, dtype=float)))

    def price_volatility(self, t, S):
        return self.vol_fn(t, np.log(np.asarray(S, dtype=float)))

    def constant_coefficients(self):
        """(dividends vector, volatility matrix) for a constant-coefficient model"""
        x = np.zeros(self.n)
        return self.dividend_fn(0.0, x), self.vol_fn(0.0, x)

    def to_config(self):
        return {
            'model': {'n': self.n, 'r': self.r, 'T': self.T, 'lambda': self.ellipticity_bound},
            'dividends': [c.to_config() for c in self.dividends],
            'volatility': [[c.to_config() for c in row] for row in self.volatility],
        }

    @staticmethod
    def _check_finite(values, t, x, what):
        if np.all(np.isfinite(values)):
            return
        bad = np.argwhere(~np.isfinite(values))[0]
        idx = tuple(bad[:np.ndim(x) - 1])
        x_bad = np.asarray(x)[idx] if idx else np.asarray(x)
        t_arr = np.asarray(t, dtype=float)
        t_bad = float(t_arr[idx]) if t_arr.ndim and idx else float(t_arr.ravel()[0])
        raise CoefficientError(
            f"Non-finite {what} coefficient at t={t_bad}, x={np.atleast_1d(x_bad).tolist()}",
            t=t_bad, x=np.atleast_1d(x_bad).tolist())


def log_coefficients(model, t, x):
    """
    Log-space drift and volatility of the asset SDE at one point

    Args:
        model (MarketModel): The market model
        t (float): Time in [0, T]
        x (array): Log-prices, shape (n,)

    Returns:
        tuple: (drift vector of length n, n x n volatility matrix)
    """
    if not 0.0 <= t <= model.T:
        raise PreconditionError(f"Time {t} outside [0, {model.T}]")
    x = np.asarray(x, dtype=float).reshape(model.n)
    return model.log_drift(t, x), model.vol_fn(t, x)


def check_ellipticity(model, sample_points):
    """Minimum over samples of the smallest eigenvalue of a-hat(t, x)"""
    if not sample_points:
        raise PreconditionError("Ellipticity check needs at least one sample point")

    t = np.array([float(p[0]) for p in sample_points])
    x = np.array([np.asarray(p[1], dtype=float).reshape(model.n) for p in sample_points])
    try:
        a = model.diffusion_fn(t, x)
    except CoefficientError as e:
        raise ModelValidationError(f"Diffusion matrix is not finite: {e}") from e

    if not np.allclose(a, np.swapaxes(a, -1, -2), rtol=0.0, atol=1e-12):
        raise ModelValidationError("Diffusion matrix a-hat is not symmetric")

    smallest = np.linalg.eigvalsh(a)[:, 0]
    worst = int(np.argmin(smallest))
    logging.debug(f"Smallest eigenvalue {smallest[worst]:.6g} at t={t[worst]}, x={x[worst].tolist()}")
    return float(smallest[worst])


def check_hoelder(model, sample_pairs, diagnostics=None):
    """
    Empirical lower bound for the Hoelder constant c over all coefficients

    Args:
        model (MarketModel): The market model
        sample_pairs (list): Pairs ((t, x), (u, y))
        diagnostics (dict, optional): Filled with 'skipped' and 'evaluated' counts

    Returns:
        float: max |g(t,x) - g(u,y)| / (|t-u|^(1/2) + |x-y|) over pairs and coefficients
    """
    skipped = 0
    evaluated = 0
    worst = 0.0
    coefficients = model.all_coefficients()

    for (t, x), (u, y) in sample_pairs:
        x = np.asarray(x, dtype=float).reshape(model.n)
        y = np.asarray(y, dtype=float).reshape(model.n)
        denom = math.sqrt(abs(float(t) - float(u))) + float(np.linalg.norm(x - y))
        if denom == 0.0:
            skipped += 1
            continue
        evaluated += 1
        for coef in coefficients:
            diff = abs(float(coef.evaluate(t, x)) - float(coef.evaluate(u, y)))
            if not math.isfinite(diff):
                raise CoefficientError(f"Non-finite coefficient between ({t}, {x.tolist()}) and ({u}, {y.tolist()})")
            worst = max(worst, diff / denom)

    if skipped:
        logging.warning(f"Hoelder check skipped {skipped} coincident sample pairs")
    if diagnostics is not None:
        diagnostics['skipped'] = skipped
        diagnostics['evaluated'] = evaluated
    return worst


def validate_model(model, sample_points):
    """Check dividend signs and the declared ellipticity bound on a sample cloud"""
    t = np.array([float(p[0]) for p in sample_points])
    x = np.array([np.asarray(p[1], dtype=float).reshape(model.n) for p in sample_points])
    dividends = model.dividend_fn(t, x)
    if np.any(dividends < 0):
        bad = int(np.argwhere(dividends < 0)[0][0])
        raise ModelValidationError(f"Negative dividend yield at t={t[bad]}, x={x[bad].tolist()}")

    smallest = check_ellipticity(model, sample_points)
    if smallest < model.ellipticity_bound:
        raise ModelValidationError(
            f"Ellipticity {smallest:.6g} below declared lambda {model.ellipticity_bound:.6g}")
    return {'min_eigenvalue': smallest, 'min_dividend': float(dividends.min()), 'samples': len(sample_points)}
