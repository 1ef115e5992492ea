import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError, PreconditionError, SpecificationError


PAYOFF_KINDS = ('put_on_min', 'call_on_max', 'spread', 'basket_put', 'basket_call', 'multi_strike', 'zero')


@dataclass(frozen=True)
class PayoffSpec:
    """Convex Lipschitz payoff psi(S) from the built-in family"""

    kind: str
    strike: float = 0.0
    weights: Tuple[float, ...] = ()
    strikes: Tuple[float, ...] = ()
    lipschitz: float = field(default=None)

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise SpecificationError(f"Unknown payoff kind '{self.kind}', expected one of {PAYOFF_KINDS}")
        if self.strike < 0:
            raise SpecificationError(f"Strike must be nonnegative, got {self.strike}")
        if self.kind in ('basket_put', 'basket_call') and not self.weights:
            raise SpecificationError(f"Payoff '{self.kind}' needs basket weights")
        if self.kind == 'multi_strike' and not self.strikes:
            raise SpecificationError("Payoff 'multi_strike' needs one strike per asset")
        if self.lipschitz is None:
            object.__setattr__(self, 'lipschitz', self.natural_lipschitz())
        if self.lipschitz < 0:
            raise SpecificationError(f"Lipschitz constant must be nonnegative, got {self.lipschitz}")

    @classmethod
    def from_config(cls, section):
        """Build the payoff from the [payoff] section"""
        try:
            kind = str(section['kind']).strip().lower()
        except (KeyError, TypeError) as e:
            raise ConfigError("Section [payoff] needs a 'kind'") from e
        lipschitz = section.get('lipschitz')
        try:
            values = dict(
                strike=float(section.get('strike', 0.0)),
                weights=tuple(float(w) for w in section.get('weights', []) or []),
                strikes=tuple(float(k) for k in section.get('strikes', []) or []),
                lipschitz=None if lipschitz is None else float(lipschitz),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Section [payoff] has a non-numeric entry: {e}") from e
        return cls(kind=kind, **values)

    def natural_lipschitz(self):
        """Euclidean Lipschitz constant of the payoff kind"""
        if self.kind in ('basket_put', 'basket_call'):
            return float(np.linalg.norm(self.weights))
        if self.kind == 'spread':
            return math.sqrt(2.0)
        if self.kind == 'zero':
            return 0.0
        return 1.0

    def check_dimension(self, n):
        if self.kind == 'spread' and n != 2:
            raise SpecificationError(f"Spread payoff needs exactly 2 assets, got {n}")
        if self.kind in ('basket_put', 'basket_call') and len(self.weights) != n:
            raise SpecificationError(f"Basket payoff has {len(self.weights)} weights for {n} assets")
        if self.kind == 'multi_strike' and len(self.strikes) != n:
            raise SpecificationError(f"Multi-strike payoff has {len(self.strikes)} strikes for {n} assets")

    def to_config(self):
        return {
            'kind': self.kind,
            'strike': self.strike,
            'weights': list(self.weights),
            'strikes': list(self.strikes),
            'lipschitz': self.lipschitz,
        }


def payoff_eval(payoff, S):
    """
    Evaluate psi at one price vector or a stack of them

    Args:
        payoff (PayoffSpec): The payoff
        S (array): Prices, shape (n,) or (..., n), all strictly positive

    Returns:
        float or array: psi(S) with shape S.shape[:-1]
    """
    S = np.asarray(S, dtype=float)
    if S.ndim == 0:
        S = S.reshape(1)
    if np.any(S <= 0):
        raise PreconditionError("Payoff evaluation needs strictly positive prices")
    values = _payoff_values(payoff, S)
    return float(values) if values.ndim == 0 else values


def payoff_values(payoff, S):
    """payoff_eval without the positivity check, for grid nodes and boundary layers"""
    return _payoff_values(payoff, np.asarray(S, dtype=float))


def _payoff_values(payoff, S):
    payoff.check_dimension(S.shape[-1])
    K = payoff.strike
    kind = payoff.kind

    if kind == 'put_on_min':
        return np.maximum(K - S.min(axis=-1), 0.0)
    if kind == 'call_on_max':
        return np.maximum(S.max(axis=-1) - K, 0.0)
    if kind == 'spread':
        return np.maximum(S[..., 0] - S[..., 1] - K, 0.0)
    if kind == 'basket_put':
        return np.maximum(K - S @ np.asarray(payoff.weights), 0.0)
    if kind == 'basket_call':
        return np.maximum(S @ np.asarray(payoff.weights) - K, 0.0)
    if kind == 'multi_strike':
        return np.maximum((S - np.asarray(payoff.strikes)).max(axis=-1), 0.0)
    return np.zeros(S.shape[:-1])


def payoff_gradient(payoff, S):
    """Almost-everywhere gradient of psi in price units, shape (..., n)"""
    S = np.asarray(S, dtype=float)
    payoff.check_dimension(S.shape[-1])
    n = S.shape[-1]
    grad = np.zeros(S.shape)
    K = payoff.strike
    kind = payoff.kind

    if kind == 'put_on_min':
        active = (K - S.min(axis=-1)) > 0
        onehot = np.eye(n)[S.argmin(axis=-1)]
        grad = -onehot * active[..., None]
    elif kind == 'call_on_max':
        active = (S.max(axis=-1) - K) > 0
        onehot = np.eye(n)[S.argmax(axis=-1)]
        grad = onehot * active[..., None]
    elif kind == 'spread':
        active = (S[..., 0] - S[..., 1] - K) > 0
        grad = np.broadcast_to(np.array([1.0, -1.0]), S.shape) * active[..., None]
    elif kind == 'basket_put':
        w = np.asarray(payoff.weights)
        active = (K - S @ w) > 0
        grad = -np.broadcast_to(w, S.shape) * active[..., None]
    elif kind == 'basket_call':
        w = np.asarray(payoff.weights)
        active = (S @ w - K) > 0
        grad = np.broadcast_to(w, S.shape) * active[..., None]
    elif kind == 'multi_strike':
        excess = S - np.asarray(payoff.strikes)
        active = excess.max(axis=-1) > 0
        grad = np.eye(n)[excess.argmax(axis=-1)] * active[..., None]
    return np.array(grad, dtype=float)
