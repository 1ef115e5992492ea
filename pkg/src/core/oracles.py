import math

import numpy as np
from scipy.stats import norm

from .errors import PreconditionError


def black_scholes_price(S, K, r, d, sigma, T, option_type="put"):
    """
    Closed-form European price with continuous dividend yield d

    Args:
        S (float): Spot price
        K (float): Strike
        r (float): Risk-free rate
        d (float): Dividend yield
        sigma (float): Volatility
        T (float): Time to maturity
        option_type (str): "call" or "put"

    Returns:
        float: Option value
    """
    if T <= 0 or sigma <= 0:
        intrinsic = S - K if option_type == "call" else K - S
        return max(intrinsic, 0.0)
    sqrt_t = math.sqrt(T)
    d1 = (math.log(S / K) + (r - d + 0.5 * sigma ** 2) * T) / (sigma * sqrt_t)
    d2 = d1 - sigma * sqrt_t
    if option_type == "call":
        return S * math.exp(-d * T) * norm.cdf(d1) - K * math.exp(-r * T) * norm.cdf(d2)
    if option_type == "put":
        return K * math.exp(-r * T) * norm.cdf(-d2) - S * math.exp(-d * T) * norm.cdf(-d1)
    raise ValueError("option_type must be 'call' or 'put'")


def crr_price(S, K, r, d, sigma, T, steps=10000, option_type="put", american=True):
    """
    Cox-Ross-Rubinstein binomial price with carry r - d

    Returns:
        float: Root value of the backward induction
    """
    if steps < 1:
        raise PreconditionError(f"Binomial tree needs at least one step, got {steps}")
    dt = T / steps
    u = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / u
    p = (math.exp((r - d) * dt) - down) / (u - down)
    if not 0.0 < p < 1.0:
        raise PreconditionError(f"Risk-neutral probability {p} outside (0, 1); refine the tree")
    discount = math.exp(-r * dt)

    def intrinsic(prices):
        if option_type == "call":
            return np.maximum(prices - K, 0.0)
        if option_type == "put":
            return np.maximum(K - prices, 0.0)
        raise ValueError("option_type must be 'call' or 'put'")

    j = np.arange(steps + 1)
    values = intrinsic(S * u ** (2 * j - steps))
    for i in range(steps - 1, -1, -1):
        values = discount * (p * values[1:i + 2] + (1.0 - p) * values[0:i + 1])
        if american:
            j = np.arange(i + 1)
            values = np.maximum(values, intrinsic(S * u ** (2 * j - i)))
    return float(values[0])
