import os
import math
import logging
from fractions import Fraction
from pathlib import Path

import psutil


class Utils:
    """Utility functions shared across the engine"""

    @staticmethod
    def is_ci_environment():
        """True when running under a continuous-integration runner"""
        return any(os.environ.get(key) for key in ('CI', 'GITHUB_ACTIONS', 'GITLAB_CI', 'BUILDKITE'))

    @staticmethod
    def default_worker_count():
        """Physical core count, falling back to 1 when psutil cannot tell"""
        try:
            count = psutil.cpu_count(logical=False)
        except Exception as e:
            logging.debug(f"Could not query CPU count: {e}")
            count = None
        return max(1, int(count or 1))

    @staticmethod
    def format_fraction(value):
        """
        Format an exact rational as "num/den"

        Args:
            value (Fraction or int): Value to format

        Returns:
            str: "num/den" with a positive denominator, e.g. "-3/4" or "2/1"
        """
        frac = Fraction(value)
        return f"{frac.numerator}/{frac.denominator}"

    @staticmethod
    def parse_fraction(text):
        """Parse "num/den", an integer string or a decimal string into a Fraction"""
        if isinstance(text, Fraction):
            return text
        if isinstance(text, int):
            return Fraction(text)
        s = str(text).strip()
        if not s:
            raise ValueError("Empty rational value")
        return Fraction(s)

    @staticmethod
    def nearest_index(fraction_of_horizon, steps):
        """Map a fraction of the horizon onto the nearest grid node index"""
        if steps <= 0:
            return 0
        return int(min(steps, max(0, math.floor(fraction_of_horizon * steps + 0.5))))

    @staticmethod
    def ensure_directory(path):
        """Create the directory if needed and return it as a Path"""
        directory = Path(path)
        directory.mkdir(parents=True, exist_ok=True)
        return directory
