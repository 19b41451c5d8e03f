"""Closed-form one-dimensional references.

For a Wiener process started at distance ``r > 0`` from a half-line, the
reflection principle gives ``P(max_{s<=t} w_s >= r) = erfc(r / sqrt(2 t))``.
Integrating over ``r`` yields ``E max_{s<=t} w_s = sqrt(2 t / pi)``, so the
expected range is twice that and the expected 1D sausage of an interval of
length ``L`` is ``L + 2 sqrt(2 T / pi)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.special import erfc


def hitting_probability_interval(x, t: float, lo: float, hi: float):
    """``P(tau^x <= t)`` for the interval ``[lo, hi]`` (1 inside)."""
    x = np.asarray(x, dtype=float)
    if t <= 0:
        return ((x >= lo) & (x <= hi)).astype(float)
    dist = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    return erfc(dist / math.sqrt(2 * t))


def expected_running_max(t: float) -> float:
    return math.sqrt(2 * t / math.pi)


def expected_running_max_quadrature(t: float) -> float:
    """``int_0^inf P(max_{s<=t} w_s >= r) dr`` by adaptive quadrature."""
    if t == 0:
        return 0.0
    val, _ = integrate.quad(lambda r: erfc(r / math.sqrt(2 * t)), 0.0, np.inf)
    return val


def expected_sausage_interval(length: float, t: float) -> float:
    """``E|U_{s<=t}(w_s + I)|`` for an interval ``I`` of the given length."""
    return length + 2 * expected_running_max(t)
