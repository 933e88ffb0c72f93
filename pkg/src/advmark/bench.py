"""Standard global-optimization test functions for exercising the optimizer."""

from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np

__all__ = ["sphere", "rastrigin", "ackley", "FUNCTIONS", "get_function", "default_bounds"]


def sphere(x: np.ndarray) -> float:
    return float(np.sum(np.square(x)))


def rastrigin(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(10.0 * x.size + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))


def ackley(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    return float(
        -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x * x) / n))
        - np.exp(np.sum(np.cos(2.0 * np.pi * x)) / n)
        + 20.0
        + math.e
    )


FUNCTIONS: Dict[str, Callable[[np.ndarray], float]] = {
    "sphere": sphere,
    "rastrigin": rastrigin,
    "ackley": ackley,
}

_BOUNDS = {"sphere": (-5.0, 5.0), "rastrigin": (-5.12, 5.12), "ackley": (-5.0, 5.0)}


def get_function(name: str) -> Callable[[np.ndarray], float]:
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown test function {name!r}; have {sorted(FUNCTIONS)}") from None


def default_bounds(name: str) -> tuple:
    get_function(name)
    return _BOUNDS[name]
