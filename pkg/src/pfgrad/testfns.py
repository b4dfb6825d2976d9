"""Named test functions for integrating particle and exact measures.

A test function maps a state array to a float array of the same shape.
Instances are plain picklable callables so study workers can receive
them, and the registry is addressed by compact spec strings so runs can
name their integrand on the command line, e.g. ``indicator:0``,
``indicator:-0.5,0.5``, ``identity-clipped:-1,1`` or ``coord:0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

TestFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class IndicatorEq:
    target: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.equal(np.asarray(x), self.target).astype(float)


@dataclass(frozen=True)
class IndicatorInterval:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"empty indicator interval [{self.lo}, {self.hi})")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        return ((arr >= self.lo) & (arr < self.hi)).astype(float)


@dataclass(frozen=True)
class IdentityClipped:
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"empty clip interval [{self.lo}, {self.hi}]")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)


@dataclass(frozen=True)
class Coord:
    """Coordinate projection; scalar states only have coordinate 0."""

    index: int = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        if arr.ndim <= 1:
            if self.index != 0:
                raise ValueError(f"scalar states have only coordinate 0, asked for {self.index}")
            return arr
        return arr[..., self.index]


def indicator(*args: float) -> TestFunction:
    """Equality indicator for one value, half-open interval for two."""
    if len(args) == 1:
        return IndicatorEq(args[0])
    if len(args) == 2:
        return IndicatorInterval(*args)
    raise ValueError("indicator takes one value or an interval")


def identity_clipped(lo: float = -1.0, hi: float = 1.0) -> TestFunction:
    return IdentityClipped(lo, hi)


def coord(index: float = 0) -> TestFunction:
    return Coord(int(index))


REGISTRY: dict[str, Callable[..., TestFunction]] = {
    "indicator": indicator,
    "identity-clipped": identity_clipped,
    "coord": coord,
}


def make_test_function(spec: str) -> TestFunction:
    """Build a test function from a spec string ``name[:arg1,arg2]``."""
    name, _, rest = spec.partition(":")
    if name not in REGISTRY:
        raise ValueError(f"unknown test function {name!r}; choose from {sorted(REGISTRY)}")
    args = [float(a) for a in rest.split(",") if a] if rest else []
    return REGISTRY[name](*args)
