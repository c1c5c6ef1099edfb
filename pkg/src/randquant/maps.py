"""Sampled increasing maps used as compressors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression

from randquant.errors import DegenerateMappingError, InvalidArgument
from randquant.source import ScalarGrid


@dataclass(frozen=True)
class MonotoneMap:
    """Strictly increasing piecewise-linear map on ``[x_min, x_max]``.

    Forward evaluation interpolates linearly (holding end values outside the
    domain); :meth:`inverse` is exact on every segment and clamps to the
    domain outside the range.
    """

    grid: ScalarGrid

    def __post_init__(self):
        if not np.all(np.diff(self.grid.values) > 0):
            raise InvalidArgument("map samples are not strictly increasing")

    @classmethod
    def from_values(cls, x_min: float, x_max: float, values) -> "MonotoneMap":
        return cls(ScalarGrid(x_min, x_max, values))

    @classmethod
    def identity(cls, x_min: float, x_max: float, n_points: int, scale: float = 1.0):
        nodes = ScalarGrid(x_min, x_max, np.zeros(n_points)).abscissae
        return cls.from_values(x_min, x_max, scale * nodes)

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def x(self) -> np.ndarray:
        return self.grid.abscissae

    @property
    def domain(self) -> tuple[float, float]:
        return self.grid.x_min, self.grid.x_max

    @property
    def range(self) -> tuple[float, float]:
        return float(self.values[0]), float(self.values[-1])

    def __call__(self, x):
        return self.grid(x)

    def inverse(self, y):
        return np.interp(y, self.values, self.x)

    def replace(self, values) -> "MonotoneMap":
        return MonotoneMap(ScalarGrid(self.grid.x_min, self.grid.x_max, values))


def monotone_floor(values: np.ndarray, scale: float = 0.0) -> float:
    """Minimum increment kept between consecutive compressor samples.

    ``1e-6`` of the mean increment, where the range is taken as at least
    ``scale`` so that a nearly constant map still keeps resolvable steps.
    """
    return 1e-6 * max(float(np.ptp(values)), scale) / values.size


def project_increasing(values, floor: float) -> np.ndarray:
    """Euclidean projection onto sequences with increments of at least ``floor``.

    Subtracting the ramp ``floor * k`` turns the constraint into plain
    monotonicity, which pool-adjacent-violators solves exactly.
    """
    values = np.asarray(values, dtype=float)
    ramp = floor * np.arange(values.size)
    out = isotonic_regression(values - ramp).x + ramp
    if not np.all(np.diff(out) > 0):
        raise DegenerateMappingError("projection left a non-increasing compressor")
    return out
