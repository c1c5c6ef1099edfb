"""Bounded-support scalar sources sampled on a uniform grid.

Every density here is piecewise linear between grid nodes.  Two views of the
same source are used throughout the package:

* the continuous view, whose CDF and partial first moment are evaluated in
  closed form on each segment (used for output densities and sampling);
* the discretized view, a set of point masses ``masses[k] = w_k * pdf[k]`` at
  the grid nodes with trapezoidal weights ``w_k`` (used for every expected
  squared error, so that all moment identities hold to rounding).

Both views share the trapezoidal mass, mean and variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from randquant.errors import InvalidArgument

MASS_TOL = 1e-9
MEAN_TOL = 1e-9


@dataclass(frozen=True)
class ScalarGrid:
    """Samples of a scalar function at ``n_points`` uniformly spaced abscissae.

    Evaluation between nodes is linear; outside ``[x_min, x_max]`` the end
    values are held constant.
    """

    x_min: float
    x_max: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise InvalidArgument("grid values must be one-dimensional")
        if not self.x_min < self.x_max:
            raise InvalidArgument(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if values.size < 3:
            raise InvalidArgument(f"need at least 3 grid points, got {values.size}")

    @property
    def n_points(self) -> int:
        return self.values.size

    @property
    def spacing(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def abscissae(self) -> np.ndarray:
        # built around the midpoint so that symmetric domains give exactly
        # antisymmetric nodes
        mid = 0.5 * (self.x_min + self.x_max)
        return mid + self.spacing * (np.arange(self.n_points) - 0.5 * (self.n_points - 1))

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def integral(self) -> float:
        return float(np.dot(self.trapezoid_weights, self.values))

    def __call__(self, x):
        return np.interp(x, self.abscissae, self.values)


def _symmetric_nodes(half_width: float, n_points: int) -> np.ndarray:
    h = 2.0 * half_width / (n_points - 1)
    return h * (np.arange(n_points) - 0.5 * (n_points - 1))


@dataclass(frozen=True)
class SourceModel:
    """A zero-mean density on a bounded grid plus its CDF and moments.

    Attributes
    ----------
    pdf : ScalarGrid
        Nonnegative density samples with unit trapezoidal mass.
    cdf : ScalarGrid
        Cumulative trapezoid of ``pdf``; equals the exact CDF of the
        piecewise-linear density at every node.
    variance, mean : float
        Moments of the discretized source.
    """

    pdf: ScalarGrid
    cdf: ScalarGrid = field(init=False)
    variance: float = field(init=False)
    mean: float = field(init=False)

    def __post_init__(self):
        f = self.pdf.values
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise InvalidArgument("pdf values must be finite and nonnegative")
        mass = self.pdf.integral()
        if abs(mass - 1.0) > MASS_TOL:
            raise InvalidArgument(f"pdf integrates to {mass!r}, not 1")
        h = self.pdf.spacing
        cum = np.concatenate(([0.0], np.cumsum(0.5 * h * (f[1:] + f[:-1]))))
        cum /= cum[-1]
        object.__setattr__(self, "cdf", ScalarGrid(self.pdf.x_min, self.pdf.x_max, cum))
        x = self.pdf.abscissae
        p = self.masses
        mean = float(np.dot(p, x))
        if abs(mean) > MEAN_TOL:
            raise InvalidArgument(f"source mean {mean:.3g} is not zero")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", float(np.dot(p, x * x)))

    @property
    def x(self) -> np.ndarray:
        return self.pdf.abscissae

    @cached_property
    def masses(self) -> np.ndarray:
        """Point masses of the discretized source (sum to one)."""
        return self.pdf.trapezoid_weights * self.pdf.values

    @property
    def support(self) -> tuple[float, float]:
        return self.pdf.x_min, self.pdf.x_max

    def _segment(self, x):
        x = np.asarray(x, dtype=float)
        h = self.pdf.spacing
        s = (x - self.pdf.x_min) / h
        k = np.clip(np.floor(s).astype(np.int64), 0, self.pdf.n_points - 2)
        t = np.clip(s - k, 0.0, 1.0)
        return k, t, h

    def density_at(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.pdf.x_min) & (x <= self.pdf.x_max)
        return np.where(inside, np.interp(x, self.x, self.pdf.values), 0.0)

    def cdf_at(self, x):
        """Exact CDF of the piecewise-linear density."""
        k, t, h = self._segment(x)
        f = self.pdf.values
        df = f[k + 1] - f[k]
        return self.cdf.values[k] + h * t * (f[k] + 0.5 * df * t)

    def partial_mean_at(self, x):
        """``int_{x_min}^{x} s f(s) ds`` for the piecewise-linear density."""
        k, t, h = self._segment(x)
        f = self.pdf.values
        xs = self.x
        nodes = self._partial_mean_nodes
        df = f[k + 1] - f[k]
        return nodes[k] + h * (xs[k] * f[k] * t + 0.5 * (xs[k] * df + h * f[k]) * t**2
                               + h * df * t**3 / 3.0)

    @cached_property
    def _partial_mean_nodes(self) -> np.ndarray:
        f = self.pdf.values
        xs = self.x
        h = self.pdf.spacing
        df = np.diff(f)
        cell = h * (xs[:-1] * f[:-1] + 0.5 * (xs[:-1] * df + h * f[:-1]) + h * df / 3.0)
        return np.concatenate(([0.0], np.cumsum(cell)))

    def inverse_cdf(self, u):
        """Invert :meth:`cdf_at` exactly (quadratic solve on each segment)."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        c = self.cdf.values
        k = np.clip(np.searchsorted(c, u, side="right") - 1, 0, self.pdf.n_points - 2)
        f = self.pdf.values
        h = self.pdf.spacing
        a = 0.5 * h * (f[k + 1] - f[k])
        b = h * f[k]
        d = u - c[k]
        disc = np.sqrt(np.maximum(b * b + 4.0 * a * d, 0.0))
        denom = b + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(denom > 0, 2.0 * d / denom, 0.0)
        return self.x[k] + h * np.clip(t, 0.0, 1.0)


def make_truncated_gaussian(variance: float = 1.0, half_width: float = 3.0,
                            n_points: int = 2001) -> SourceModel:
    """Zero-mean Gaussian truncated to ``[-half_width, half_width]``.

    The density is renormalized on the grid and the variance is recomputed
    from the truncated density, so it is smaller than ``variance``.
    """
    if variance <= 0 or half_width <= 0:
        raise InvalidArgument("variance and half_width must be positive")
    if n_points < 3:
        raise InvalidArgument("n_points must be at least 3")
    if half_width / math.sqrt(variance) < 2.0:
        raise InvalidArgument("half_width must be at least two standard deviations")
    x = _symmetric_nodes(half_width, n_points)
    f = np.exp(-0.5 * x * x / variance)
    grid = ScalarGrid(-half_width, half_width, f)
    return SourceModel(ScalarGrid(-half_width, half_width, f / grid.integral()))


def make_uniform(half_width: float = 0.5, n_points: int = 2001) -> SourceModel:
    """Uniform density on ``[-half_width, half_width]``."""
    if half_width <= 0:
        raise InvalidArgument("half_width must be positive")
    f = np.full(n_points, 1.0 / (2.0 * half_width))
    return SourceModel(ScalarGrid(-half_width, half_width, f))


def load_density_csv(path, normalize: bool = True) -> SourceModel:
    """Read a two-column ``abscissa,density`` CSV into a :class:`SourceModel`.

    Abscissae must be uniformly spaced.  With ``normalize`` the density is
    rescaled to unit trapezoidal mass before validation.
    """
    rows = []
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if rows:
                    raise InvalidArgument(f"{path}:{lineno}: expected two numbers") from None
                continue  # header
    if len(rows) < 3:
        raise InvalidArgument(f"{path}: need at least 3 rows")
    xs, fs = map(np.array, zip(*rows))
    steps = np.diff(xs)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(steps.mean())):
        raise InvalidArgument(f"{path}: abscissae must be increasing and uniformly spaced")
    grid = ScalarGrid(xs[0], xs[-1], fs)
    if normalize:
        grid = ScalarGrid(xs[0], xs[-1], fs / grid.integral())
    return SourceModel(grid)


def differential_entropy(pdf: ScalarGrid) -> float:
    """Differential entropy in bits, by trapezoidal quadrature of ``-f log2 f``."""
    f = pdf.values
    if np.any(f < 0):
        raise InvalidArgument("density has negative values")
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(f > 0, -f * np.log2(f), 0.0)
    return float(np.dot(pdf.trapezoid_weights, integrand))


def lattice(lo: float, hi: float, step: float) -> tuple[float, float, int]:
    """Smallest grid of integer multiples of ``step`` covering ``[lo, hi]``.

    Returns ``(first, last, n_points)``; at least three points.
    """
    j0 = math.floor(lo / step)
    j1 = math.ceil(hi / step)
    j1 = max(j1, j0 + 2)
    return j0 * step, j1 * step, j1 - j0 + 1


def sample(source: SourceModel, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws by inverse-CDF transform of a seeded generator."""
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    rng = np.random.default_rng(seed)
    return source.inverse_cdf(rng.random(n))


@dataclass(frozen=True)
class BivariateGaussianSpec:
    rho: float
    variance: float = 1.0
    truncation: float = 3.0

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidArgument(f"|rho| must be at most 1, got {self.rho}")
        if self.variance <= 0 or self.truncation <= 0:
            raise InvalidArgument("variance and truncation must be positive")


def sample_bivariate(spec: BivariateGaussianSpec, n: int, seed: int) -> np.ndarray:
    """Correlated Gaussian pairs restricted to the square support by rejection.

    Returns an ``(n, 2)`` array.
    """
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    rng = np.random.default_rng(seed)
    sd = math.sqrt(spec.variance)
    c = math.sqrt(max(0.0, 1.0 - spec.rho**2))
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        batch = max(1024, int(1.1 * (n - filled)))
        z = rng.standard_normal((batch, 2))
        x1 = sd * z[:, 0]
        x2 = sd * (spec.rho * z[:, 0] + c * z[:, 1])
        keep = (np.abs(x1) <= spec.truncation) & (np.abs(x2) <= spec.truncation)
        pairs = np.column_stack((x1[keep], x2[keep]))[: n - filled]
        out[filled:filled + len(pairs)] = pairs
        filled += len(pairs)
    return out
