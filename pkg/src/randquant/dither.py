"""Uniform subtractive-dither quantization (the conventional baseline).

A uniform quantizer with step ``delta`` and range parameter ``t_max`` has
reconstruction levels ``{-t_max, ..., t_max} * delta``.  Integer ``t_max``
gives the usual midtread ladder with ``2 t_max + 1`` levels; half-integer
``t_max`` gives a midrise ladder (levels at odd multiples of ``delta / 2``)
so that even level counts, e.g. 4 levels for 2 bits, are available too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from randquant.errors import InvalidArgument
from randquant.source import ScalarGrid, SourceModel, lattice

#: output-density grid points per quantizer step
Y_POINTS_PER_STEP = 400
#: Gauss-Legendre nodes per knot interval in the entropy integral
ENTROPY_NODES = 4
#: nodes on intervals where the output density vanishes at one end
EDGE_NODES = 16


@dataclass(frozen=True)
class UniformQuantizerSpec:
    delta: float
    t_max: float = math.inf

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgument(f"delta must be positive, got {self.delta}")
        if self.t_max < 0 or (math.isfinite(self.t_max) and (2 * self.t_max) % 1):
            raise InvalidArgument(f"t_max must be a nonnegative multiple of 1/2, got {self.t_max}")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.t_max)

    @property
    def offset(self) -> float:
        """Lattice offset in steps: 0 for midtread, 1/2 for midrise."""
        return 0.5 if self.bounded and (2 * self.t_max) % 2 else 0.0

    @property
    def n_levels(self) -> int:
        if not self.bounded:
            raise InvalidArgument("unbounded quantizer has infinitely many levels")
        return int(round(2 * self.t_max)) + 1


def uniform_quantize(x, spec: UniformQuantizerSpec):
    """``i * delta`` for the level whose cell ``(i - 1/2, i + 1/2] * delta`` holds ``x``.

    Finite ``t_max`` saturates the level index to ``[-t_max, t_max]``.
    """
    o = spec.offset
    i = np.ceil(np.asarray(x, dtype=float) / spec.delta - o - 0.5) + o
    if spec.bounded:
        i = np.clip(i, -spec.t_max, spec.t_max)
    out = i * spec.delta
    return float(out) if np.ndim(out) == 0 else out


def fixed_rate_of(spec: UniformQuantizerSpec) -> float:
    """Bits per sample of the fixed-length code, ``log2(2 t_max + 1)``."""
    if not spec.bounded:
        raise InvalidArgument("fixed rate needs a finite t_max")
    return math.log2(2 * spec.t_max + 1)


def draw_dither(n: int, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform dither on ``(-delta/2, delta/2]``."""
    return delta * (0.5 - rng.random(n))


def dithered_reconstruct(x, z, spec: UniformQuantizerSpec):
    """Subtractive dither: ``Q(x + z) - z``."""
    return uniform_quantize(np.asarray(x, dtype=float) + z, spec) - z


def noisy_source_density(source: SourceModel, delta: float) -> ScalarGrid:
    """Density of ``X + N`` with ``N`` uniform on ``(-delta/2, delta/2)``.

    The sliding-window integral of the piecewise-linear pdf is evaluated
    exactly through the CDF, on a grid of integer multiples of
    ``delta / Y_POINTS_PER_STEP`` covering the widened support.
    """
    lo, hi = source.support
    y0, y1, n = lattice(lo - 0.5 * delta, hi + 0.5 * delta, delta / Y_POINTS_PER_STEP)
    y = np.linspace(y0, y1, n)
    f = (source.cdf_at(y + 0.5 * delta) - source.cdf_at(y - 0.5 * delta)) / delta
    return ScalarGrid(y0, y1, f)


def noisy_density_nodes(source: SourceModel, values, delta: float):
    """Quadrature nodes, weights and density values of ``Y = g(X) + N``.

    ``values`` are the samples of an increasing piecewise-linear ``g`` at the
    source nodes.  Between consecutive points of ``{g_k +- delta/2}`` the
    density of ``Y`` is a quadratic, so Gauss-Legendre rules on those
    intervals integrate smooth functionals of it accurately, and moving a
    knot changes the result smoothly.
    """
    values = np.asarray(values, dtype=float)
    x = source.x

    def density(y):
        upper = source.cdf_at(np.interp(y + 0.5 * delta, values, x))
        lower = source.cdf_at(np.interp(y - 0.5 * delta, values, x))
        return (upper - lower) / delta

    knots = np.unique(np.concatenate((values - 0.5 * delta, values + 0.5 * delta)))
    a, b = knots[:-1], knots[1:]
    f_knots = density(knots)
    # where the density vanishes at an end of the interval, y = end + L s**2
    # removes the endpoint singularity of -f log f; those intervals also get
    # a longer rule because the rate gradient has a log singularity there
    zero_left = f_knots[:-1] == 0
    zero_right = (f_knots[1:] == 0) & ~zero_left
    graded = zero_left | zero_right
    plain = ~graded
    t, wt = np.polynomial.legendre.leggauss(ENTROPY_NODES)
    s = 0.5 * (t + 1.0)
    length = (b - a)[plain, None]
    ys = [(a[plain, None] + length * s).ravel()]
    ws = [(length * 0.5 * wt).ravel()]
    t, wt = np.polynomial.legendre.leggauss(EDGE_NODES)
    s = 0.5 * (t + 1.0)
    length = (b - a)[graded, None]
    left = zero_left[graded, None]
    ys.append(np.where(left, a[graded, None] + length * s**2, b[graded, None] - length * s**2).ravel())
    ws.append((length * wt * s).ravel())
    y, weights = np.concatenate(ys), np.concatenate(ws)
    return y, weights, density(y)


def noisy_entropy(source: SourceModel, values, delta: float) -> float:
    """Differential entropy in bits of ``g(X) + N`` (see :func:`noisy_density_nodes`)."""
    _, weights, f = noisy_density_nodes(source, values, delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(f > 0, -f * np.log2(np.where(f > 0, f, 1.0)), 0.0)
    return float(np.dot(weights, integrand))


def conventional_variable_rate(source: SourceModel, delta: float) -> float:
    """Conditional entropy ``H(Q(X+Z) | Z) = h(X+N) - log2(delta)`` in bits."""
    if not delta > 0:
        raise InvalidArgument("delta must be positive")
    return noisy_entropy(source, source.x, delta) - math.log2(delta)


def covers_support(spec: UniformQuantizerSpec, source: SourceModel) -> bool:
    if not spec.bounded:
        return True
    lo, hi = source.support
    reach = spec.t_max * spec.delta
    return -reach <= lo and hi <= reach


def conventional_distortion(spec: UniformQuantizerSpec, source: SourceModel) -> float:
    """Mean squared error of the dithered quantizer.

    Without overload the error is uniform and the result is ``delta**2 / 12``.
    With overload, ``Q(x + z) - z`` equals ``clip(x) - z``, so the error is
    ``clip(x) - x`` plus independent uniform noise; the clipping part is
    integrated over the discretized source.
    """
    granular = spec.delta**2 / 12.0
    if covers_support(spec, source):
        return granular
    reach = spec.t_max * spec.delta
    excess = np.maximum(np.abs(source.x) - reach, 0.0)
    return granular + float(np.dot(source.masses, excess**2))


def best_fixed_rate_step(source: SourceModel, t_max: float) -> UniformQuantizerSpec:
    """Step size minimizing :func:`conventional_distortion` at a given ``t_max``.

    Bounded Brent search between a step that just covers the support and
    one that is ten times finer.
    """
    from scipy.optimize import minimize_scalar

    if t_max <= 0:
        return UniformQuantizerSpec(1.0, 0.0)
    hi = max(abs(v) for v in source.support) / t_max
    res = minimize_scalar(
        lambda d: conventional_distortion(UniformQuantizerSpec(d, t_max), source),
        bounds=(0.1 * hi, hi), method="bounded", options={"xatol": 1e-10},
    )
    return UniformQuantizerSpec(float(res.x), t_max)


def step_for_rate(source: SourceModel, rate: float) -> float:
    """Step size at which :func:`conventional_variable_rate` equals ``rate``."""
    from scipy.optimize import brentq

    lo, hi = 1e-3, 64.0
    return brentq(lambda d: conventional_variable_rate(source, d) - rate, lo, hi, xtol=1e-12)
