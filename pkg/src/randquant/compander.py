"""Nonuniform randomized quantization by dithering in the companded domain.

The source passes through an increasing compressor ``g``, is quantized by a
subtractively dithered uniform quantizer of step ``delta``, and the decoder
applies an expander ``w`` to ``Y = g(X) + N`` with ``N`` uniform on
``(-delta/2, delta/2)``.  In fixed-rate mode the quantizer has levels
``{-T, ..., T} * delta`` and saturates, which is the same as clipping
``g(X)`` to ``[-T delta, T delta]`` before the dither.

Expected squared errors are computed on the discretized source (point masses
at the grid nodes), with the integral over the dither done in closed form
for the piecewise-linear expander.  Rates use the continuous density of
``Y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from randquant.dither import Y_POINTS_PER_STEP, noisy_density_nodes, noisy_entropy
from randquant.errors import InvalidArgument
from randquant.maps import MonotoneMap
from randquant.source import ScalarGrid, SourceModel, lattice


@dataclass(frozen=True)
class FixedRate:
    """Fixed-length coding of ``2 t_max + 1`` levels (``t_max`` a multiple of 1/2)."""

    t_max: float

    def __post_init__(self):
        if self.t_max < 0 or (2 * self.t_max) % 1:
            raise InvalidArgument(f"t_max must be a nonnegative multiple of 1/2, got {self.t_max}")

    @property
    def rate(self) -> float:
        return math.log2(2 * self.t_max + 1)


@dataclass(frozen=True)
class VariableRate:
    """Entropy-coded indices; cost is ``D + lam * R``."""

    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be nonnegative, got {self.lam}")


Mode = FixedRate | VariableRate


def _as_map(g) -> MonotoneMap:
    if isinstance(g, MonotoneMap):
        return g
    if isinstance(g, ScalarGrid):
        return MonotoneMap(g)
    raise InvalidArgument("compressor must be a MonotoneMap")


def companded(g: MonotoneMap, mode, delta: float) -> np.ndarray:
    """Compressor outputs at the grid nodes, saturated in fixed-rate mode."""
    u = g.values
    if isinstance(mode, FixedRate):
        reach = mode.t_max * delta
        u = np.clip(u, -reach, reach)
    return u


def _y_step(delta: float) -> float:
    return delta / Y_POINTS_PER_STEP


def _expander_lattice(u: np.ndarray, mode, delta: float):
    if isinstance(mode, FixedRate):
        reach = mode.t_max * delta
        lo, hi = -reach, reach
    else:
        lo, hi = float(u.min()), float(u.max())
    return lattice(lo - 0.5 * delta, hi + 0.5 * delta, _y_step(delta))


def _box_moments(starts, weights, width, y0, hy, n_cells):
    """Cell moments of a sum of weighted boxes ``[start, start + width)``.

    Returns ``(M0, M1, M2)`` with ``M_m[c] = (1/hy) int_cell rho(y) t**m dy``
    where ``t`` is the local coordinate of cell ``c``.
    """
    events = np.concatenate((starts, starts + width))
    signs = np.concatenate((weights, -weights))
    s = (events - y0) / hy
    c = np.floor(s).astype(np.int64)
    tau = s - c
    base_inc = np.zeros(n_cells)
    base_inc[0] += signs[c < 0].sum()
    inner = (c >= 0) & (c < n_cells)
    ci, si, ti = c[inner], signs[inner], tau[inner]
    carry = ci < n_cells - 1
    np.add.at(base_inc, ci[carry] + 1, si[carry])
    base = np.cumsum(base_inc)
    out = []
    for m in range(3):
        part = np.bincount(ci, weights=si * (1.0 - ti ** (m + 1)), minlength=n_cells)
        out.append((base + part) / (m + 1))
    return out


def optimal_expander(g, source: SourceModel, delta: float, mode,
                     method: str = "projection") -> ScalarGrid:
    """Expander minimizing the mean squared error for compressor ``g``.

    ``method="projection"`` returns the conditional mean ``E[X | Y]``
    projected onto piecewise-linear maps on the y-grid, using the same
    discretized source as the distortion; it is the exact minimizer of
    :func:`distortion` over that class, so alternating it with descent steps
    never raises the cost.  ``method="pointwise"`` samples the conditional
    mean of the continuous source at the grid nodes instead (window
    ``[g^-1(y - delta/2), g^-1(y + delta/2)]``, plus the saturated tail mass
    when ``y`` is within ``delta/2`` of a fixed-rate end level); an empty
    window yields its midpoint.
    """
    g = _as_map(g)
    u = companded(g, mode, delta)
    y0, y1, ny = _expander_lattice(u, mode, delta)
    y = np.linspace(y0, y1, ny)
    if method == "pointwise":
        return ScalarGrid(y0, y1, _pointwise_conditional_mean(g, source, delta, mode, y))
    if method != "projection":
        raise InvalidArgument(f"unknown expander method {method!r}")
    hy = (y1 - y0) / (ny - 1)
    p = source.masses
    starts = u - 0.5 * delta
    m0, m1, m2 = _box_moments(starts, p / delta, delta, y0, hy, ny - 1)
    n0, n1, _ = _box_moments(starts, p * source.x / delta, delta, y0, hy, ny - 1)
    diag = np.zeros(ny)
    diag[:-1] += m0 - 2.0 * m1 + m2
    diag[1:] += m2
    off = m1 - m2
    rhs = np.zeros(ny)
    rhs[:-1] += n0 - n1
    rhs[1:] += n1
    # keeps nodes that no atom reaches at the window midpoint g^-1(y)
    reg = 1e-12 * diag.max()
    rhs += reg * g.inverse(y)
    ab = np.zeros((2, ny))
    ab[0, 1:] = off
    ab[1] = diag + reg
    return ScalarGrid(y0, y1, solveh_banded(ab, rhs, check_finite=False))


def _pointwise_conditional_mean(g, source, delta, mode, y):
    lo = g.inverse(y - 0.5 * delta)
    hi = g.inverse(y + 0.5 * delta)
    mass = source.cdf_at(hi) - source.cdf_at(lo)
    moment = source.partial_mean_at(hi) - source.partial_mean_at(lo)
    if isinstance(mode, FixedRate):
        reach = mode.t_max * delta
        x_lo, x_hi = g.inverse(-reach), g.inverse(reach)
        if g.range[0] >= -reach:
            x_lo = source.support[0]
        if g.range[1] <= reach:
            x_hi = source.support[1]
        a = np.clip(lo, x_lo, x_hi)
        b = np.clip(hi, x_lo, x_hi)
        mass = source.cdf_at(b) - source.cdf_at(a)
        moment = source.partial_mean_at(b) - source.partial_mean_at(a)
        top = np.abs(y - reach) < 0.5 * delta
        bottom = np.abs(y + reach) < 0.5 * delta
        mean_total = source.partial_mean_at(source.support[1])
        mass = mass + top * (1.0 - source.cdf_at(x_hi)) + bottom * source.cdf_at(x_lo)
        moment = (moment + top * (mean_total - source.partial_mean_at(x_hi))
                  + bottom * source.partial_mean_at(x_lo))
        lo, hi = a, b
    tiny = 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(mass > tiny, moment / np.where(mass > tiny, mass, 1.0), 0.5 * (lo + hi))
    return w


class _Antiderivative:
    """Running integrals of a piecewise-linear map and of its square.

    The map is held constant beyond its grid, matching ``np.interp``.
    """

    def __init__(self, w: ScalarGrid):
        self.y0 = w.x_min
        self.hy = w.spacing
        self.n = w.n_points
        v = w.values
        self.a = v[:-1]
        self.b = np.diff(v)
        self.first, self.last = v[0], v[-1]
        cell1 = self.hy * (self.a + 0.5 * self.b)
        cell2 = self.hy * (self.a**2 + self.a * self.b + self.b**2 / 3.0)
        self.c1 = np.concatenate(([0.0], np.cumsum(cell1)))
        self.c2 = np.concatenate(([0.0], np.cumsum(cell2)))
        self.span = (self.n - 1) * self.hy

    def __call__(self, y):
        s = (np.asarray(y, dtype=float) - self.y0) / self.hy
        c = np.clip(np.floor(s).astype(np.int64), 0, self.n - 2)
        t = np.clip(s - c, 0.0, 1.0)
        a, b = self.a[c], self.b[c]
        i1 = self.c1[c] + self.hy * t * (a + 0.5 * b * t)
        i2 = self.c2[c] + self.hy * t * (a * a + a * b * t + b * b * t * t / 3.0)
        below = s < 0
        above = s > self.n - 1
        d_lo = (s * self.hy)[below]
        d_hi = (s * self.hy - self.span)[above]
        i1[below] = self.first * d_lo
        i2[below] = self.first**2 * d_lo
        i1[above] = self.c1[-1] + self.last * d_hi
        i2[above] = self.c2[-1] + self.last**2 * d_hi
        return i1, i2


def atom_errors(u, x, w: ScalarGrid, delta: float) -> np.ndarray:
    """``E_N[(x - w(u + N))^2]`` for each node, in closed form over the dither."""
    prim = _Antiderivative(w)
    hi1, hi2 = prim(u + 0.5 * delta)
    lo1, lo2 = prim(u - 0.5 * delta)
    mean_w = (hi1 - lo1) / delta
    mean_w2 = (hi2 - lo2) / delta
    return x * x - 2.0 * x * mean_w + mean_w2


def _t_max(mode_or_t):
    if isinstance(mode_or_t, FixedRate):
        return mode_or_t.t_max
    if isinstance(mode_or_t, VariableRate) or mode_or_t is None:
        return math.inf
    return float(mode_or_t)


def _split(g, delta, t_max):
    reach = t_max * delta
    inside = np.abs(g.values) <= reach
    return inside, np.clip(g.values, -reach, reach)


def granular_distortion(g, w: ScalarGrid, source: SourceModel, delta: float,
                        t_max=None) -> float:
    """Error contributed by sources with ``|g(x)| <= t_max * delta``."""
    g = _as_map(g)
    inside, u = _split(g, delta, _t_max(t_max))
    err = atom_errors(u[inside], source.x[inside], w, delta)
    return float(np.dot(source.masses[inside], err))


def overload_distortion(g, w: ScalarGrid, source: SourceModel, delta: float,
                        t_max=None) -> float:
    """Error from the saturated tails, reconstructed as ``w(+-T delta + n)``."""
    g = _as_map(g)
    inside, u = _split(g, delta, _t_max(t_max))
    out = ~inside
    if not out.any():
        return 0.0
    err = atom_errors(u[out], source.x[out], w, delta)
    return float(np.dot(source.masses[out], err))


def distortion(g, w: ScalarGrid, source: SourceModel, delta: float, mode) -> float:
    g = _as_map(g)
    u = companded(g, mode, delta)
    return float(np.dot(source.masses, atom_errors(u, source.x, w, delta)))


def output_density(g, source: SourceModel, delta: float) -> ScalarGrid:
    """Density of ``Y = g(X) + N`` from differences of the source CDF."""
    g = _as_map(g)
    lo, hi = g.range
    y0, y1, ny = lattice(lo - 0.5 * delta, hi + 0.5 * delta, _y_step(delta))
    y = np.linspace(y0, y1, ny)
    f = (source.cdf_at(g.inverse(y + 0.5 * delta)) - source.cdf_at(g.inverse(y - 0.5 * delta)))
    return ScalarGrid(y0, y1, f / delta)


def variable_rate(g, source: SourceModel, delta: float) -> float:
    """Bits per sample of the entropy-coded companded quantizer, ``h(Y) - log2 delta``."""
    g = _as_map(g)
    return noisy_entropy(source, g.values, delta) - math.log2(delta)


def rate_of(g, source: SourceModel, delta: float, mode) -> float:
    if isinstance(mode, FixedRate):
        return mode.rate
    return variable_rate(g, source, delta)


def cost(g, w: ScalarGrid, source: SourceModel, delta: float, mode):
    """``(J, D, R)``: ``J = D`` at fixed rate, ``J = D + lam R`` at variable rate."""
    d = distortion(g, w, source, delta, mode)
    r = rate_of(g, source, delta, mode)
    j = d if isinstance(mode, FixedRate) else d + mode.lam * r
    return j, d, r


def total_cost(design, source: SourceModel) -> float:
    """Lagrangian cost of a design (anything with compressor/expander/delta/mode)."""
    return cost(design.compressor, design.expander, source, design.delta, design.mode)[0]


def rate_sample_gradient(g: MonotoneMap, source: SourceModel, delta: float) -> np.ndarray:
    """Derivative of :func:`variable_rate` with respect to each compressor sample."""
    y, nu, f = noisy_density_nodes(source, g.values, delta)
    with np.errstate(divide="ignore"):
        coef = np.where(f > 0, -(np.log2(np.where(f > 0, f, 1.0)) + 1.0 / math.log(2.0)), 0.0)
    coef = nu * coef / delta
    gv = g.values
    xs = g.x
    h = g.grid.spacing
    n = gv.size
    grad = np.zeros(n)
    for sign, shift in ((1.0, 0.5 * delta), (-1.0, -0.5 * delta)):
        v = y + shift
        inside = (v > gv[0]) & (v < gv[-1])
        v, cw = v[inside], sign * coef[inside]
        m = np.clip(np.searchsorted(gv, v, side="right") - 1, 0, n - 2)
        dg = gv[m + 1] - gv[m]
        t = (v - gv[m]) / dg
        dens_x = source.density_at(xs[m] + h * t)
        common = cw * dens_x * h / dg
        grad += np.bincount(m, weights=-common * (1.0 - t), minlength=n)
        grad += np.bincount(m + 1, weights=-common * t, minlength=n)
    return grad


def cost_sample_gradient(g, w: ScalarGrid, source: SourceModel, delta: float, mode,
                         distortion_weight: float = 1.0, correlation_weight: float = 0.0):
    """Partial derivatives of the cost with respect to each compressor sample.

    The expander is held fixed.  ``correlation_weight`` adds the derivative of
    ``-c * E[X w(g(X) + N)]`` (used by the penalized constrained design).
    """
    g = _as_map(g)
    x = source.x
    p = source.masses
    u = companded(g, mode, delta)
    w_hi = w(u + 0.5 * delta)
    w_lo = w(u - 0.5 * delta)
    dd = distortion_weight * ((x - w_hi) ** 2 - (x - w_lo) ** 2)
    if correlation_weight:
        dd = dd - correlation_weight * x * (w_hi - w_lo)
    grad = p * dd / delta
    if isinstance(mode, FixedRate):
        grad = np.where(np.abs(g.values) < mode.t_max * delta, grad, 0.0)
    else:
        grad = grad + mode.lam * rate_sample_gradient(g, source, delta)
    return grad


def compressor_gradient(g, w: ScalarGrid, source: SourceModel, delta: float, mode) -> ScalarGrid:
    """Functional derivative of the cost along compressor perturbations.

    Sampled on the source grid as a density with respect to ``x``, so that
    ``J[g + eps * eta] - J[g] ~ eps * sum(weights * grad * eta)`` with the
    trapezoidal weights of the grid.
    """
    g = _as_map(g)
    grad = cost_sample_gradient(g, w, source, delta, mode)
    return ScalarGrid(g.grid.x_min, g.grid.x_max, grad / g.grid.trapezoid_weights)


def compressor_gradient_fd(g, w: ScalarGrid, source: SourceModel, delta: float, mode,
                           eps: float = 1e-7) -> ScalarGrid:
    """Central finite differences of the cost along a hat bump at each node.

    Slow (two cost evaluations per node); kept as a cross-check of
    :func:`compressor_gradient`.
    """
    g = _as_map(g)
    base = g.values
    out = np.empty(base.size)
    for k in range(base.size):
        up = base.copy()
        up[k] += eps
        dn = base.copy()
        dn[k] -= eps
        j_up = cost(MonotoneMap.from_values(*g.domain, up), w, source, delta, mode)[0]
        j_dn = cost(MonotoneMap.from_values(*g.domain, dn), w, source, delta, mode)[0]
        out[k] = (j_up - j_dn) / (2.0 * eps)
    return ScalarGrid(g.grid.x_min, g.grid.x_max, out / g.grid.trapezoid_weights)


def reconstruct(g, w: ScalarGrid, x, z, delta: float, mode):
    """Decoder output ``w(Q(g(x) + z) - z)`` for source values ``x`` and dither ``z``."""
    from randquant.dither import UniformQuantizerSpec, uniform_quantize

    t_max = mode.t_max if isinstance(mode, FixedRate) else math.inf
    spec = UniformQuantizerSpec(delta, t_max)
    y = np.asarray(g(x), dtype=float) + z
    return w(uniform_quantize(y, spec) - z)
