"""Independent reference computations used only by the test-suite."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, optimize, special


def _prefix(source):
    p = source.masses
    x = source.x
    return (np.concatenate(([0.0], np.cumsum(p))),
            np.concatenate(([0.0], np.cumsum(p * x))),
            np.concatenate(([0.0], np.cumsum(p * x * x))))


def _cell_costs(c0, c1, c2, i, lam):
    """Cost of cells covering atoms [j, i) for every j < i."""
    p = c0[i] - c0[:i]
    l1 = c1[i] - c1[:i]
    s2 = c2[i] - c2[:i]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(p > 0, s2 - l1 * l1 / np.where(p > 0, p, 1.0), 0.0)
        if lam:
            d = d + lam * np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return d


def dp_fixed_rate(source, n_cells):
    """Globally optimal partition of the grid atoms into ``n_cells`` intervals (MSE)."""
    c0, c1, c2 = _prefix(source)
    n = source.x.size
    best = np.full(n + 1, np.inf)
    best[0] = 0.0
    for _ in range(n_cells):
        nxt = np.full(n + 1, np.inf)
        for i in range(1, n + 1):
            nxt[i] = np.min(best[:i] + _cell_costs(c0, c1, c2, i, 0.0))
        best = nxt
    return float(best[n])


def dp_entropy_constrained(source, lam):
    """Globally optimal ``D + lam * H`` over interval partitions of the grid atoms.

    Returns ``(distortion, entropy)`` of the optimal partition.
    """
    c0, c1, c2 = _prefix(source)
    n = source.x.size
    best = np.full(n + 1, np.inf)
    arg = np.zeros(n + 1, dtype=int)
    best[0] = 0.0
    for i in range(1, n + 1):
        tot = best[:i] + _cell_costs(c0, c1, c2, i, lam)
        arg[i] = int(np.argmin(tot))
        best[i] = tot[arg[i]]
    d = h = 0.0
    i = n
    while i > 0:
        j = arg[i]
        p = c0[i] - c0[j]
        l1 = c1[i] - c1[j]
        d += (c2[i] - c2[j]) - (l1 * l1 / p if p > 0 else 0.0)
        h += -p * math.log2(p) if p > 0 else 0.0
        i = j
    return d, h


def truncated_gaussian_variance(half_width):
    phi = math.exp(-0.5 * half_width**2) / math.sqrt(2 * math.pi)
    z = math.erf(half_width / math.sqrt(2))
    return 1.0 - 2.0 * half_width * phi / z


def truncated_gaussian_entropy_bits(half_width):
    phi = math.exp(-0.5 * half_width**2) / math.sqrt(2 * math.pi)
    z = math.erf(half_width / math.sqrt(2))
    nats = math.log(math.sqrt(2 * math.pi * math.e) * z) - half_width * phi / z
    return nats / math.log(2)


def entropy_by_quadrature(pdf, lo, hi):
    """``-int f log2 f`` by adaptive quadrature of a callable density."""
    def integrand(x):
        f = pdf(x)
        return -f * math.log2(f) if f > 0 else 0.0
    val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-12)
    return val


def triangle_entropy_bits():
    """Entropy in bits of the triangular density ``1 - |x|`` on (-1, 1)."""
    # -2 int_0^1 (1-x) log2(1-x) dx = 2 * (1/4) / ln 2
    return 1.0 / (2.0 * math.log(2.0))


def normal_cdf(x):
    return 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))


def truncated_half_mean(half_width):
    """``E[X | X > 0]`` for the unit Gaussian truncated to ``[-a, a]``."""
    phi0 = 1.0 / math.sqrt(2 * math.pi)
    phi = phi0 * math.exp(-0.5 * half_width**2)
    return (phi0 - phi) / (0.5 * math.erf(half_width / math.sqrt(2)))


def constrained_levels(source, boundaries):
    """Levels minimizing MSE on a fixed partition subject to ``E[X (X - Xhat)] = 0``.

    Solved numerically with SLSQP, independent of any closed form.
    Returns ``(levels, distortion)``.
    """
    x, p = source.x, source.masses
    idx = np.searchsorted(boundaries[1:-1], x, side="left")
    m = boundaries.size - 1
    mass = np.bincount(idx, weights=p, minlength=m)
    first = np.bincount(idx, weights=p * x, minlength=m)
    second = np.bincount(idx, weights=p * x * x, minlength=m)
    var = float(np.dot(p, x * x))

    def mse(r):
        return float(np.sum(second - 2 * r * first + r * r * mass))

    res = optimize.minimize(
        mse, first / mass, method="SLSQP",
        jac=lambda r: -2 * first + 2 * r * mass,
        constraints=[{"type": "eq", "fun": lambda r: var - float(np.dot(r, first)),
                      "jac": lambda r: -first}],
        options={"ftol": 1e-15, "maxiter": 500})
    return res.x, mse(res.x)


def smooth_perturbation(values, rng, modes=4):
    """Random low-frequency direction on the compressor samples.

    A few cosines in the normalized abscissa with ``1/m`` amplitude decay;
    white per-node noise would make the directional derivative nearly cancel.
    """
    s = (values - values.min()) / (values.max() - values.min())
    eta = np.zeros_like(values)
    for m in range(1, modes + 1):
        eta += rng.standard_normal() / m * np.cos(np.pi * m * s + rng.uniform(0, 2 * np.pi))
    return eta


def taylor_relative_error(g, w, source, delta, mode, gradient, eta, eps):
    """``|dJ - eps <grad, eta>| / |dJ|`` with the expander held fixed."""
    from randquant.compander import cost

    j0 = cost(g, w, source, delta, mode)[0]
    j1 = cost(g.replace(g.values + eps * eta), w, source, delta, mode)[0]
    predicted = eps * float(np.dot(g.grid.trapezoid_weights * gradient.values, eta))
    return abs((j1 - j0) - predicted) / abs(j1 - j0)
