"""Compressor/expander design by alternating optimization.

Each iteration replaces the expander with its optimum for the current
compressor and then takes one projected steepest-descent step on the
compressor.  Low-rate problems are solved first and their solutions seed the
next stage of the relaxation schedule.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from randquant.compander import (
    FixedRate,
    VariableRate,
    cost,
    cost_sample_gradient,
    optimal_expander,
    rate_sample_gradient,
    variable_rate,
)
from randquant.errors import ConstraintInfeasible, DegenerateMappingError, InvalidArgument
from randquant.maps import MonotoneMap, monotone_floor, project_increasing
from randquant.source import ScalarGrid, SourceModel

log = logging.getLogger(__name__)

MAX_HALVINGS = 20
RATE_PENALTY = 50.0


@dataclass(frozen=True)
class DesignConfig:
    """Solver settings for :func:`design_unconstrained`.

    ``relaxation_schedule`` holds descending lambdas for variable-rate designs
    or ascending ``t_max`` values for fixed-rate designs; the target value of
    the mode is appended when missing.  ``quad_nodes_n`` is the number of
    Gauss-Legendre nodes over the dither used by quadrature cross-checks.
    """

    step_size: float = 1.0
    max_iters: int = 5000
    cost_tol: float = 1e-7
    patience: int = 10
    quad_nodes_n: int = 16
    relaxation_schedule: tuple = ()
    seed: int = 0
    init_noise: float = 0.02
    step_growth: float = 1.5
    precondition: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidArgument("step_size must be positive")
        if self.quad_nodes_n < 8:
            raise InvalidArgument("quad_nodes_n must be at least 8")
        if self.max_iters < 1 or not self.cost_tol > 0:
            raise InvalidArgument("max_iters and cost_tol must be positive")


@dataclass(frozen=True)
class RandomizedDesign:
    compressor: MonotoneMap
    expander: ScalarGrid
    delta: float
    mode: FixedRate | VariableRate
    distortion: float
    rate: float
    lagrangian_cost: float
    converged: bool = True
    iterations: int = 0
    seed: int = 0
    history: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.distortion < 0 or self.rate < -1e-9:
            raise InvalidArgument("distortion and rate must be nonnegative")


def evaluate(g: MonotoneMap, w: ScalarGrid, source: SourceModel, delta: float, mode,
             **extra) -> RandomizedDesign:
    j, d, r = cost(g, w, source, delta, mode)
    return RandomizedDesign(g, w, delta, mode, d, max(r, 0.0), j, **extra)


def _direction(grad, source, precondition):
    # the raw sample gradient scales with the source mass at each node;
    # dividing by it gives every node the same footing in the tails
    if precondition:
        return grad / np.maximum(source.masses, 1e-300)
    return grad / source.pdf.trapezoid_weights


def descend(g: MonotoneMap, w: ScalarGrid, source: SourceModel, delta: float, mode,
            step: float, *, current_cost: float | None = None, precondition: bool = True,
            grad=None, objective=None):
    """One projected steepest-descent step on the compressor.

    Tries ``g - step * direction`` projected onto increasing maps and halves
    the step (at most 20 times) until the cost does not exceed the current
    one.  Returns ``(new_g, new_cost, step_taken)``; ``step_taken`` is 0 when
    no step was accepted and ``new_g`` is then ``g`` itself.
    """
    if objective is None:
        def objective(m):
            return cost(m, w, source, delta, mode)[0]
    if current_cost is None:
        current_cost = objective(g)
    if grad is None:
        grad = cost_sample_gradient(g, w, source, delta, mode)
    if step == 0:
        return g, current_cost, 0.0
    direction = _direction(grad, source, precondition)
    for _ in range(MAX_HALVINGS + 1):
        trial = g.values - step * direction
        candidate = g.replace(project_increasing(trial, monotone_floor(trial, delta)))
        j = objective(candidate)
        if j <= current_cost:
            return candidate, j, step
        step *= 0.5
    return g, current_cost, 0.0


def _smooth3(v):
    out = v.copy()
    out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3.0
    return out


def initial_compressor(source: SourceModel, scale: float, noise: float, seed: int) -> MonotoneMap:
    """Scaled identity with seeded multiplicative slope noise, smoothed once."""
    rng = np.random.default_rng(seed)
    x = source.x
    h = source.pdf.spacing
    slope = scale * np.exp(noise * _smooth3(rng.standard_normal(x.size - 1 if x.size > 1 else 1)))
    values = np.concatenate(([0.0], np.cumsum(slope * h)))
    values = _smooth3(values)
    values -= np.interp(0.0, x, values)
    values = project_increasing(values, monotone_floor(values))
    return MonotoneMap.from_values(source.pdf.x_min, source.pdf.x_max, values)


def staircase_compressor(source: SourceModel, boundaries, delta: float = 1.0,
                         sharpness: float = 0.3) -> MonotoneMap:
    """Compressor that sends each cell of a deterministic partition to one step.

    The map interpolates ``delta * (i - M/2)`` at boundary ``i`` and is then
    pulled toward the centre level of each cell by ``1 - sharpness``; a
    sharpness of 1 keeps the plain interpolant.  Used to start the descent
    near a known good partition.
    """
    b = np.asarray(boundaries, dtype=float)
    m = b.size - 1
    x = source.x
    ramp = np.interp(x, b, np.arange(m + 1) - 0.5 * m)
    cell = np.clip(np.searchsorted(b, x, side="left") - 1, 0, m - 1)
    centre = cell - 0.5 * (m - 1)
    values = delta * (centre + sharpness * (ramp - centre))
    values = project_increasing(values, monotone_floor(values))
    return MonotoneMap.from_values(source.pdf.x_min, source.pdf.x_max, values)


def optimize(g: MonotoneMap, source: SourceModel, delta: float, mode, config: DesignConfig,
             *, expander=None, sample_gradient=None, objective=None, record=None):
    """Alternate expander updates and descent steps from ``g`` until stationary.

    ``expander``, ``sample_gradient`` and ``objective`` override the
    unconstrained choices (used by the penalized constrained design).
    Returns ``(g, w, cost, iterations, converged)``.
    """
    if expander is None:
        def expander(m):
            return optimal_expander(m, source, delta, mode)
    w = expander(g)

    def obj(m, w_):
        if objective is None:
            return cost(m, w_, source, delta, mode)[0]
        return objective(m, w_)

    def grad_of(m, w_):
        if sample_gradient is None:
            return cost_sample_gradient(m, w_, source, delta, mode)
        return sample_gradient(m, w_)

    j = obj(g, w)
    step = safe_step = config.step_size
    quiet = 0
    prev_values = prev_dir = None
    for it in range(1, config.max_iters + 1):
        grad = grad_of(g, w)
        direction = _direction(grad, source, config.precondition)
        if prev_dir is not None:
            # Barzilai-Borwein trial step from the last displacement
            ds = g.values - prev_values
            dy = direction - prev_dir
            curv = float(np.dot(ds, dy))
            if curv > 0:
                step = float(np.dot(ds, ds)) / curv
        try:
            g_new, _, taken = descend(
                g, w, source, delta, mode, step, current_cost=j, grad=grad,
                precondition=config.precondition, objective=lambda m: obj(m, w))
            if taken == 0 and step != safe_step:
                # the extrapolated step overshot beyond what halving recovers
                g_new, _, taken = descend(
                    g, w, source, delta, mode, safe_step, current_cost=j, grad=grad,
                    precondition=config.precondition, objective=lambda m: obj(m, w))
        except DegenerateMappingError:
            log.warning("projection failed at iteration %d; stopping", it)
            return g, w, j, it, False
        if taken == 0:
            return g, w, j, it, True
        safe_step = taken
        prev_values, prev_dir = g.values, direction
        w_new = expander(g_new)
        j_new = obj(g_new, w_new)
        if record is not None:
            record.append(j_new)
        rel = (j - j_new) / max(abs(j), 1e-300)
        g, w, j = g_new, w_new, j_new
        quiet = quiet + 1 if rel < config.cost_tol else 0
        if quiet >= config.patience:
            return g, w, j, it, True
        step = taken * config.step_growth
    return g, w, j, config.max_iters, False


def default_schedule(mode) -> tuple:
    if isinstance(mode, FixedRate):
        # integer steps in T, starting from 1/2 for midrise targets
        first = 0.5 if mode.t_max % 1 else min(1.0, mode.t_max)
        return tuple(float(t) for t in np.arange(first, mode.t_max + 0.25, 1.0))
    # a nearly constant compressor is a local minimum for every lambda, so the
    # walk starts only a few octaves above the target
    return (4.0 * mode.lam, 2.0 * mode.lam, mode.lam)


def _stages(mode, schedule):
    if isinstance(mode, FixedRate):
        ts = sorted(t for t in schedule if t < mode.t_max)
        return [FixedRate(t) for t in ts] + [mode]
    lams = sorted((l for l in schedule if l > mode.lam), reverse=True)
    return [VariableRate(l) for l in lams] + [mode]


def design_unconstrained(source: SourceModel, mode, config: DesignConfig | None = None,
                         *, initial: MonotoneMap | None = None, delta: float = 1.0
                         ) -> RandomizedDesign:
    """Design compressor and expander for ``mode`` with step ``delta``.

    Starting from a seeded random compressor (or ``initial``), each stage of
    the relaxation schedule is optimized and warm-starts the next; at fixed
    rate the compressor is stretched by ``T_next / T`` between stages.
    """
    config = config or DesignConfig()
    schedule = config.relaxation_schedule or default_schedule(mode)
    stages = _stages(mode, schedule)
    g = initial
    if g is None:
        first = stages[0]
        if isinstance(first, FixedRate):
            scale = max(first.t_max, 0.5) * delta / max(abs(v) for v in source.support)
        else:
            scale = 1.0
        g = initial_compressor(source, scale, config.init_noise, config.seed)
    history = []
    iterations = 0
    converged = True
    prev = None
    for stage in stages:
        if isinstance(stage, FixedRate) and prev is not None and prev.t_max > 0:
            g = g.replace(g.values * stage.t_max / prev.t_max)
        g, w, j, its, ok = optimize(g, source, delta, stage, config, record=history)
        iterations += its
        converged = ok
        prev = stage
        log.debug("stage %s: cost %.10g after %d iterations", stage, j, its)
    return evaluate(g, w, source, delta, mode, converged=converged, iterations=iterations,
                    seed=config.seed, history=tuple(history))


def design_at_rate(source: SourceModel, target_rate: float, lam: float,
                   config: DesignConfig | None = None, *, initial: MonotoneMap,
                   delta: float = 1.0, penalty: float = RATE_PENALTY, rate_tol: float = 1e-5,
                   max_rounds: int = 40) -> RandomizedDesign:
    """Variable-rate design whose rate is held at ``target_rate``.

    Near a staircase compressor the Lagrangian is almost flat along moves that
    trade distortion for rate, so the rate at a fixed ``lam`` is poorly
    determined.  Method of multipliers: each round minimizes
    ``D + lam * R + penalty / 2 * (R - target_rate)**2`` from the previous
    compressor and then shifts ``lam`` by ``penalty * (R - target_rate)``.
    The returned design carries the final multiplier in its mode.
    """
    config = config or DesignConfig()
    g = initial
    history = []
    iterations = 0
    converged = False
    for _ in range(max_rounds):
        mode = VariableRate(max(lam, 0.0))

        def objective(m, w_, lam=lam):
            _, d, r = cost(m, w_, source, delta, mode)
            return d + lam * r + 0.5 * penalty * (r - target_rate) ** 2

        def sample_gradient(m, w_, lam=lam):
            weight = lam + penalty * (variable_rate(m, source, delta) - target_rate)
            return (cost_sample_gradient(m, w_, source, delta, VariableRate(0.0))
                    + weight * rate_sample_gradient(m, source, delta))

        g, w, _, its, ok = optimize(g, source, delta, mode, config, sample_gradient=sample_gradient,
                                    objective=objective, record=history)
        iterations += its
        gap = variable_rate(g, source, delta) - target_rate
        if abs(gap) <= rate_tol:
            converged = ok
            break
        lam += penalty * gap
        if lam < 0:
            raise ConstraintInfeasible(f"rate {target_rate} is beyond what any multiplier reaches")
    return evaluate(g, w, source, delta, VariableRate(lam), converged=converged,
                    iterations=iterations, seed=config.seed, history=tuple(history))


def correlation_with_source(design: RandomizedDesign, source: SourceModel) -> float:
    """``E[X w(g(X) + N)]`` by closed-form integration over the dither."""
    from randquant.compander import _Antiderivative, companded

    u = companded(design.compressor, design.mode, design.delta)
    prim = _Antiderivative(design.expander)
    hi1, _ = prim(u + 0.5 * design.delta)
    lo1, _ = prim(u - 0.5 * design.delta)
    return float(np.dot(source.masses, source.x * (hi1 - lo1) / design.delta))


def orthogonality_residual(design: RandomizedDesign, source: SourceModel) -> float:
    """``E[X (X - Xhat)]``; zero when the error is uncorrelated with the source."""
    return source.variance - correlation_with_source(design, source)


@dataclass(frozen=True)
class RandomizedConstraint:
    scale: float
    implied_lambda_c: float
    orthogonality_residual: float
    distortion_unconstrained: float
    distortion_constrained: float


def constrain_randomized(design: RandomizedDesign, source: SourceModel):
    """Rescale the expander so the reconstruction error is orthogonal to the source.

    The compressor is kept and ``w`` becomes ``s * w`` with
    ``s = var(X) / E[X w(g(X) + N)]``.  Returns the new design and a
    :class:`RandomizedConstraint` report; ``implied_lambda_c = 1 - 1/s`` is
    the multiplier for which ``s = 1 / (1 - lambda_c)``.
    """
    corr = correlation_with_source(design, source)
    if abs(corr) <= 1e-12 * source.variance:
        raise ConstraintInfeasible("reconstruction is uncorrelated with the source (zero rate)")
    s = source.variance / corr
    w = design.expander
    scaled = ScalarGrid(w.x_min, w.x_max, s * w.values)
    out = evaluate(design.compressor, scaled, source, design.delta, design.mode,
                   converged=design.converged, iterations=design.iterations, seed=design.seed)
    report = RandomizedConstraint(
        scale=s,
        implied_lambda_c=1.0 - 1.0 / s,
        orthogonality_residual=orthogonality_residual(out, source),
        distortion_unconstrained=design.distortion,
        distortion_constrained=out.distortion,
    )
    return out, report


def penalized_cost(g: MonotoneMap, w: ScalarGrid, source: SourceModel, delta: float, mode,
                   lam_c: float) -> float:
    """``J + lam_c * E[X (X - w(g(X) + N))]``."""
    j = cost(g, w, source, delta, mode)[0]
    tmp = RandomizedDesign(g, w, delta, mode, 0.0, 0.0, 0.0)
    return j + lam_c * orthogonality_residual(tmp, source)


def design_penalized(source: SourceModel, mode, lam_c: float, config: DesignConfig,
                     initial: MonotoneMap, *, delta: float = 1.0) -> RandomizedDesign:
    """Minimize the orthogonality-penalized cost directly from ``initial``.

    For fixed ``g`` the best expander is ``(1 + lam_c / 2) E[X | Y]``, so the
    expander step stays in closed form and only the gradient gains a
    correlation term.
    """
    factor = 1.0 + 0.5 * lam_c

    def expander(m):
        w = optimal_expander(m, source, delta, mode)
        return ScalarGrid(w.x_min, w.x_max, factor * w.values)

    g, w, _, its, ok = optimize(
        initial, source, delta, mode, config,
        expander=expander,
        sample_gradient=lambda m, w_: cost_sample_gradient(m, w_, source, delta, mode,
                                                           correlation_weight=lam_c),
        objective=lambda m, w_: penalized_cost(m, w_, source, delta, mode, lam_c))
    return evaluate(g, w, source, delta, mode, converged=ok, iterations=its, seed=config.seed)


@dataclass(frozen=True)
class PenalizedSolution:
    design: RandomizedDesign
    lam_c: float
    rate_weight: float
    orthogonality_residual: float


def constrain_direct(source: SourceModel, lam: float, config: DesignConfig,
                     initial: MonotoneMap, *, delta: float = 1.0, xtol: float = 1e-6
                     ) -> PenalizedSolution:
    """Orthogonality-constrained variable-rate design by direct penalized descent.

    With the expander ``a E[X | Y]`` (``a = 1 + lam_c / 2``) the penalized
    cost at rate weight ``lam * a**2`` differs from ``a**2`` times the
    unconstrained cost at ``lam`` only by a constant, so that rate weight is
    the one whose solution is comparable with the unconstrained design at
    ``lam``.  ``lam_c`` is found by root-finding on the orthogonality
    residual.
    """
    from scipy.optimize import brentq

    cache = {}

    def solve(lam_c):
        if lam_c not in cache:
            a = 1.0 + 0.5 * lam_c
            d = design_penalized(source, VariableRate(lam * a * a), lam_c, config, initial,
                                 delta=delta)
            cache[lam_c] = d
        return cache[lam_c]

    def residual(lam_c):
        return orthogonality_residual(solve(lam_c), source)

    lo, hi = 0.0, 1.0
    while residual(hi) > 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise ConstraintInfeasible("no multiplier reaches orthogonality")
    root = brentq(residual, lo, hi, xtol=xtol)
    d = solve(root)
    a = 1.0 + 0.5 * root
    return PenalizedSolution(d, root, lam * a * a, residual(root))


BUNDLE_VERSION = 1


def save_design(design: RandomizedDesign, path) -> None:
    """Write a versioned CSV bundle: header lines, then ``g`` and ``w`` samples.

    Floats are written with ``repr`` so that loading reproduces them exactly.
    """
    mode = design.mode
    kind, param = ("fixed", mode.t_max) if isinstance(mode, FixedRate) else ("variable", mode.lam)
    header = [
        ("# randquant-design", BUNDLE_VERSION),
        ("# mode", kind, param),
        ("# delta", design.delta),
        ("# distortion", design.distortion),
        ("# rate", design.rate),
        ("# seed", design.seed),
        ("# converged", int(design.converged)),
    ]
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        for row in header:
            out.writerow([row[0]] + [repr(float(v)) if isinstance(v, float) else v for v in row[1:]])
        out.writerow(["map", "abscissa", "value"])
        for name, grid in (("g", design.compressor.grid), ("w", design.expander)):
            for a, v in zip(grid.abscissae, grid.values):
                out.writerow([name, repr(float(a)), repr(float(v))])


def load_design(path, source: SourceModel) -> RandomizedDesign:
    """Inverse of :func:`save_design`; cost terms are recomputed on ``source``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    meta = {r[0]: r[1:] for r in rows if r and r[0].startswith("#")}
    if meta.get("# randquant-design") != [str(BUNDLE_VERSION)]:
        raise InvalidArgument(f"{path}: not a version {BUNDLE_VERSION} design bundle")
    try:
        kind, param = meta["# mode"]
        mode = FixedRate(float(param)) if kind == "fixed" else VariableRate(float(param))
        delta = float(meta["# delta"][0])
        seed = int(meta["# seed"][0])
        converged = bool(int(meta["# converged"][0]))
        body = [r for r in rows if r and r[0] in ("g", "w")]
        samples = {name: np.array([[float(a), float(v)] for n, a, v in body if n == name])
                   for name in ("g", "w")}
    except (KeyError, ValueError) as exc:
        raise InvalidArgument(f"{path}: malformed bundle ({exc})") from None
    g_rows, w_rows = samples["g"], samples["w"]
    g = MonotoneMap.from_values(g_rows[0, 0], g_rows[-1, 0], g_rows[:, 1])
    w = ScalarGrid(w_rows[0, 0], w_rows[-1, 0], w_rows[:, 1])
    if g.x.size != source.x.size or not np.allclose(g.x, source.x, rtol=0, atol=1e-12):
        raise InvalidArgument(f"{path}: compressor grid does not match the source grid")
    return evaluate(g, w, source, delta, mode, converged=converged, seed=seed)
