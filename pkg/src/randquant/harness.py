"""Experiment orchestration: SNR-versus-rate sweeps, bivariate error
correlation, and error-whiteness diagnostics for five quantizer families.

Families
--------
conventional-dither
    Uniform quantizer with subtractive dither.
randomized
    Compander with dither in the companded domain, designed without
    constraint.
constrained-randomized
    The randomized design with its expander rescaled so that the error is
    orthogonal to the source.
constrained-deterministic
    The optimal deterministic quantizer with its levels rescaled the same way.
optimal-deterministic
    Lloyd-Max (fixed rate) or entropy-constrained (variable rate) design.
"""

from __future__ import annotations

import logging
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from randquant import lloyd
from randquant.compander import FixedRate, VariableRate, _Antiderivative, reconstruct
from randquant.design import (
    DesignConfig,
    RandomizedDesign,
    constrain_randomized,
    design_at_rate,
    design_unconstrained,
    load_design,
    orthogonality_residual as randomized_residual,
    staircase_compressor,
)
from randquant.dither import (
    UniformQuantizerSpec,
    best_fixed_rate_step,
    conventional_distortion,
    dithered_reconstruct,
    draw_dither,
    step_for_rate,
)
from randquant.errors import ConstraintInfeasible, DegenerateMappingError, InvalidArgument
from randquant.source import (
    BivariateGaussianSpec,
    SourceModel,
    make_truncated_gaussian,
    sample,
    sample_bivariate,
)

log = logging.getLogger(__name__)

CONVENTIONAL = "conventional-dither"
RANDOMIZED = "randomized"
CONSTRAINED_RANDOMIZED = "constrained-randomized"
CONSTRAINED_DETERMINISTIC = "constrained-deterministic"
OPTIMAL = "optimal-deterministic"
FAMILIES = (CONVENTIONAL, RANDOMIZED, CONSTRAINED_RANDOMIZED, CONSTRAINED_DETERMINISTIC, OPTIMAL)
PARENTS = {CONSTRAINED_RANDOMIZED: RANDOMIZED, CONSTRAINED_DETERMINISTIC: OPTIMAL}

LAMBDA_RANGE = (1e-5, 20.0)
MAX_BISECTIONS = 60
ANCHOR_TOL = 1e-3


def snr_db(variance: float, distortion: float) -> float:
    return 10.0 * math.log10(variance / distortion)


@dataclass(frozen=True)
class SweepSpec:
    """What to sweep.

    ``rate_points`` are target rates in bits.  At fixed rate each must be
    ``log2`` of an integer level count ``M``; the companded quantizer then
    uses ``t_max = (M - 1) / 2``.  ``bundles`` holds ``(family, rate, path)``
    triples of saved designs to load instead of designing.
    """

    rate_mode: str
    rate_points: tuple
    families: tuple = FAMILIES
    source: SourceModel | None = None
    config: DesignConfig = field(default_factory=DesignConfig)
    seed: int = 0
    rate_tol: float = 1e-5
    jobs: int = 1
    bundles: tuple = ()

    def __post_init__(self):
        if self.rate_mode not in ("fixed", "variable"):
            raise InvalidArgument(f"rate_mode must be 'fixed' or 'variable', got {self.rate_mode!r}")
        if not self.rate_points:
            raise InvalidArgument("rate_points must not be empty")
        if not self.families:
            raise InvalidArgument("families must not be empty")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise InvalidArgument(f"unknown families: {sorted(unknown)}")
        if any(r < 0 for r in self.rate_points):
            raise InvalidArgument("rates must be nonnegative")
        if self.rate_mode == "fixed":
            for r in self.rate_points:
                levels_for_rate(r)


@dataclass(frozen=True)
class ResultRow:
    family: str
    rate_bits: float
    distortion: float
    snr_db: float
    orthogonality_residual: float
    error_source_correlation: float
    converged: bool = True


def levels_for_rate(rate: float) -> int:
    m = round(2.0**rate)
    if m < 1 or abs(math.log2(m) - rate) > 1e-9:
        raise InvalidArgument(f"fixed rate {rate} is not log2 of an integer level count")
    return m


# --------------------------------------------------------------------------
# designed quantizers with a common interface


@dataclass(frozen=True)
class DesignedQuantizer:
    """One family's quantizer at one operating point.

    ``reconstruct(x, rng)`` draws whatever dither the family needs from
    ``rng``; deterministic families ignore it.
    """

    family: str
    rate: float
    distortion: float
    orthogonality_residual: float
    error_mean: float
    converged: bool
    payload: object = field(repr=False, default=None)
    mode: object = None

    def reconstruct(self, x, rng: np.random.Generator):
        x = np.asarray(x, dtype=float)
        if self.family == CONVENTIONAL:
            spec = self.payload
            if self.rate == 0:
                return np.zeros_like(x)
            return dithered_reconstruct(x, draw_dither(x.size, spec.delta, rng).reshape(x.shape), spec)
        if self.family in (RANDOMIZED, CONSTRAINED_RANDOMIZED):
            d: RandomizedDesign = self.payload
            z = draw_dither(x.size, d.delta, rng).reshape(x.shape)
            return reconstruct(d.compressor, d.expander, x, z, d.delta, d.mode)
        return self.payload.quantize(x)

    def conditional_error(self, x):
        """Mean and second moment of ``Xhat - x`` given the source value ``x``."""
        x = np.asarray(x, dtype=float)
        if self.family == CONVENTIONAL:
            spec = self.payload
            if self.rate == 0:
                return -x, x * x
            reach = spec.t_max * spec.delta
            mean = np.clip(x, -reach, reach) - x
            return mean, mean * mean + spec.delta**2 / 12.0
        if self.family in (RANDOMIZED, CONSTRAINED_RANDOMIZED):
            d: RandomizedDesign = self.payload
            u = d.compressor(x)
            if isinstance(d.mode, FixedRate):
                u = np.clip(u, -d.mode.t_max * d.delta, d.mode.t_max * d.delta)
            prim = _Antiderivative(d.expander)
            hi1, hi2 = prim(u + 0.5 * d.delta)
            lo1, lo2 = prim(u - 0.5 * d.delta)
            mean_w = (hi1 - lo1) / d.delta
            return mean_w - x, x * x - 2.0 * x * mean_w + (hi2 - lo2) / d.delta
        mean = self.payload.quantize(x) - x
        return mean, mean * mean

    def error_source_correlation(self, source: SourceModel) -> float:
        """``corr(X, Xhat - X)`` from the quadrature moments."""
        var_e = self.distortion - self.error_mean**2
        if var_e <= 0:
            return 0.0
        return -self.orthogonality_residual / math.sqrt(source.variance * var_e)

    def row(self, source: SourceModel) -> ResultRow:
        return ResultRow(self.family, self.rate, self.distortion,
                         snr_db(source.variance, self.distortion), self.orthogonality_residual,
                         self.error_source_correlation(source), self.converged)


def _wrap_randomized(family, d: RandomizedDesign, source):
    q = DesignedQuantizer(family, d.rate, d.distortion, randomized_residual(d, source),
                          0.0, d.converged, d, d.mode)
    mean, _ = q.conditional_error(source.x)
    return replace(q, error_mean=float(np.dot(source.masses, mean)))


def _wrap_cells(family, q: lloyd.CellQuantizer, source, rate):
    mean = float(np.dot(q.probs, q.reconstructions))
    return DesignedQuantizer(family, rate, lloyd.distortion(q, source),
                             lloyd.orthogonality_residual(q, source), mean, True, q)


def _match_rate(fn, target: float, tol: float):
    """Geometric bisection on lambda so that ``fn(lam)[0]`` (a rate) hits ``target``.

    Rate decreases with lambda.  Returns ``(rate, result, lam)`` for the
    evaluation closest to the target.
    """
    lo, hi = LAMBDA_RANGE
    best = None
    for _ in range(MAX_BISECTIONS):
        mid = math.sqrt(lo * hi)
        rate, result = fn(mid)
        if best is None or abs(rate - target) < abs(best[0] - target):
            best = (rate, result, mid)
        if abs(rate - target) <= tol or hi / lo < 1 + 1e-12:
            break
        if rate > target:
            lo = mid
        else:
            hi = mid
    return best


def _single_stage(config: DesignConfig, target: float) -> DesignConfig:
    return DesignConfig(**{**config.__dict__, "relaxation_schedule": (target,)})


def _seeded_randomized(source, mode, config, boundaries):
    target = mode.lam if isinstance(mode, VariableRate) else mode.t_max
    return design_unconstrained(source, mode, _single_stage(config, target),
                                initial=staircase_compressor(source, boundaries))


def _best_randomized(source, mode, config, boundaries):
    """Lower-cost design of the annealed run and the run seeded from ``boundaries``."""
    seeded = _seeded_randomized(source, mode, config, boundaries)
    annealed = design_unconstrained(source, mode, config)
    return min((annealed, seeded), key=lambda d: d.lagrangian_cost)


def design_family(family: str, source: SourceModel, rate_mode: str, rate: float,
                  config: DesignConfig | None = None, rate_tol: float = 1e-5) -> DesignedQuantizer:
    """Design ``family`` at target ``rate`` (bits) on ``source``."""
    config = config or DesignConfig()
    if family not in FAMILIES:
        raise InvalidArgument(f"unknown family {family!r}")
    if rate_mode == "fixed":
        return _design_fixed(family, source, rate, config)
    if rate_mode == "variable":
        return _design_variable(family, source, rate, config, rate_tol)
    raise InvalidArgument(f"rate_mode must be 'fixed' or 'variable', got {rate_mode!r}")


def _zero_rate(family, source):
    return DesignedQuantizer(family, 0.0, source.variance, source.variance, 0.0, True,
                             lloyd.lloyd_max(source, 1))


def _design_fixed(family, source, rate, config):
    m = levels_for_rate(rate)
    t_max = 0.5 * (m - 1)
    if m == 1:
        if family in (RANDOMIZED, CONSTRAINED_RANDOMIZED):
            d = design_unconstrained(source, FixedRate(0.0), config)
            return _wrap_randomized(family, d, source)
        return _zero_rate(family, source)
    if family == CONVENTIONAL:
        spec = best_fixed_rate_step(source, t_max)
        return DesignedQuantizer(CONVENTIONAL, rate, conventional_distortion(spec, source),
                                 *_conventional_moments(spec, source), True, spec)
    q = lloyd.lloyd_max(source, m, seed=config.seed)
    if family == OPTIMAL:
        return _wrap_cells(OPTIMAL, q, source, rate)
    if family == CONSTRAINED_DETERMINISTIC:
        qc, _ = lloyd.constrain_deterministic(q, source)
        return _wrap_cells(family, qc, source, rate)
    d = _best_randomized(source, FixedRate(t_max), config, q.boundaries)
    if family == CONSTRAINED_RANDOMIZED:
        d, _ = constrain_randomized(d, source)
    return _wrap_randomized(family, d, source)


def _conventional_moments(spec: UniformQuantizerSpec, source: SourceModel):
    """Orthogonality residual and error mean of the dithered uniform quantizer.

    The error is ``clip(x) - x`` plus independent zero-mean dither noise.
    """
    reach = spec.t_max * spec.delta
    x = source.x
    clip_err = np.clip(x, -reach, reach) - x
    residual = -float(np.dot(source.masses, x * clip_err))
    return residual, float(np.dot(source.masses, clip_err))


def _design_variable(family, source, rate, config, tol):
    if rate == 0:
        if family in (RANDOMIZED, CONSTRAINED_RANDOMIZED):
            d = design_unconstrained(source, VariableRate(LAMBDA_RANGE[1]), config)
            return _wrap_randomized(family, d, source)
        return _zero_rate(family, source)
    # the entropy-constrained optimum only reaches a discrete set of rates on
    # the discretized source; every family is matched to the one it achieves
    def run_ecsq(lam):
        q = lloyd.ecsq(source, lam, seed=config.seed)
        return q.entropy(), q

    r_opt, q, lam_opt = _match_rate(run_ecsq, rate, ANCHOR_TOL)
    if family == CONVENTIONAL:
        delta = step_for_rate(source, r_opt)
        spec = UniformQuantizerSpec(delta)
        return DesignedQuantizer(CONVENTIONAL, r_opt, delta**2 / 12.0, 0.0, 0.0, True, spec)
    if family == OPTIMAL:
        return _wrap_cells(OPTIMAL, q, source, r_opt)
    if family == CONSTRAINED_DETERMINISTIC:
        qc, _ = lloyd.constrain_deterministic(q, source)
        return _wrap_cells(family, qc, source, r_opt)

    # both candidates are pinned to the deterministic rate and compared on distortion
    seeds = (staircase_compressor(source, q.boundaries),
             design_unconstrained(source, VariableRate(lam_opt), config).compressor)
    pinned = [design_at_rate(source, r_opt, lam_opt, config, initial=g0, rate_tol=tol) for g0 in seeds]
    d = min(pinned, key=lambda d: d.distortion)
    if family == CONSTRAINED_RANDOMIZED:
        d, _ = constrain_randomized(d, source)
    return _wrap_randomized(family, d, source)


# --------------------------------------------------------------------------
# sweeps


def load_bundle(path, source: SourceModel, family: str) -> DesignedQuantizer:
    """Read a saved compander bundle or cell quantizer as ``family``."""
    with Path(path).open() as fh:
        first = fh.readline()
    if first.startswith("# randquant-design"):
        return _wrap_randomized(family, load_design(path, source), source)
    q = lloyd.load_quantizer(path, source)
    return _wrap_cells(family, q, source, q.rate())


def _point_design(spec: SweepSpec, family: str, rate: float, designed: dict) -> DesignedQuantizer:
    src = spec.source
    for f, r, path in spec.bundles:
        if f == family and abs(r - rate) < 1e-12:
            return load_bundle(path, src, family)
    parent = designed.get(PARENTS.get(family))
    if parent is not None and parent.rate > 0:
        if family == CONSTRAINED_RANDOMIZED:
            d, _ = constrain_randomized(parent.payload, src)
            return _wrap_randomized(family, d, src)
        qc, _ = lloyd.constrain_deterministic(parent.payload, src)
        return _wrap_cells(family, qc, src, parent.rate)
    return design_family(family, src, spec.rate_mode, rate, spec.config, spec.rate_tol)


def _sweep_point(args):
    spec, rate = args
    rows = []
    designed = {}
    # parents first so that the constrained families can reuse them
    for family in sorted(spec.families, key=lambda f: f in PARENTS):
        try:
            q = _point_design(spec, family, rate, designed)
        except (DegenerateMappingError, ConstraintInfeasible) as exc:
            log.warning("%s at %g bits failed: %s", family, rate, exc)
            rows.append(ResultRow(family, rate, math.nan, math.nan, math.nan, math.nan, False))
            continue
        designed[family] = q
        rows.append(q.row(spec.source))
    return rows


def snr_sweep(spec: SweepSpec) -> list[ResultRow]:
    """Design and evaluate every family at every rate point.

    Distortions come from quadrature.  Rate points run in a process pool
    when ``spec.jobs > 1``; rows are sorted by (family, rate) so the output
    does not depend on scheduling.
    """
    if spec.source is None:
        spec = replace(spec, source=make_truncated_gaussian())
    tasks = [(spec, r) for r in spec.rate_points]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            chunks = list(pool.map(_sweep_point, tasks))
    else:
        chunks = [_sweep_point(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    return sorted(rows, key=lambda r: (r.family, r.rate_bits))


# --------------------------------------------------------------------------
# correlation and whiteness


def marginal_source(spec: BivariateGaussianSpec, n_points: int = 2001) -> SourceModel:
    return make_truncated_gaussian(spec.variance, spec.truncation, n_points)


def error_correlation(quantizer: DesignedQuantizer, pairs: np.ndarray, seed: int) -> float:
    """Pearson correlation of the two components' reconstruction errors.

    Each component is quantized with the same scalar design and its own
    dither stream.
    """
    rng = np.random.default_rng(seed)
    first = quantizer.reconstruct(pairs[:, 0], rng) - pairs[:, 0]
    second = quantizer.reconstruct(pairs[:, 1], rng) - pairs[:, 1]
    if np.std(first) == 0 or np.std(second) == 0:
        return 0.0
    return float(np.corrcoef(first, second)[0, 1])


def error_correlation_exact(quantizer: DesignedQuantizer, spec: BivariateGaussianSpec,
                            n_points: int = 1201) -> float:
    """Error correlation by quadrature over the bivariate density.

    Given the pair, the two errors are independent (separate dither), so
    ``E[e1 e2]`` only needs each component's conditional error mean.
    """
    x = np.linspace(-spec.truncation, spec.truncation, n_points)
    weights = np.full(n_points, x[1] - x[0])
    weights[[0, -1]] *= 0.5
    mean, second = quantizer.conditional_error(x)
    if abs(spec.rho) == 1.0:
        joint = np.diag(np.exp(-0.5 * x * x / spec.variance) * weights)
        if spec.rho < 0:
            joint = joint[:, ::-1]
    else:
        q = (x[:, None] ** 2 - 2.0 * spec.rho * np.outer(x, x) + x[None, :] ** 2)
        joint = np.exp(-0.5 * q / (spec.variance * (1.0 - spec.rho**2))) * np.outer(weights, weights)
    joint /= joint.sum()
    marginal = joint.sum(axis=1)
    mu = float(marginal @ mean)
    var = float(marginal @ second) - mu * mu
    if var <= 0:
        return 0.0
    return (float(mean @ joint @ mean) - mu * mu) / var


def correlation_experiment(spec: BivariateGaussianSpec, family: str, rate_target: float,
                           n_samples: int, seed: int, *, rate_mode: str = "fixed",
                           config: DesignConfig | None = None,
                           quantizer: DesignedQuantizer | None = None) -> float:
    """Error correlation of ``family`` designed at ``rate_target`` on the marginal source.

    Pass ``quantizer`` to reuse a design across correlation values.
    """
    if quantizer is None:
        quantizer = design_family(family, marginal_source(spec), rate_mode, rate_target, config)
    pairs = sample_bivariate(spec, n_samples, seed)
    return error_correlation(quantizer, pairs, seed + 1)


@dataclass(frozen=True)
class WhitenessReport:
    error_source_correlation: float
    error_mean: float
    error_variance: float
    histogram: np.ndarray
    bin_edges: np.ndarray

    @property
    def max_uniform_deviation(self) -> float:
        return float(np.max(np.abs(self.histogram - 1.0 / self.histogram.size)))


def whiteness_report(quantizer: DesignedQuantizer, source: SourceModel, n_samples: int,
                     seed: int, bins: int = 20) -> WhitenessReport:
    """Monte Carlo statistics of the error ``Xhat - X``.

    The histogram holds bin fractions over ``(-delta/2, delta/2)`` for the
    conventional quantizer and over the observed error range otherwise.
    """
    x = sample(source, n_samples, seed)
    rng = np.random.default_rng(seed + 1)
    err = quantizer.reconstruct(x, rng) - x
    if quantizer.family == CONVENTIONAL and quantizer.rate > 0:
        half = 0.5 * quantizer.payload.delta
        edges = np.linspace(-half, half, bins + 1)
    else:
        edges = np.linspace(err.min(), err.max(), bins + 1)
    counts, edges = np.histogram(err, bins=edges)
    corr = float(np.corrcoef(x, err)[0, 1]) if np.std(err) > 0 else 0.0
    return WhitenessReport(corr, float(err.mean()), float(err.var()), counts / err.size, edges)


# --------------------------------------------------------------------------
# CSV output

SWEEP_HEADER = ("family", "rate_bits", "distortion", "snr_db", "ortho_residual",
                "err_src_corr", "converged")
CORRELATION_HEADER = ("family", "rho", "rate_bits", "error_correlation", "n_samples")


def format_real(value: float) -> str:
    """Nine significant digits; negative zero is printed as zero."""
    text = format(float(value), ".9g")
    return "0" if text == "-0" else text


def _cell(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return format_real(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_cell(v) for v in row])


def sweep_table(rows) -> list[tuple]:
    return [(r.family, r.rate_bits, r.distortion, r.snr_db, r.orthogonality_residual,
             r.error_source_correlation, r.converged) for r in rows]
