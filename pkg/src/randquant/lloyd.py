"""Deterministic scalar quantizers: Lloyd-Max, entropy-constrained, and
their orthogonality-constrained versions.

All expectations are taken over the discretized source (point masses at the
grid nodes), so cell probabilities and first moments are exact cumulative
sums and a cell boundary only matters through which nodes it separates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from randquant.errors import ConstraintInfeasible, InvalidArgument
from randquant.source import SourceModel

MAX_LLOYD_ITERS = 10_000
LLOYD_TOL = 1e-10
DEFAULT_STARTS = 16


@dataclass(frozen=True)
class CellQuantizer:
    """Partition of the support into cells ``(b[i-1], b[i]]`` with one level each.

    ``lam`` is ``None`` for fixed-rate designs and the Lagrange multiplier of
    the entropy penalty for variable-rate designs.
    """

    boundaries: np.ndarray
    reconstructions: np.ndarray
    probs: np.ndarray
    moments: np.ndarray
    lam: float | None = None

    def __post_init__(self):
        for name in ("boundaries", "reconstructions", "probs", "moments"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        b, r, p = self.boundaries, self.reconstructions, self.probs
        if b.size != r.size + 1 or p.size != r.size or self.moments.size != r.size:
            raise InvalidArgument("inconsistent cell counts")
        if not np.all(np.diff(b) > 0):
            raise InvalidArgument("boundaries must be strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidArgument("cell probabilities must be nonnegative and sum to 1")
        if not np.all(np.isfinite(r)):
            raise InvalidArgument("reconstructions must be finite")

    @property
    def n_cells(self) -> int:
        return self.reconstructions.size

    @property
    def rate_mode(self) -> str:
        return "fixed" if self.lam is None else "variable"

    def quantize(self, x):
        """Reconstruction for each value of ``x`` (clamped to the outer cells)."""
        idx = np.searchsorted(self.boundaries[1:-1], np.asarray(x, dtype=float), side="left")
        return self.reconstructions[idx]

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-np.dot(p, np.log2(p)))

    def rate(self) -> float:
        """``log2(M)`` at fixed rate, cell-index entropy at variable rate."""
        return math.log2(self.n_cells) if self.lam is None else self.entropy()


@dataclass(frozen=True)
class ConstraintReport:
    scale_c: float
    orthogonality_residual: float
    distortion_unconstrained: float
    distortion_constrained: float


class _Atoms:
    """Cumulative sums of the discretized source for O(1) cell statistics."""

    def __init__(self, source: SourceModel):
        self.x = source.x
        p = source.masses
        self.c0 = np.concatenate(([0.0], np.cumsum(p)))
        self.c1 = np.concatenate(([0.0], np.cumsum(p * self.x)))
        self.c2 = np.concatenate(([0.0], np.cumsum(p * self.x**2)))
        self.variance = source.variance

    def split(self, boundaries):
        """Node index ranges ``[k0, k1)`` of each cell ``(b[i-1], b[i]]``."""
        inner = np.searchsorted(self.x, boundaries[1:-1], side="right")
        return np.concatenate(([0], inner, [self.x.size]))

    def stats(self, boundaries):
        """Mass, first and second moment of each cell."""
        k = self.split(boundaries)
        return (np.diff(self.c0[k]), np.diff(self.c1[k]), np.diff(self.c2[k]))


def _build(atoms: _Atoms, boundaries, recon=None, lam=None) -> CellQuantizer:
    p, l, _ = atoms.stats(boundaries)
    p = np.maximum(p, 0.0)
    p = p / p.sum()
    if recon is None:
        mid = 0.5 * (boundaries[:-1] + boundaries[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            recon = np.where(p > 0, l / np.where(p > 0, p, 1.0), mid)
    return CellQuantizer(boundaries, recon, p, l, lam)


def distortion(q: CellQuantizer, source: SourceModel) -> float:
    """Mean squared error of ``q`` on the discretized source."""
    return float(np.dot(source.masses, (source.x - q.quantize(source.x)) ** 2))


def lagrangian(q: CellQuantizer, source: SourceModel) -> float:
    d = distortion(q, source)
    return d if q.lam is None else d + q.lam * q.entropy()


def _random_boundaries(source, m, rng):
    # interior boundaries at random quantiles of the source
    u = np.sort(rng.uniform(0.02, 0.98, m - 1))
    inner = source.inverse_cdf(u)
    lo, hi = source.support
    return np.concatenate(([lo], inner, [hi]))


def _quantile_boundaries(source, m):
    inner = source.inverse_cdf(np.arange(1, m) / m)
    lo, hi = source.support
    return np.concatenate(([lo], inner, [hi]))


def _uniform_boundaries(source, step, offset):
    lo, hi = source.support
    k0 = math.floor(lo / step - offset)
    inner = (np.arange(k0, math.ceil(hi / step - offset) + 1) + offset) * step
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate(([lo], inner, [hi]))


def _lloyd_iterate(atoms: _Atoms, source: SourceModel, boundaries, lam):
    """Centroid / boundary alternation until the cost change is below tolerance."""
    lo, hi = source.support
    prev = math.inf
    b = boundaries
    for _ in range(MAX_LLOYD_ITERS):
        p, l, s2 = atoms.stats(b)
        if not np.all(p > 0):
            b = np.concatenate(([lo], _nonempty_inner(atoms, b), [hi]))
            p, l, s2 = atoms.stats(b)
        r = l / p
        cost = float(np.sum(s2 - l * l / p))
        if lam is not None:
            cost += lam * float(-np.dot(p, np.log2(p)))
        if prev - cost < LLOYD_TOL * max(atoms.variance, 1e-300):
            break
        prev = cost
        b = np.concatenate(([lo], _boundaries_for(r, p, lam, lo, hi), [hi]))
    return _build(atoms, b, lam=lam)


def _boundaries_for(r, p, lam, lo, hi):
    """Cell boundaries where neighbouring (Lagrangian) cell costs cross.

    With an entropy penalty a boundary can land beyond its right neighbour;
    the cell between them would be empty, so it is removed and the boundary
    between the remaining neighbours recomputed.
    """
    r = list(r)
    bits = list(-np.log2(p)) if lam is not None else [0.0] * len(r)
    lam = lam or 0.0
    while True:
        inner = [0.5 * (r[i] + r[i + 1]) + lam * (bits[i + 1] - bits[i]) / (2.0 * (r[i + 1] - r[i]))
                 for i in range(len(r) - 1)]
        bad = next((i for i in range(len(inner) - 1) if inner[i + 1] <= inner[i]), None)
        if bad is None:
            break
        del r[bad + 1], bits[bad + 1]
    inner = np.array(inner)
    return inner[(inner > lo) & (inner < hi)]


def _nonempty_inner(atoms, b):
    # keeping only the right boundary of each non-empty cell (but the last)
    # merges every empty cell into a non-empty neighbour
    p, _, _ = atoms.stats(b)
    idx = np.flatnonzero(p > 0)
    return b[1:][idx][:-1]


def lloyd_max(source: SourceModel, n_cells: int, seed: int = 0,
              n_starts: int = DEFAULT_STARTS) -> CellQuantizer:
    """Fixed-rate MSE-optimal quantizer with ``n_cells`` levels.

    Runs Lloyd's alternation from equal-probability boundaries and from
    seeded random quantile starts (``n_starts`` in total); the
    lowest-distortion result is returned.
    """
    return _multistart(source, n_cells, None, seed, n_starts)


def ecsq(source: SourceModel, lam: float, n_init: int = 32, seed: int = 0,
         n_starts: int = DEFAULT_STARTS) -> CellQuantizer:
    """Entropy-constrained quantizer minimizing ``D + lam * H``.

    Besides the random starts with ``n_init`` cells, two uniform-threshold
    starts (midtread and midrise) sized for ``lam`` are tried.  Cells that
    empty out are pruned.
    """
    if lam < 0:
        raise InvalidArgument("lam must be nonnegative")
    return _multistart(source, n_init, float(lam), seed, n_starts)


def _multistart(source, n_cells, lam, seed, n_starts):
    if n_cells < 1:
        raise InvalidArgument("need at least one cell")
    atoms = _Atoms(source)
    rng = np.random.default_rng(seed)
    best, best_cost = None, math.inf
    starts = [_quantile_boundaries(source, n_cells)]
    if lam:
        # at high rate the entropy-constrained optimum is close to uniform
        # thresholds with step sqrt(6 lam / ln 2)
        step = math.sqrt(6.0 * lam / math.log(2.0))
        starts += [_uniform_boundaries(source, step, 0.5), _uniform_boundaries(source, step, 0.0)]
    while len(starts) < max(n_starts, len(starts)):
        starts.append(_random_boundaries(source, n_cells, rng))
    for b in starts:
        q = _lloyd_iterate(atoms, source, b, lam)
        c = lagrangian(q, source)
        if c < best_cost - 1e-15:
            best, best_cost = q, c
    return best


def orthogonality_residual(q: CellQuantizer, source: SourceModel) -> float:
    """``E[X (X - Xhat)]`` over the discretized source."""
    xhat = q.quantize(source.x)
    return float(np.dot(source.masses, source.x * (source.x - xhat)))


def constrain_deterministic(q: CellQuantizer, source: SourceModel):
    """Scale the levels of ``q`` so that the error is orthogonal to the source.

    The partition is kept and every level is multiplied by
    ``c = var(X) / sum(p_i r_i**2)``.
    """
    energy = float(np.dot(q.probs, q.reconstructions**2))
    if energy <= 0:
        raise ConstraintInfeasible("all levels are zero; no scaling can reach orthogonality")
    c = source.variance / energy
    out = CellQuantizer(q.boundaries, c * q.reconstructions, q.probs, q.moments, q.lam)
    report = ConstraintReport(
        scale_c=c,
        orthogonality_residual=orthogonality_residual(out, source),
        distortion_unconstrained=distortion(q, source),
        distortion_constrained=distortion(out, source),
    )
    return out, report


def verify_distortion_identity(report: ConstraintReport, sigma2: float) -> float:
    """``|D - sigma2 * D* / (sigma2 - D*)|`` for a constrained design."""
    d_star = report.distortion_unconstrained
    if d_star >= sigma2:
        raise InvalidArgument("unconstrained distortion must be below the source variance")
    return abs(report.distortion_constrained - sigma2 * d_star / (sigma2 - d_star))


def save_quantizer(q: CellQuantizer, path) -> None:
    """CSV rows ``lower,upper,reconstruction,probability`` after a mode header."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# mode", q.rate_mode, "" if q.lam is None else repr(q.lam)])
        w.writerow(["lower", "upper", "reconstruction", "probability"])
        for i in range(q.n_cells):
            w.writerow([repr(float(v)) for v in (q.boundaries[i], q.boundaries[i + 1],
                                                  q.reconstructions[i], q.probs[i])])


def load_quantizer(path, source: SourceModel) -> CellQuantizer:
    """Inverse of :func:`save_quantizer`; moments are recomputed from ``source``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or rows[0][0] != "# mode":
        raise InvalidArgument(f"{path}: missing mode header")
    lam = None if rows[0][1] == "fixed" else float(rows[0][2])
    try:
        body = np.array([[float(v) for v in r] for r in rows[2:]])
    except ValueError as exc:
        raise InvalidArgument(f"{path}: {exc}") from None
    if not np.allclose(body[1:, 0], body[:-1, 1], rtol=0, atol=0):
        raise InvalidArgument(f"{path}: cells are not contiguous")
    b = np.concatenate((body[:, 0], body[-1:, 1]))
    _, l, _ = _Atoms(source).stats(b)
    return CellQuantizer(b, body[:, 2], body[:, 3], l, lam)
