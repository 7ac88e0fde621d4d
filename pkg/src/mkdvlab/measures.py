"""Gaussian measures, weighted densities and Monte-Carlo estimators.

Every sample draws from its own stream SeedSequence(seed, spawn_key=(stream_id, index)),
so estimates do not depend on worker count or scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
import logging
import math
from typing import Callable, Sequence, TypeVar

import numpy as np

from mkdvlab.errors import FitError, FlowBlowUpError, MkdvLabError
from mkdvlab.flow import FlowParams, default_dt, evolve
from mkdvlab.hierarchy import energies, remainder_bound, sobolev_seminorm_squared
from mkdvlab.spectral import TWO_PI, SpectralField, sobolev_norm

logger = logging.getLogger(__name__)

T = TypeVar("T")
FieldFunctional = Callable[[SpectralField], float]

MAX_FLAGGED_FRACTION = 1e-3
DEFAULT_MIN_EXCEEDANCES = 5


@dataclass(frozen=True)
class GaussianSamplerSpec:
    """Level n, mode cutoff K and the (seed, stream_id) pair naming the random stream."""

    n: int
    K: int
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}.")
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}.")
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative.")

    @property
    def standard_deviations(self) -> np.ndarray:
        modes = np.arange(-self.K, self.K + 1).astype(np.float64)
        return 1.0 / np.sqrt(TWO_PI * (1.0 + modes ** (2 * self.n)))


@dataclass(frozen=True)
class CutoffSpec:
    """Radius of the smooth cutoff chi_R(x) = chi(x / R)."""

    R: float

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}.")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int
    seed: int
    n_flagged: int = 0


@dataclass(frozen=True)
class TailResult:
    """Exceedance probabilities and the fitted slope of log P against M^2."""

    thresholds: tuple[float, ...]
    estimates: tuple[McEstimate, ...]
    exceedances: tuple[int, ...]
    slope: float | None
    slope_stderr: float | None
    excluded: tuple[float, ...] = ()

    @property
    def t_statistic(self) -> float | None:
        if self.slope is None or not self.slope_stderr:
            return None
        return self.slope / self.slope_stderr


@dataclass(frozen=True)
class AlmostInvarianceResult:
    """Signed defect estimates per truncation cutoff for one H^s ball."""

    radius: float
    s: float
    t: float
    series: tuple[tuple[int, McEstimate], ...]
    flagged_samples: tuple[int, ...] = field(default_factory=tuple)


def sample_rng(spec: GaussianSamplerSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(spec.stream_id, index)))


def gaussian_draws(spec: GaussianSamplerSpec, index: int = 0) -> np.ndarray:
    """Standard complex Gaussians g_{-K..K} with E|g|^2 = 1 and E g^2 = 0."""
    rng = sample_rng(spec, index)
    size = 2 * spec.K + 1
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)


def sample_mu(spec: GaussianSamplerSpec, index: int = 0) -> SpectralField:
    return SpectralField(spec.K, gaussian_draws(spec, index) * spec.standard_deviations)


def field_from_draws(g: np.ndarray, n: int) -> SpectralField:
    """Assemble the random Fourier series of level n from given Gaussian draws."""
    K = (len(g) - 1) // 2
    spec_scale = GaussianSamplerSpec(n=n, K=K, seed=0).standard_deviations
    return SpectralField(K, np.asarray(g) * spec_scale)


def sobolev_norm_moment(n: int, K: int, s: float) -> float:
    """Exact E ||u||_{H^s}^2 under the level-n measure truncated at K."""
    modes = np.arange(-K, K + 1).astype(np.float64)
    return float(np.sum((1.0 + modes**2) ** s / (1.0 + modes ** (2 * n))))


def chi_r(x: float, c: CutoffSpec, derivative: bool = False) -> float:
    """Smooth bump chi(x / R) (or its x-derivative); chi = 1 on [-1, 1], 0 outside (-2, 2)."""
    y = abs(x) / c.R
    if y <= 1.0 or y >= 2.0:
        return 0.0 if derivative or y >= 2.0 else 1.0
    shift = y - 1.0
    gap = 1.0 - shift * shift
    value = math.exp(1.0 - 1.0 / gap)
    if not derivative:
        return value
    return value * (-2.0 * shift / (gap * gap)) * math.copysign(1.0, x) / c.R


def weighted_density(u: SpectralField, n: int, R: float, N: int) -> float:
    """Cutoff product over E_1, E_3, ..., E_{2n-1} of P_N u times exp(-R_n(P_N u))."""
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}.")
    v = u.with_cutoff(min(N, u.K))
    cutoff = CutoffSpec(R)
    values = energies(v, 2 * n + 1)
    weight = 1.0
    for level in range(n):
        weight *= chi_r(values[2 * level + 1], cutoff)
        if weight == 0.0:
            return 0.0
    return weight * math.exp(-(values[2 * n + 1] - sobolev_seminorm_squared(v, n)))


def cutoff_radius(n: int, R: float) -> float:
    """C(R): bound on ||P_N u||_{H^{n-1}} wherever the cutoff product is positive.

    The cutoffs force |E_{2l+1}| < 2R, and ||d^l u||^2 = E_{2l+1} - R_l(u) is
    bounded level by level through p_l.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}.")
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}.")
    # E_1 = ||u||^2, and E_3 - ||u'||^2 = integral |u|^4 >= 0.
    seminorms = [2.0 * R, 2.0 * R]
    for level in range(2, n):
        below = _sobolev_square_from_seminorms(seminorms[:level])
        seminorms.append(2.0 * R + remainder_bound(level, math.sqrt(below)))
    return math.sqrt(_sobolev_square_from_seminorms(seminorms[:n]))


def density_log_bound(n: int, R: float) -> float:
    """p = p_n(C(R)), so that the weighted density never exceeds exp(p)."""
    radius = cutoff_radius(n, R)
    if n == 2:
        # R_2 is a sum of non-negative integrals.
        return 0.0
    return remainder_bound(n, radius)


def density_upper_bound(n: int, R: float) -> float:
    """Upper bound exp(p) for the weighted density over all fields and cutoffs N; inf on overflow."""
    try:
        return math.exp(density_log_bound(n, R))
    except OverflowError:
        return math.inf


def _sobolev_square_from_seminorms(seminorms: Sequence[float]) -> float:
    """||u||_{H^m}^2 = sum_i binom(m, i) ||d^i u||^2 with m = len(seminorms) - 1."""
    top = len(seminorms) - 1
    return sum(math.comb(top, index) * value for index, value in enumerate(seminorms))


def run_indexed(task: Callable[[int], T], count: int, workers: int = 1) -> list[T]:
    """Evaluate task(0..count-1) in index order, optionally across worker processes."""
    if workers <= 1 or count < 2:
        return [task(index) for index in range(count)]
    chunk = max(1, count // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, range(count), chunksize=chunk))


def mc_expectation(
    functional: FieldFunctional,
    spec: GaussianSamplerSpec,
    n_samples: int,
    workers: int = 1,
) -> McEstimate:
    if n_samples < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}.")
    values = run_indexed(partial(_evaluate_sample, functional, spec), n_samples, workers)
    return estimate_from_values(values, spec.seed)


def estimate_from_values(values: Sequence[float], seed: int) -> McEstimate:
    """Mean and standard error over finite values; non-finite values are flagged."""
    data = np.asarray(values, dtype=np.float64)
    finite = data[np.isfinite(data)]
    flagged = int(data.size - finite.size)
    if flagged:
        logger.warning(
            "%d of %d samples produced non-finite values and were flagged.",
            flagged,
            data.size,
            extra={"sample_indices": np.flatnonzero(~np.isfinite(data)).tolist()},
        )
    if finite.size == 0:
        return McEstimate(mean=math.nan, stderr=math.nan, n_samples=0, seed=seed, n_flagged=flagged)
    stderr = float(np.std(finite, ddof=1) / math.sqrt(finite.size)) if finite.size > 1 else 0.0
    return McEstimate(
        mean=float(np.mean(finite)),
        stderr=stderr,
        n_samples=int(finite.size),
        seed=seed,
        n_flagged=flagged,
    )


def tail_probability(
    spec: GaussianSamplerSpec,
    s: float,
    thresholds: Sequence[float],
    n_samples: int,
    min_exceedances: int = DEFAULT_MIN_EXCEEDANCES,
    workers: int = 1,
) -> TailResult:
    """Empirical P(||u||_{H^s} > M) with a weighted fit of log P against M^2."""
    if not s < spec.n - 0.5:
        raise ValueError(f"s must be below n - 1/2 = {spec.n - 0.5}, got {s}.")
    norms = np.asarray(sobolev_norms(spec, s, n_samples, workers))
    estimates: list[McEstimate] = []
    counts: list[int] = []
    for threshold in thresholds:
        hits = (norms > threshold).astype(np.float64)
        counts.append(int(hits.sum()))
        estimates.append(estimate_from_values(hits, spec.seed))

    xs, ys, weights, excluded = [], [], [], []
    for threshold, count in zip(thresholds, counts):
        probability = count / n_samples
        if count < min_exceedances or count == n_samples:
            excluded.append(float(threshold))
            continue
        xs.append(float(threshold) ** 2)
        ys.append(math.log(probability))
        weights.append(count * 1.0 / (1.0 - probability))
    if excluded:
        logger.warning("Excluded %d tail thresholds from the fit: %s", len(excluded), excluded)

    slope: float | None = None
    slope_stderr: float | None = None
    if len(xs) >= 3:
        slope, slope_stderr = weighted_line_fit(np.array(xs), np.array(ys), np.array(weights))
    return TailResult(
        thresholds=tuple(float(value) for value in thresholds),
        estimates=tuple(estimates),
        exceedances=tuple(counts),
        slope=slope,
        slope_stderr=slope_stderr,
        excluded=tuple(excluded),
    )


def sobolev_norms(spec: GaussianSamplerSpec, s: float, n_samples: int, workers: int = 1) -> list[float]:
    return run_indexed(partial(_sample_sobolev_norm, spec, s), n_samples, workers)


def weighted_line_fit(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Weighted least-squares slope with its standard error (weights are inverse variances)."""
    if x.size < 3:
        raise FitError("A line fit needs at least 3 points.")
    root = np.sqrt(weights)
    design = np.column_stack([np.ones_like(x), x]) * root[:, None]
    solution, _, rank, _ = np.linalg.lstsq(design, y * root, rcond=None)
    if rank < 2:
        raise FitError("Fit abscissae are degenerate.")
    residuals = y * root - design @ solution
    dof = x.size - 2
    sigma2 = float(residuals @ residuals) / dof
    covariance = sigma2 * np.linalg.inv(design.T @ design)
    return float(solution[1]), float(math.sqrt(max(covariance[1, 1], 0.0)))


def almost_invariance(
    radius: float,
    s: float,
    t: float,
    N_ladder: Sequence[int],
    n: int,
    R: float,
    spec: GaussianSamplerSpec,
    n_samples: int,
    dt: float | None = None,
    workers: int = 1,
) -> AlmostInvarianceResult:
    """Estimate rho(Phi_N(t) A) - rho(A) for the centered H^s ball A of the given radius.

    Each sample contributes F(u) * (1_A(Phi_N(-t) u) - 1_A(u)); the same samples
    are reused for every N in the ladder.
    """
    if not N_ladder:
        raise ValueError("N_ladder must not be empty.")
    if spec.K < 3 * max(N_ladder) + 1:
        raise ValueError(
            f"Sampler cutoff K={spec.K} cannot resolve the cubic term for N={max(N_ladder)}; "
            f"need K >= {3 * max(N_ladder) + 1}."
        )
    task = partial(_invariance_sample, spec, tuple(N_ladder), radius, s, t, n, R, dt)
    rows = np.asarray(run_indexed(task, n_samples, workers), dtype=np.float64).reshape(n_samples, len(N_ladder))
    flagged = tuple(int(index) for index in np.flatnonzero(~np.all(np.isfinite(rows), axis=1)))
    if len(flagged) > MAX_FLAGGED_FRACTION * n_samples:
        raise MkdvLabError(
            f"{len(flagged)} of {n_samples} samples blew up, above the {MAX_FLAGGED_FRACTION:.1%} limit."
        )
    series = tuple(
        (int(N), estimate_from_values(rows[:, column], spec.seed)) for column, N in enumerate(N_ladder)
    )
    return AlmostInvarianceResult(radius=radius, s=s, t=t, series=series, flagged_samples=flagged)


def _evaluate_sample(functional: FieldFunctional, spec: GaussianSamplerSpec, index: int) -> float:
    return float(functional(sample_mu(spec, index)))


def _sample_sobolev_norm(spec: GaussianSamplerSpec, s: float, index: int) -> float:
    return sobolev_norm(sample_mu(spec, index), s)


def _invariance_sample(
    spec: GaussianSamplerSpec,
    ladder: tuple[int, ...],
    radius: float,
    s: float,
    t: float,
    n: int,
    R: float,
    dt: float | None,
    index: int,
) -> list[float]:
    u = sample_mu(spec, index)
    inside_now = sobolev_norm(u, s) <= radius
    contributions: list[float] = []
    for N in ladder:
        density = weighted_density(u, n, R, N)
        if density == 0.0 or t == 0 or math.isinf(radius):
            contributions.append(0.0)
            continue
        params = FlowParams(N=N, K=spec.K, dt=dt if dt is not None else default_dt(u))
        try:
            back = evolve(u, -t, params)
        except FlowBlowUpError:
            contributions.append(math.nan)
            continue
        inside_before = sobolev_norm(back, s) <= radius
        contributions.append(density * (float(inside_before) - float(inside_now)))
    return contributions
