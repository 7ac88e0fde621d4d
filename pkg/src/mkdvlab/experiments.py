"""Experiment orchestration: one subcommand in, one structured ExperimentResult out."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from time import perf_counter
from typing import Callable, Sequence

import numpy as np

from mkdvlab.errors import FitError, FlowBlowUpError, MkdvLabError
from mkdvlab.flow import (
    FlowParams,
    cauchy_gap,
    conservation_report,
    default_dt,
    e_star,
    e_star_terms,
    evolve,
    fd_step,
    sobolev_rate,
    trajectory,
    vanishing_e_star_terms,
    w1inf_time_integral,
)
from mkdvlab.hierarchy import energy_report
from mkdvlab.lab_debug import LabWarningCollector, capture_lab_warnings, ensure_no_lab_warnings
from mkdvlab.measures import (
    GaussianSamplerSpec,
    almost_invariance,
    gaussian_draws,
    sample_mu,
    sobolev_norm_moment,
    sobolev_norms,
    tail_probability,
)
from mkdvlab.models import ExperimentResult, JSONValue, RunConfig
from mkdvlab.pairing import (
    WICK_MAX_N,
    CoefficientKind,
    FamilyTag,
    annal_bound,
    decay_fit,
    estar_l2_decay,
    pathwise_sums,
    wick_second_moment,
)
from mkdvlab.spectral import (
    TWO_PI,
    SpectralField,
    read_field_json,
    sobolev_norm,
    spectrum_rows,
    write_field_json,
)

logger = logging.getLogger(__name__)

STREAM_SAMPLER = 0
STREAM_MC = 1
STREAM_INITIAL = 2
STREAM_PAIRING = 3
SNAPSHOT_LIMIT = 10
TILDE_DRAWS = 5
TAIL_QUANTILES = (50, 70, 85, 93, 97, 99)


@dataclass
class _Outcome:
    outputs: list[Path] = field(default_factory=list)
    summary: dict[str, JSONValue] = field(default_factory=dict)


Runner = Callable[[RunConfig, Path, _Outcome], None]


def run_experiment(config: RunConfig) -> ExperimentResult:
    """Run one experiment; failures are recorded on the result, never raised."""
    outcome = _Outcome()
    errors: list[str] = []
    collector = LabWarningCollector(experiment=config.experiment)
    start = perf_counter()

    try:
        runner = _RUNNERS.get(config.experiment)
        if runner is None:
            raise MkdvLabError(f"Unknown experiment '{config.experiment}'.")
        with capture_lab_warnings(collector):
            runner(config, Path(config.output_dir), outcome)
        if config.strict:
            ensure_no_lab_warnings(collector)
    except FlowBlowUpError as exc:
        errors.append(f"flow_blow_up: {exc}")
        outcome.summary["last_good_time"] = exc.last_good_time
    except Exception as exc:  # noqa: BLE001 - every failure becomes part of the report
        errors.append(f"{type(exc).__name__}: {exc}")
    elapsed = round(perf_counter() - start, 6)

    warnings = list(dict.fromkeys(collector.messages))
    logger.info("Experiment %s finished in %.3fs with %d error(s).", config.experiment, elapsed, len(errors))
    return ExperimentResult(
        experiment=config.experiment,
        status="failed" if errors else "ok",
        outputs=[str(path) for path in outcome.outputs],
        summary=outcome.summary,
        warnings=warnings,
        errors=errors,
        timings={"total_seconds": elapsed},
        lab_warnings_count=len(collector.events),
        warning_stages=collector.stage_counts(),
    )


def initial_field(config: RunConfig, K: int, index: int = 0) -> SpectralField:
    """Initial data selected by config.mode, embedded at cutoff K."""
    if config.mode == "plane_wave":
        if abs(config.wave_number) > K:
            raise MkdvLabError(f"wave_number {config.wave_number} exceeds cutoff {K}.")
        return SpectralField.from_modes({config.wave_number: config.amplitude}, K)
    if config.mode == "file":
        if config.field_json is None:
            raise MkdvLabError("mode 'file' needs field_json.")
        return read_field_json(Path(config.field_json)).with_cutoff(K)
    if config.mode == "band_limited":
        band = max(min(config.N_ladder) // 3, 1)
        spec = GaussianSamplerSpec(n=config.n, K=min(band, K), seed=config.seed, stream_id=STREAM_INITIAL)
        return sample_mu(spec, index).with_cutoff(K)
    spec = GaussianSamplerSpec(n=config.n, K=K, seed=config.seed, stream_id=STREAM_INITIAL)
    return sample_mu(spec, index)


def sobolev_profile(K: int, s: float, amplitude: float, seed: int) -> SpectralField:
    """Random phases with |u_k| proportional to (1 + k^2)^(-(s + 1)/2), scaled to ||u||_{H^s} = amplitude."""
    modes = np.arange(-K, K + 1).astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_INITIAL,)))
    phases = np.exp(2j * np.pi * rng.random(2 * K + 1))
    raw = SpectralField(K, phases * (1.0 + modes**2) ** (-(s + 1.0) / 2.0))
    return raw * (amplitude / sobolev_norm(raw, s))


def plane_wave_solution(k: int, amplitude: float, t: float, N: int, K: int) -> SpectralField:
    """Exact truncated-flow solution for a single mode; the cubic term acts only when |k| <= N."""
    omega = k**3 + (6.0 * amplitude**2 * k if abs(k) <= N else 0.0)
    return SpectralField.from_modes({k: amplitude * np.exp(1j * omega * t)}, K)


def _run_sample(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    K = config.ambient_cutoff
    spec = GaussianSamplerSpec(n=config.n, K=K, seed=config.seed, stream_id=STREAM_SAMPLER)
    fields = [sample_mu(spec, index) for index in range(config.n_samples)]
    for index, sample in enumerate(fields[:SNAPSHOT_LIMIT]):
        outcome.outputs.append(
            write_field_json(
                sample,
                out_dir / f"state_sample_{index:05d}.json",
                {"n": config.n, "seed": config.seed, "index": index},
            )
        )
    modes = np.arange(-K, K + 1).astype(np.float64)
    expected = 1.0 / (TWO_PI * (1.0 + modes ** (2 * config.n)))
    rows = [
        [row["k"], row["mean_abs2"], row["stderr"], float(expected[int(row["k"]) + K])]  # type: ignore[arg-type]
        for row in spectrum_rows(fields)
    ]
    outcome.outputs.append(
        _write_csv(out_dir / "sample_spectrum.csv", ["k", "mean_abs2", "stderr", "expected"], rows)
    )

    norms = np.array([sobolev_norm(sample, 0.0) ** 2 for sample in fields])
    outcome.summary.update(
        {
            "K": K,
            "n_samples": config.n_samples,
            "l2_squared_mean": float(norms.mean()),
            "l2_squared_stderr": _stderr(norms),
            "l2_squared_expected": sobolev_norm_moment(config.n, K, 0.0),
        }
    )
    for s in config.s_values:
        outcome.summary[f"hs_squared_expected_{s:g}"] = sobolev_norm_moment(config.n, K, s)

    tail_rows: list[list[JSONValue]] = []
    for s in config.s_values:
        if not s < config.n - 0.5:
            logger.warning("tail fit skipped for s=%g: samples of level n=%d are not in H^s.", s, config.n)
            continue
        levels = np.array([sobolev_norm(sample, s) for sample in fields])
        thresholds = [float(np.percentile(levels, q)) for q in TAIL_QUANTILES]
        tail = tail_probability(spec, s, thresholds, config.n_samples, workers=config.workers)
        tail_rows.extend(
            [s, threshold, item.mean, item.stderr, hits, threshold in tail.excluded]
            for threshold, item, hits in zip(tail.thresholds, tail.estimates, tail.exceedances)
        )
        outcome.summary[f"tail_slope_{s:g}"] = tail.slope
        outcome.summary[f"tail_slope_t_{s:g}"] = tail.t_statistic
    outcome.outputs.append(
        _write_csv(
            out_dir / "sample_tail.csv",
            ["s", "threshold", "probability", "stderr", "exceedances", "excluded"],
            tail_rows,
        )
    )


def _run_evolve(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    K = config.ambient_cutoff
    N = config.max_N
    u0 = initial_field(config, K)
    dt = config.dt if config.dt is not None else default_dt(u0)
    params = FlowParams(N=N, K=K, dt=dt)
    if not params.resolves_cubic:
        logger.warning("K=%d is below 3N+1=%d; cubic frequencies above K are dropped.", K, 3 * N + 1)
    outcome.summary.update({"N": N, "K": K, "dt": dt, "t": config.t})

    record = trajectory(u0, config.t, params, config.n_records, config.s_values)
    outcome.outputs.extend(
        [
            _write_csv(out_dir / "evolve_trajectory.csv", record.csv_header(), record.csv_rows()),
            write_field_json(record.snapshots[0], out_dir / "state_evolve_initial.json", {"t": 0.0}),
            write_field_json(
                record.snapshots[-1], out_dir / "state_evolve_final.json", {"t": float(record.times[-1])}
            ),
        ]
    )
    outcome.summary.update(conservation_report(record, N))
    level = max(config.n, 2)
    reports = {
        "initial": energy_report(record.snapshots[0].with_cutoff(N), level),
        "final": energy_report(record.snapshots[-1].with_cutoff(N), level),
    }
    outcome.outputs.append(
        _write_json(out_dir / "evolve_energies.json", {name: report.to_dict() for name, report in reports.items()})
    )
    outcome.summary[f"R{level}_initial"] = reports["initial"].remainder
    outcome.summary[f"R{level}_final"] = reports["final"].remainder
    for s in config.s_values:
        rate, ratio = sobolev_rate(u0, s, N)
        outcome.summary[f"sobolev_rate_{s:g}"] = rate
        outcome.summary[f"sobolev_rate_ratio_{s:g}"] = ratio
    if record.blow_up_time is not None:
        raise FlowBlowUpError("trajectory stopped on a non-finite state", record.blow_up_time)
    if len(record.times) >= 2:
        outcome.summary["w1inf_time_integral"] = w1inf_time_integral(record, N)
    if config.t != 0:
        half = evolve(u0, config.t, FlowParams(N=N, K=K, dt=dt / 2.0))
        quarter = evolve(u0, config.t, FlowParams(N=N, K=K, dt=dt / 4.0))
        fine_gap = _l2_distance(half, quarter)
        coarse_gap = _l2_distance(record.snapshots[-1], half)
        outcome.summary["dt_refinement_ratio"] = coarse_gap / fine_gap if fine_gap > 0 else None
    if config.mode == "plane_wave":
        exact = plane_wave_solution(config.wave_number, config.amplitude, float(record.times[-1]), N, K)
        outcome.summary["plane_wave_error"] = _l2_distance(record.snapshots[-1], exact)


def _run_estar(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    K = config.ambient_cutoff
    header = ["sample", "N", "j", "analytic", "fd", "fd_half", "diff", "diff_half", "ratio"]
    rows: list[list[JSONValue]] = []
    term_rows: list[list[JSONValue]] = []
    relative: list[float] = []
    ratios: list[float] = []
    for index in range(config.n_samples):
        u = initial_field(config, K, index)
        h = config.h if config.h is not None else fd_step(u)
        for N in config.N_ladder:
            for j in config.j:
                analytic = e_star(u, j, N, "analytic")
                fd = e_star(u, j, N, "finite_difference", h)
                fd_half = e_star(u, j, N, "finite_difference", h / 2.0)
                diff = abs(analytic - fd)
                ratio = analytic / fd if fd != 0 else None
                rows.append([index, N, j, analytic, fd, fd_half, diff, abs(analytic - fd_half), ratio])
                relative.append(diff / (1.0 + abs(fd)))
                if ratio is not None:
                    ratios.append(ratio)
            terms = {**e_star_terms(u, N), **vanishing_e_star_terms(u, N)}
            term_rows.extend([index, N, name, value] for name, value in terms.items())
    outcome.outputs.append(_write_csv(out_dir / "estar.csv", header, rows))
    outcome.outputs.append(_write_csv(out_dir / "estar_terms.csv", ["sample", "N", "term", "value"], term_rows))
    outcome.summary.update(
        {
            "K": K,
            "rows": len(rows),
            "max_relative_difference": max(relative, default=0.0),
            "median_ratio": float(np.median(ratios)) if ratios else None,
        }
    )


def _run_decay(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    families = [FamilyTag.parse(text) for text in config.family]
    kinds = [CoefficientKind.parse(text) for text in config.kind]
    header = ["N", "family", "kind", "bound", "wick", "mc_mean", "mc_stderr", "tilde_im_max"]
    rows: list[list[JSONValue]] = []
    bounds: dict[str, list[tuple[float, float]]] = {}

    for N in config.N_ladder:
        tilde_im = _tilde_imaginary_max(N, config.seed) if N <= config.mc_max_N else None
        draws = None
        if N <= config.mc_max_N:
            spec = GaussianSamplerSpec(n=2, K=N, seed=config.seed, stream_id=STREAM_PAIRING)
            draws = np.array([gaussian_draws(spec, index) for index in range(config.n_samples)])
        for family in families:
            for kind in kinds:
                bound = annal_bound(N, family, kind)
                wick: JSONValue = wick_second_moment(N, family, kind) if N <= WICK_MAX_N else "MC"
                mc_mean: float | None = None
                mc_stderr: float | None = None
                if draws is not None:
                    squares = np.abs(pathwise_sums(N, family, kind, draws)) ** 2
                    mc_mean = float(squares.mean())
                    mc_stderr = _stderr(squares)
                rows.append([N, str(family), str(kind), bound, wick, mc_mean, mc_stderr, tilde_im])
                bounds.setdefault(f"{family}/{kind}", []).append((float(N), bound))
        logger.info("Decay tables done for N=%d.", N)

    fits: dict[str, JSONValue] = {}
    for key, points in bounds.items():
        positive = [point for point in points if point[1] > 0]
        try:
            slope, stderr = decay_fit(positive)
        except FitError as exc:
            logger.warning("decay fit skipped for %s: %s", key, exc)
            continue
        fits[key] = {"slope": slope, "stderr": stderr, "points": len(positive)}
    outcome.outputs.append(_write_csv(out_dir / "decay.csv", header, rows))

    estar_rows: list[list[JSONValue]] = []
    if config.n == 2:
        spec = GaussianSamplerSpec(n=2, K=config.ambient_cutoff, seed=config.seed, stream_id=STREAM_MC)
        for j in config.j:
            series = estar_l2_decay(j, config.N_ladder, config.R, spec, config.n_samples, config.workers)
            estar_rows.extend([j, N, item.mean, item.stderr, item.n_samples] for N, item in series)
        outcome.outputs.append(
            _write_csv(out_dir / "decay_estar.csv", ["j", "N", "mean", "stderr", "n_samples"], estar_rows)
        )
    else:
        logger.warning("energy-derivative decay skipped: level n=%d is not 2.", config.n)
    outcome.outputs.append(_write_json(out_dir / "decay_fits.json", fits))

    tilde_values = [row[-1] for row in rows if row[-1] is not None]
    outcome.summary.update(
        {
            "fits": fits,
            "tilde_im_max": max(tilde_values, default=None),  # type: ignore[type-var]
            "families": [str(family) for family in families],
            "kinds": [str(kind) for kind in kinds],
        }
    )


def _run_invariance(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    K = config.ambient_cutoff
    s = config.s_values[0]
    spec = GaussianSamplerSpec(n=config.n, K=K, seed=config.seed, stream_id=STREAM_SAMPLER)
    radius = config.radius
    if radius is None:
        radius = float(np.median(sobolev_norms(spec, s, config.n_samples, config.workers)))
    outcome.summary.update({"radius": radius, "s": s, "t": config.t})

    def estimate(case_radius: float, case_t: float):
        return almost_invariance(
            radius=case_radius,
            s=s,
            t=case_t,
            N_ladder=config.N_ladder,
            n=config.n,
            R=config.R,
            spec=spec,
            n_samples=config.n_samples,
            dt=config.dt,
            workers=config.workers,
        )

    cases = [
        ("main", estimate(radius, config.t)),
        ("t0", estimate(radius, 0.0)),
        ("radius_inf", estimate(math.inf, config.t)),
    ]
    header = ["case", "N", "defect_mean", "defect_stderr", "n_samples", "n_flagged"]
    rows = [
        [case, N, item.mean, item.stderr, item.n_samples, item.n_flagged]
        for case, result in cases
        for N, item in result.series
    ]
    outcome.outputs.append(_write_csv(out_dir / "invariance.csv", header, rows))

    main = cases[0][1]
    magnitudes = [abs(item.mean) for _, item in main.series]
    errors = [item.stderr for _, item in main.series]
    last = main.series[-1][1]
    outcome.summary.update(
        {
            "nonincreasing_within_errors": all(
                magnitudes[index + 1] <= magnitudes[index] + errors[index] + errors[index + 1]
                for index in range(len(magnitudes) - 1)
            ),
            "largest_N_z_score": last.mean / last.stderr if last.stderr > 0 else 0.0,
            "flagged_samples": list(main.flagged_samples),
        }
    )


def _run_converge(config: RunConfig, out_dir: Path, outcome: _Outcome) -> None:
    K = config.K if config.K is not None else 6 * config.max_N + 1
    s = config.s_values[0]
    u0 = sobolev_profile(K, s, config.amplitude, config.seed) if config.mode == "random" else initial_field(config, K)
    dt = config.dt if config.dt is not None else default_dt(u0)
    rows: list[list[JSONValue]] = []
    points: list[tuple[float, float]] = []
    for N in config.N_ladder:
        M = min(2 * N, K)
        gap = cauchy_gap(u0, N, M, config.t, FlowParams(N=M, K=K, dt=dt), config.n_records)
        rows.append([N, M, gap])
        if gap > 0:
            points.append((float(N), gap))
    outcome.outputs.append(_write_csv(out_dir / "converge.csv", ["N", "M", "gap"], rows))
    outcome.summary.update({"K": K, "s": s, "dt": dt, "max_gap": max((float(row[2]) for row in rows), default=0.0)})  # type: ignore[arg-type]
    try:
        slope, stderr = decay_fit(points)
    except FitError as exc:
        logger.warning("rate fit skipped: %s", exc)
        return
    outcome.summary.update({"slope": slope, "slope_stderr": stderr})


def _tilde_imaginary_max(N: int, seed: int) -> float:
    """Largest |Im| of the combined TildeI(2,6) + TildeI(3,6) sum over a few draws; zero up to rounding."""
    spec = GaussianSamplerSpec(n=2, K=N, seed=seed, stream_id=STREAM_PAIRING)
    draws = np.array([gaussian_draws(spec, index) for index in range(TILDE_DRAWS)])
    kind = CoefficientKind("A")
    total = pathwise_sums(N, FamilyTag("TildeI", 2, 6), kind, draws) + pathwise_sums(
        N, FamilyTag("TildeI", 3, 6), kind, draws
    )
    return float(np.max(np.abs(total.imag)))


def _stderr(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0


def _l2_distance(left: SpectralField, right: SpectralField) -> float:
    return sobolev_norm(left - right, 0.0)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[JSONValue]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(["" if value is None else value for value in row] for row in rows)
    return path


def _write_json(path: Path, payload: JSONValue) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


_RUNNERS: dict[str, Runner] = {
    "sample": _run_sample,
    "evolve": _run_evolve,
    "estar": _run_estar,
    "decay": _run_decay,
    "invariance": _run_invariance,
    "converge": _run_converge,
}
