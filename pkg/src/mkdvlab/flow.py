"""Frequency-truncated mKdV flow, energy derivatives and flow diagnostics.

The truncated equation is u_t = -u_xxx + 6 P_N(|P_N u|^2 (P_N u)_x), where P_N
keeps modes |k| <= N. Modes above N evolve by the linear phase exp(i k^3 t).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Sequence

import numpy as np

from mkdvlab.errors import FlowBlowUpError
from mkdvlab.hierarchy import energies
from mkdvlab.models import JSONValue
from mkdvlab.spectral import (
    TWO_PI,
    SpectralField,
    bessel_multiplier,
    dealiased_product,
    derivative,
    integrate_product,
    product_coeffs,
    project_high,
    project_low,
    sobolev_norm,
    w1inf_norm,
)

logger = logging.getLogger(__name__)

INTEGRATOR = "IFRK4"
MAX_STEPS = 10**9
FD_BASE_STEP = 1e-4


@dataclass(frozen=True)
class FlowParams:
    """Truncation cutoff N, ambient cutoff K and step size of the integrator."""

    N: int
    K: int
    dt: float
    integrator: str = INTEGRATOR

    def __post_init__(self) -> None:
        if self.N < 0:
            raise ValueError(f"N must be non-negative, got {self.N}.")
        if self.K < self.N:
            raise ValueError(f"Ambient cutoff K={self.K} must be at least N={self.N}.")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}.")
        if self.integrator != INTEGRATOR:
            raise ValueError(f"Unsupported integrator '{self.integrator}'.")

    @property
    def resolves_cubic(self) -> bool:
        return self.K >= 3 * self.N + 1


@dataclass(frozen=True)
class TrajectoryRecord:
    """Sampled trajectory of the truncated flow with energy and norm series."""

    times: np.ndarray
    snapshots: tuple[SpectralField, ...]
    N: int
    energies: dict[int, np.ndarray]
    sobolev_series: dict[float, np.ndarray] = field(default_factory=dict)
    blow_up_time: float | None = None

    def __post_init__(self) -> None:
        if len(self.times) != len(self.snapshots):
            raise ValueError("Snapshot count must equal time count.")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("Trajectory times must be strictly increasing.")

    def csv_header(self) -> list[str]:
        header = ["t"] + [f"E{j}" for j in sorted(self.energies)]
        return header + [f"Hs_{s:g}" for s in sorted(self.sobolev_series)]

    def csv_rows(self) -> list[list[float]]:
        rows = []
        for index, time in enumerate(self.times):
            row = [float(time)]
            row.extend(float(self.energies[j][index]) for j in sorted(self.energies))
            row.extend(float(self.sobolev_series[s][index]) for s in sorted(self.sobolev_series))
            rows.append(row)
        return rows


def default_dt(u0: SpectralField) -> float:
    return min(1e-2, 0.1 / (1.0 + sobolev_norm(u0, 1.0) ** 2))


def linear_propagator(u0: SpectralField, t: float) -> SpectralField:
    return SpectralField(u0.K, u0.coeffs * _phase(u0.K, t))


def vector_field(u: SpectralField, N: int) -> SpectralField:
    modes = u.modes.astype(np.float64)
    linear = 1j * modes**3 * u.coeffs
    return SpectralField(u.K, linear + _nonlinear_term(u.coeffs, u.K, N))


def evolve(u0: SpectralField, t: float, p: FlowParams) -> SpectralField:
    """Integrating-factor RK4 approximation of the truncated flow at time t (t may be negative)."""
    _check_cutoff(u0, p)
    if t == 0:
        return u0
    state = _integrate(np.array(u0.coeffs), u0.K, p.N, t, p.dt, start_time=0.0)
    return SpectralField(u0.K, state)


def trajectory(
    u0: SpectralField,
    t_max: float,
    p: FlowParams,
    n_records: int = 11,
    s_values: Sequence[float] = (),
) -> TrajectoryRecord:
    """Record Pi_N energies and H^s norms at equally spaced times in [0, t_max]."""
    _check_cutoff(u0, p)
    if t_max < 0:
        raise ValueError(f"t_max must be non-negative, got {t_max}.")
    times = np.array([0.0]) if t_max == 0 else np.linspace(0.0, t_max, max(n_records, 2))
    snapshots = [u0]
    state = np.array(u0.coeffs)
    blow_up_time: float | None = None
    for previous, current in zip(times[:-1], times[1:]):
        try:
            state = _integrate(state, u0.K, p.N, current - previous, p.dt, start_time=previous)
        except FlowBlowUpError as exc:
            blow_up_time = exc.last_good_time
            logger.warning(
                "Trajectory stopped at t=%.6g after a non-finite state.", blow_up_time, extra={"flow_time": blow_up_time}
            )
            break
        snapshots.append(SpectralField(u0.K, state))
    kept = times[: len(snapshots)]
    series: dict[int, list[float]] = {1: [], 3: [], 5: []}
    for snapshot in snapshots:
        values = energies(_band(snapshot, p.N), 5)
        for j in series:
            series[j].append(values[j])
    return TrajectoryRecord(
        times=kept,
        snapshots=tuple(snapshots),
        N=p.N,
        energies={j: np.array(values) for j, values in series.items()},
        sobolev_series={
            float(s): np.array([sobolev_norm(snapshot, s) for snapshot in snapshots]) for s in s_values
        },
        blow_up_time=blow_up_time,
    )


def e_star(u: SpectralField, j: int, N: int, method: str = "analytic", h: float | None = None) -> float:
    """d/dt E_j(Pi_N Phi_N(t) u) at t = 0 for j in {3, 5}."""
    if j not in (3, 5):
        raise ValueError(f"j must be 3 or 5, got {j}.")
    if method == "analytic":
        if j == 3:
            return _e_star_3(u, N)
        return sum(e_star_terms(u, N).values())
    if method == "finite_difference":
        return e_star_finite_difference(u, j, N, h)
    raise ValueError(f"Unknown method '{method}'.")


def e_star_finite_difference(u: SpectralField, j: int, N: int, h: float | None = None) -> float:
    """Central difference in time with one Richardson level over h, h/2."""
    v = _band(u, N)
    step = fd_step(u) if h is None else h
    coarse = _central_difference(v, j, N, step)
    fine = _central_difference(v, j, N, step / 2.0)
    return (4.0 * fine - coarse) / 3.0


def fd_step(u: SpectralField) -> float:
    return FD_BASE_STEP / (1.0 + sobolev_norm(u, 1.0) ** 2)


def e_star_terms(u: SpectralField, N: int) -> dict[str, float]:
    """Term-by-term evaluation of the j = 5 energy derivative.

    The four surviving terms sum to e_star(u, 5, N). The two identically
    vanishing terms come from vanishing_e_star_terms.
    """
    v, high = _low_and_high_cubic(u, N)
    dv = derivative(v)
    dhigh = derivative(high)
    density = dealiased_product([v, v], 2 * v.K, [False, True])
    weighted_bar = dealiased_product([v, v, v], 3 * v.K, [False, True, True])
    return {
        "gradient_weight": -72.0
        * integrate_product([high, v, dv, dv], [False, True, False, True]).real,
        "density_gradient": -24.0
        * integrate_product([derivative(density), dv, high], [False, True, False]).real,
        "cubic_gradient": -24.0 * integrate_product([derivative(weighted_bar), dhigh]).real,
        "sextic": -72.0 * integrate_product([v, v, v, v, v, high], [False, True, False, True, True, False]).real,
    }


def vanishing_e_star_terms(u: SpectralField, N: int) -> dict[str, float]:
    """The two j = 5 terms that cancel by frequency support and integration by parts."""
    v, high = _low_and_high_cubic(u, N)
    dv = derivative(v)
    dhigh = derivative(high)
    return {
        "top_order": -12.0 * integrate_product([derivative(high, 2), derivative(v, 2)], [False, True]).real,
        "density_weighted": -48.0
        * integrate_product([v, v, dv, dhigh], [False, True, True, False]).real,
    }


def identity_residuals(u: SpectralField, N: int) -> dict[str, float]:
    """Quantities that vanish exactly by frequency support or integration by parts."""
    v, high = _low_and_high_cubic(u, N)
    dv = derivative(v)
    residuals = {
        "high_low_gradient": abs(integrate_product([derivative(high), dv], [False, True])),
        "density_weighted": 2.0
        * integrate_product([v, v, dv, derivative(high)], [False, True, True, False]).real,
    }
    for order in (2, 3):
        flux = dealiased_product([v, v, derivative(v, order - 1)], 3 * v.K, [False, True, False])
        residuals[f"ipp_order_{order}"] = integrate_product(
            [flux, derivative(project_high(flux, N))], [True, False]
        ).real
    return residuals


def leading_estar_functional(u: SpectralField, N: int, n: int = 2) -> float:
    """Re of the integral of d^{n-1}(|v|^2 conj v) * d^{n-1} P_{>N}(|v|^2 v_x), v = P_N u."""
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}.")
    v, high = _low_and_high_cubic(u, N)
    weighted_bar = dealiased_product([v, v, v], 3 * v.K, [False, True, True])
    return integrate_product([derivative(weighted_bar, n - 1), derivative(high, n - 1)]).real


def gradient_weight_functional(u: SpectralField, N: int) -> float:
    """Re of the integral of P_{>N}(|v|^2 v_x) * conj(v) * |v_x|^2."""
    v, high = _low_and_high_cubic(u, N)
    dv = derivative(v)
    return integrate_product([high, v, dv, dv], [False, True, False, True]).real


def squared_gradient_functional(u: SpectralField, N: int) -> float:
    """Re of the integral of P_{>N}(|v|^2 v_x) * conj(v_x)^2 * v."""
    v, high = _low_and_high_cubic(u, N)
    dv = derivative(v)
    return integrate_product([high, dv, dv, v], [False, True, True, False]).real


def sobolev_rate(u: SpectralField, s: float, N: int) -> tuple[float, float]:
    """Rate d/dt ||J^s P_N u||^2 along the truncated flow and its ratio to ||J^s v||^3 ||v||_{W^{1,inf}}."""
    v = _band(u, N)
    cubic = dealiased_product([v, v, derivative(v)], N, [False, True, False])
    rate = 12.0 * integrate_product(
        [bessel_multiplier(cubic, s), bessel_multiplier(v, s)], [False, True]
    ).real
    scale = sobolev_norm(v, s) ** 2 * w1inf_norm(v)
    return rate, rate / scale if scale > 0 else 0.0


def conservation_report(
    traj: TrajectoryRecord,
    N: int,
    refined: TrajectoryRecord | None = None,
) -> dict[str, JSONValue]:
    """Relative energy drifts along a trajectory plus initial rates of E_3 and E_5."""
    report: dict[str, JSONValue] = {"N": N, "samples": int(len(traj.times))}
    for j, series in sorted(traj.energies.items()):
        report[f"E{j}_drift"] = _relative_drift(series)
    if len(traj.times) >= 3:
        spacing = float(traj.times[1] - traj.times[0])
        for j in (3, 5):
            series = traj.energies[j]
            report[f"dE{j}_dt_initial"] = float(
                (-3.0 * series[0] + 4.0 * series[1] - series[2]) / (2.0 * spacing)
            )
    if refined is not None:
        for j in sorted(traj.energies):
            coarse = _absolute_drift(traj.energies[j])
            fine = _absolute_drift(refined.energies[j])
            report[f"E{j}_refinement_factor"] = coarse / fine if fine > 0 else None
    if traj.blow_up_time is not None:
        report["blow_up_time"] = traj.blow_up_time
    return report


def divergence_check(u: SpectralField, N: int, h: float) -> float:
    """Central-difference divergence of the truncated vector field over the modes |k| <= N."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}.")
    band = min(N, u.K)
    base = np.array(u.coeffs[u.K - band : u.K + band + 1])
    total = 0.0
    for index in range(base.size):
        for direction in (1.0, 1j):
            plus = base.copy()
            minus = base.copy()
            plus[index] += h * direction
            minus[index] -= h * direction
            forward = _band_vector_field(plus, band)[index]
            backward = _band_vector_field(minus, band)[index]
            component = (forward - backward) / (2.0 * h)
            total += component.real if direction == 1.0 else component.imag
    return abs(total)


def w1inf_time_integral(traj: TrajectoryRecord, N: int) -> float:
    if len(traj.times) < 2:
        raise ValueError("Trajectory needs at least two samples.")
    values = np.array([w1inf_norm(project_low(snapshot, N)) for snapshot in traj.snapshots])
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(traj.times)))


def cauchy_gap(u0: SpectralField, N: int, M: int, t_max: float, p: FlowParams, n_times: int = 11) -> float:
    """Largest L2 distance between the N- and M-truncated flows at sampled times in [0, t_max]."""
    if N > M:
        raise ValueError(f"Expected N <= M, got N={N}, M={M}.")
    if t_max == 0 or N == M:
        return 0.0
    coarse = FlowParams(N=N, K=p.K, dt=p.dt)
    fine = FlowParams(N=M, K=p.K, dt=p.dt)
    _check_cutoff(u0, fine)
    times = np.linspace(0.0, t_max, max(n_times, 2))
    left = np.array(u0.coeffs)
    right = np.array(u0.coeffs)
    gap = 0.0
    for previous, current in zip(times[:-1], times[1:]):
        left = _integrate(left, u0.K, coarse.N, current - previous, p.dt, start_time=previous)
        right = _integrate(right, u0.K, fine.N, current - previous, p.dt, start_time=previous)
        gap = max(gap, math.sqrt(TWO_PI * float(np.sum(np.abs(left - right) ** 2))))
    return gap


def _integrate(state: np.ndarray, K: int, N: int, t: float, dt: float, start_time: float) -> np.ndarray:
    steps = math.ceil(abs(t) / dt)
    if steps > MAX_STEPS:
        raise ValueError(f"|t|/dt = {abs(t) / dt:.3g} exceeds the step guard of {MAX_STEPS}.")
    if steps == 0:
        return state
    h = t / steps
    half = _phase(K, 0.5 * h)
    full = half * half
    current = state
    for index in range(steps):
        k1 = _nonlinear_term(current, K, N)
        k2 = _nonlinear_term(half * (current + 0.5 * h * k1), K, N)
        k3 = _nonlinear_term(half * current + 0.5 * h * k2, K, N)
        k4 = _nonlinear_term(full * current + h * half * k3, K, N)
        candidate = full * current + (h / 6.0) * (full * k1 + 2.0 * half * (k2 + k3) + k4)
        if not np.all(np.isfinite(candidate)):
            raise FlowBlowUpError("Non-finite state in the integrator", start_time + index * h)
        current = candidate
    return current


def _nonlinear_term(coeffs: np.ndarray, K: int, N: int) -> np.ndarray:
    band = min(N, K)
    v = coeffs[K - band : K + band + 1]
    dv = v * (1j * np.arange(-band, band + 1))
    cubic = product_coeffs([v, v, dv], [band] * 3, [False, True, False], band)
    result = np.zeros_like(coeffs, dtype=np.complex128)
    result[K - band : K + band + 1] = 6.0 * cubic
    return result


def _band_vector_field(coeffs: np.ndarray, band: int) -> np.ndarray:
    modes = np.arange(-band, band + 1).astype(np.float64)
    return 1j * modes**3 * coeffs + _nonlinear_term(coeffs, band, band)


def _phase(K: int, t: float) -> np.ndarray:
    modes = np.arange(-K, K + 1).astype(np.float64)
    return np.exp(1j * modes**3 * t)


def _band(u: SpectralField, N: int) -> SpectralField:
    """P_N u stored with cutoff min(N, K)."""
    return u.with_cutoff(min(N, u.K))


def _low_and_high_cubic(u: SpectralField, N: int) -> tuple[SpectralField, SpectralField]:
    v = _band(u, N)
    cubic = dealiased_product([v, v, derivative(v)], 3 * v.K, [False, True, False])
    return v, project_high(cubic, N)


def _e_star_3(u: SpectralField, N: int) -> float:
    v, high = _low_and_high_cubic(u, N)
    return -24.0 * integrate_product([high, v, v, v], [False, True, False, True]).real


def _central_difference(v: SpectralField, j: int, N: int, h: float) -> float:
    params = FlowParams(N=v.K, K=v.K, dt=h)
    forward = energies(evolve(v, h, params), j)[j]
    backward = energies(evolve(v, -h, params), j)[j]
    return (forward - backward) / (2.0 * h)


def _check_cutoff(u: SpectralField, p: FlowParams) -> None:
    if u.K != p.K:
        raise ValueError(f"Field cutoff {u.K} does not match FlowParams.K={p.K}.")


def _relative_drift(series: np.ndarray) -> float:
    reference = abs(float(series[0]))
    drift = _absolute_drift(series)
    return drift / reference if reference > 0 else drift


def _absolute_drift(series: np.ndarray) -> float:
    return float(np.max(np.abs(series - series[0]))) if len(series) else 0.0
