"""Tests for the truncated flow, its integrator and the energy-derivative functionals."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from mkdvlab.errors import FlowBlowUpError
from mkdvlab.experiments import sobolev_profile
from mkdvlab.flow import (
    FlowParams,
    TrajectoryRecord,
    cauchy_gap,
    conservation_report,
    default_dt,
    divergence_check,
    e_star,
    e_star_terms,
    evolve,
    identity_residuals,
    linear_propagator,
    sobolev_rate,
    trajectory,
    vanishing_e_star_terms,
    vector_field,
    w1inf_time_integral,
)
from mkdvlab.pairing import decay_fit
from mkdvlab.spectral import (
    SpectralField,
    derivative,
    integrate_product,
    project_high,
    project_low,
    sobolev_norm,
)
from tests.field_factory import plane_wave, random_field


def _exact_plane_wave(k: int, amplitude: float, t: float, K: int) -> SpectralField:
    return plane_wave(k, K, amplitude * np.exp(1j * (k**3 + 6.0 * amplitude**2 * k) * t))


def _distance(left: SpectralField, right: SpectralField) -> float:
    return sobolev_norm(left - right, 0.0)


def test_flow_params_validation() -> None:
    assert FlowParams(N=4, K=13, dt=0.01).resolves_cubic
    assert not FlowParams(N=4, K=8, dt=0.01).resolves_cubic
    with pytest.raises(ValueError, match="Ambient cutoff"):
        FlowParams(N=5, K=4, dt=0.01)
    with pytest.raises(ValueError, match="dt"):
        FlowParams(N=2, K=7, dt=0.0)
    with pytest.raises(ValueError, match="integrator"):
        FlowParams(N=2, K=7, dt=0.1, integrator="Euler")


def test_vector_field_cases() -> None:
    high = plane_wave(3, 7)
    assert vector_field(high, 2).coefficient(3) == pytest.approx(27j)
    low = plane_wave(1, 7, 0.5)
    assert vector_field(low, 2).coefficient(1) == pytest.approx(1j * (1.0 + 6.0 * 0.25) * 0.5)
    assert np.allclose(vector_field(SpectralField.zeros(7), 2).coeffs, 0.0)


def test_evolve_plane_wave_matches_closed_form() -> None:
    u0 = plane_wave(1, 7, 0.5)
    result = evolve(u0, 1.0, FlowParams(N=2, K=7, dt=1e-3))
    assert _distance(result, _exact_plane_wave(1, 0.5, 1.0, 7)) < 1e-8


def test_evolve_error_is_fourth_order() -> None:
    u0 = plane_wave(1, 7, 0.5)
    exact = _exact_plane_wave(1, 0.5, 1.0, 7)
    coarse = _distance(evolve(u0, 1.0, FlowParams(N=2, K=7, dt=0.1)), exact)
    fine = _distance(evolve(u0, 1.0, FlowParams(N=2, K=7, dt=0.05)), exact)
    assert 16.0 * 0.8 <= coarse / fine <= 16.0 * 1.2


def test_evolve_high_mode_is_linear_and_exact() -> None:
    u0 = plane_wave(3, 4)
    result = evolve(u0, 0.7, FlowParams(N=1, K=4, dt=0.01))
    assert np.allclose(result.coeffs, linear_propagator(u0, 0.7).coeffs, atol=1e-12)


def test_evolve_zero_time_is_identity() -> None:
    u0 = random_field(7, seed=1)
    assert evolve(u0, 0.0, FlowParams(N=2, K=7, dt=0.1)) is u0


def test_evolve_rejects_cutoff_mismatch() -> None:
    with pytest.raises(ValueError, match="does not match"):
        evolve(random_field(5, seed=1), 0.1, FlowParams(N=1, K=7, dt=0.1))


def test_linear_propagator() -> None:
    u0 = plane_wave(1, 2)
    assert np.array_equal(linear_propagator(u0, 0.0).coeffs, u0.coeffs)
    assert linear_propagator(u0, math.pi).coefficient(1) == pytest.approx(-1.0)
    random = random_field(6, seed=2)
    assert sobolev_norm(linear_propagator(random, 1.3), 1.5) == pytest.approx(sobolev_norm(random, 1.5), rel=1e-13)


def test_group_property() -> None:
    u0 = random_field(13, seed=3, decay=2.0)
    p = FlowParams(N=4, K=13, dt=1e-3)
    split = evolve(evolve(u0, 0.2, p), 0.3, p)
    assert _distance(split, evolve(u0, 0.5, p)) < 1e-8


def test_backward_evolution_inverts_forward() -> None:
    u0 = random_field(13, seed=4, decay=2.0)
    p = FlowParams(N=4, K=13, dt=1e-3)
    assert _distance(evolve(evolve(u0, 0.3, p), -0.3, p), u0) < 1e-8


def test_l2_conservation_and_high_tail_isometry() -> None:
    u0 = random_field(13, seed=5, decay=2.0)
    p = FlowParams(N=4, K=13, dt=1e-3)
    result = evolve(u0, 0.5, p)
    assert sobolev_norm(result, 0.0) == pytest.approx(sobolev_norm(u0, 0.0), rel=1e-9)
    assert sobolev_norm(project_high(result, 4), 1.0) == pytest.approx(
        sobolev_norm(project_high(u0, 4), 1.0), rel=1e-12
    )


def test_e_star_vanishes_for_low_band_data() -> None:
    u = random_field(28, seed=6, band=3)
    for j in (3, 5):
        assert abs(e_star(u, j, 9, "analytic")) < 1e-12
        assert abs(e_star(u, j, 9, "finite_difference")) < 1e-6
    assert e_star(SpectralField.zeros(10), 3, 3) == 0.0


@pytest.mark.parametrize("j", [3, 5])
@pytest.mark.parametrize("seed", [7, 8])
def test_e_star_analytic_matches_finite_difference(j: int, seed: int) -> None:
    u = random_field(25, seed=seed, decay=2.0)
    analytic = e_star(u, j, 8, "analytic")
    numeric = e_star(u, j, 8, "finite_difference")
    assert abs(analytic - numeric) <= 1e-6 * (1.0 + abs(numeric))


def test_e_star_rejects_bad_arguments() -> None:
    u = random_field(7, seed=9)
    with pytest.raises(ValueError):
        e_star(u, 4, 2)
    with pytest.raises(ValueError):
        e_star(u, 3, 2, "spline")


def test_e_star_terms_sum_to_analytic_value() -> None:
    u = random_field(25, seed=10, decay=2.0)
    terms = e_star_terms(u, 8)
    assert set(terms) == {"gradient_weight", "density_gradient", "cubic_gradient", "sextic"}
    assert sum(terms.values()) == pytest.approx(e_star(u, 5, 8), rel=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_cancellation_identities_vanish(seed: int) -> None:
    u = random_field(25, seed=20 + seed, scale=0.6)
    scale = 1.0 + sobolev_norm(u, 0.0) ** 6
    for name, value in identity_residuals(u, 8).items():
        assert abs(value) < 1e-10 * scale, name
    for name, value in vanishing_e_star_terms(u, 8).items():
        assert abs(value) < 1e-10 * scale, name


def test_divergence_check_edge_cases() -> None:
    assert divergence_check(SpectralField.zeros(13), 4, 1e-4) < 1e-12
    with pytest.raises(ValueError):
        divergence_check(SpectralField.zeros(3), 1, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_divergence_of_truncated_field_vanishes(seed: int) -> None:
    u = random_field(13, seed=30 + seed)
    tolerance = 1e-5 * (1.0 + sobolev_norm(u, 0.0) ** 3)
    assert divergence_check(u, 4, 1e-4) < tolerance
    assert divergence_check(u, 4, 5e-5) < tolerance


def test_trajectory_records_energies_and_norms() -> None:
    u0 = plane_wave(1, 7, 0.5)
    record = trajectory(u0, 1.0, FlowParams(N=2, K=7, dt=1e-3), n_records=11, s_values=(1.0, 1.5))
    assert len(record.times) == 11
    assert record.csv_header() == ["t", "E1", "E3", "E5", "Hs_1", "Hs_1.5"]
    assert len(record.csv_rows()) == 11
    report = conservation_report(record, 2)
    for j in (1, 3, 5):
        assert report[f"E{j}_drift"] < 1e-10
    assert record.blow_up_time is None


def test_trajectory_at_zero_time_has_one_row() -> None:
    u0 = random_field(7, seed=11)
    record = trajectory(u0, 0.0, FlowParams(N=2, K=7, dt=0.01))
    assert list(record.times) == [0.0]
    assert record.snapshots[0] is u0


def test_linear_data_has_zero_projected_energies() -> None:
    u0 = plane_wave(5, 7)
    record = trajectory(u0, 0.5, FlowParams(N=2, K=7, dt=0.01), n_records=3)
    for series in record.energies.values():
        assert np.all(series == 0.0)
    assert sobolev_norm(record.snapshots[-1], 0.0) == pytest.approx(sobolev_norm(u0, 0.0), rel=1e-14)


def test_conservation_report_initial_rate_matches_e_star() -> None:
    u0 = random_field(13, seed=12, decay=2.0)
    record = trajectory(u0, 2e-5, FlowParams(N=4, K=13, dt=1e-6), n_records=3)
    report = conservation_report(record, 4)
    for j in (3, 5):
        expected = e_star(u0, j, 4)
        assert report[f"dE{j}_dt_initial"] == pytest.approx(expected, rel=1e-3, abs=1e-6)


def test_conservation_report_refinement_factor() -> None:
    u0 = random_field(13, seed=13, decay=2.0)
    coarse = trajectory(u0, 0.2, FlowParams(N=4, K=13, dt=0.02), n_records=3)
    fine = trajectory(u0, 0.2, FlowParams(N=4, K=13, dt=0.01), n_records=3)
    report = conservation_report(coarse, 4, refined=fine)
    assert "E1_refinement_factor" in report


def test_trajectory_records_blow_up(caplog: pytest.LogCaptureFixture) -> None:
    u0 = random_field(7, seed=14, scale=1e110)
    p = FlowParams(N=2, K=7, dt=0.01)
    with np.errstate(all="ignore"), caplog.at_level(logging.WARNING, logger="mkdvlab"):
        record = trajectory(u0, 0.1, p, n_records=3)
    assert record.blow_up_time == 0.0
    assert len(record.snapshots) == 1
    assert "non-finite" in caplog.text
    with np.errstate(all="ignore"), pytest.raises(FlowBlowUpError, match="last good time"):
        evolve(u0, 0.1, p)


def test_w1inf_time_integral_on_frozen_plane_wave() -> None:
    times = np.linspace(0.0, 1.0, 11)
    snapshots = tuple(plane_wave(1, 3, np.exp(7j * t)) for t in times)
    empty = {1: np.zeros(11), 3: np.zeros(11), 5: np.zeros(11)}
    record = TrajectoryRecord(times=times, snapshots=snapshots, N=3, energies=empty)
    assert w1inf_time_integral(record, 3) == pytest.approx(2.0)
    zero = TrajectoryRecord(times=times, snapshots=(SpectralField.zeros(3),) * 11, N=3, energies=empty)
    assert w1inf_time_integral(zero, 3) == 0.0


def test_trajectory_record_validates_times() -> None:
    with pytest.raises(ValueError):
        TrajectoryRecord(times=np.array([0.0, 0.0]), snapshots=(SpectralField.zeros(1),) * 2, N=1, energies={})
    with pytest.raises(ValueError):
        TrajectoryRecord(times=np.array([0.0]), snapshots=(), N=1, energies={})


def test_cauchy_gap_edge_cases() -> None:
    u0 = plane_wave(1, 13, 0.5)
    p = FlowParams(N=4, K=13, dt=1e-2)
    assert cauchy_gap(u0, 2, 4, 0.0, p) == 0.0
    assert cauchy_gap(u0, 4, 4, 0.5, p) == 0.0
    assert cauchy_gap(u0, 2, 4, 0.5, p) < 1e-8
    with pytest.raises(ValueError):
        cauchy_gap(u0, 4, 2, 0.5, p)


def test_cauchy_gap_decays_at_least_linearly_in_N() -> None:
    K = 193
    u0 = sobolev_profile(K, 1.5, 0.5, seed=20260306)
    dt = default_dt(u0)
    points = []
    for N in (8, 16, 32):
        gap = cauchy_gap(u0, N, 2 * N, 0.5, FlowParams(N=2 * N, K=K, dt=dt), n_times=11)
        assert gap > 0
        points.append((float(N), gap))
    slope, _ = decay_fit(points)
    assert slope <= -1.0


def test_sobolev_rate_matches_finite_difference() -> None:
    u = random_field(13, seed=15, decay=2.0)
    N, s, h = 4, 1.5, 1e-5
    p = FlowParams(N=N, K=13, dt=h)
    forward = sobolev_norm(project_low(evolve(u, h, p), N), s) ** 2
    backward = sobolev_norm(project_low(evolve(u, -h, p), N), s) ** 2
    rate, ratio = sobolev_rate(u, s, N)
    assert rate == pytest.approx((forward - backward) / (2.0 * h), rel=1e-4, abs=1e-9)
    assert math.isfinite(ratio)


def test_default_dt_is_bounded() -> None:
    assert default_dt(SpectralField.zeros(3)) == 1e-2
    assert default_dt(random_field(7, seed=16, scale=5.0)) < 1e-2


def test_orthogonality_of_derivatives_across_bands() -> None:
    f = random_field(12, seed=17)
    g = random_field(12, seed=18)
    value = integrate_product([derivative(project_high(f, 5)), derivative(project_low(g, 5))])
    assert abs(value) < 1e-12
