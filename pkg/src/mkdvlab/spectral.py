"""Band-limited periodic fields on the torus and their exact dealiased algebra.

A field is stored as its Fourier coefficients u_k for |k| <= K, so that
u(x) = sum_k u_k exp(ikx) on [0, 2*pi). Array position k + K holds u_k.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from mkdvlab.models import JSONValue

TWO_PI = 2.0 * math.pi
DEFAULT_OVERSAMPLING = 8
SUP_NORM_TERMS = 100_000


@dataclass(frozen=True)
class SpectralField:
    """Immutable band-limited field with ambient cutoff ``K``."""

    K: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        if self.K < 0:
            raise ValueError(f"Cutoff must be non-negative, got {self.K}.")
        data = np.array(self.coeffs, dtype=np.complex128, copy=True)
        if data.shape != (2 * self.K + 1,):
            raise ValueError(
                f"Expected {2 * self.K + 1} coefficients for cutoff {self.K}, got shape {data.shape}."
            )
        data.setflags(write=False)
        object.__setattr__(self, "coeffs", data)

    @classmethod
    def zeros(cls, K: int) -> SpectralField:
        return cls(K, np.zeros(2 * K + 1, dtype=np.complex128))

    @classmethod
    def from_modes(cls, modes: Mapping[int, complex], K: int) -> SpectralField:
        """Build a field from a sparse ``{k: u_k}`` mapping."""
        data = np.zeros(2 * K + 1, dtype=np.complex128)
        for k, value in modes.items():
            if abs(k) > K:
                raise ValueError(f"Mode {k} lies outside cutoff {K}.")
            data[k + K] = value
        return cls(K, data)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.K, self.K + 1)

    def coefficient(self, k: int) -> complex:
        if abs(k) > self.K:
            return 0j
        return complex(self.coeffs[k + self.K])

    def with_cutoff(self, K: int) -> SpectralField:
        """Return the same field embedded in (or truncated to) cutoff ``K``."""
        return SpectralField(K, _resize(self.coeffs, self.K, K))

    def conj(self) -> SpectralField:
        """Pointwise complex conjugate: coefficient k becomes conj(u_{-k})."""
        return SpectralField(self.K, np.conj(self.coeffs[::-1]))

    def __add__(self, other: SpectralField) -> SpectralField:
        K = max(self.K, other.K)
        return SpectralField(K, _resize(self.coeffs, self.K, K) + _resize(other.coeffs, other.K, K))

    def __sub__(self, other: SpectralField) -> SpectralField:
        return self + (-other)

    def __neg__(self) -> SpectralField:
        return SpectralField(self.K, -self.coeffs)

    def __mul__(self, scalar: complex) -> SpectralField:
        return SpectralField(self.K, self.coeffs * scalar)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def to_dict(self) -> dict[str, JSONValue]:
        return {
            "K": self.K,
            "coeffs": [[float(value.real), float(value.imag)] for value in self.coeffs],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, object]) -> SpectralField:
        K = int(payload["K"])  # type: ignore[arg-type]
        pairs = np.asarray(payload["coeffs"], dtype=np.float64).reshape(-1, 2)
        return cls(K, pairs[:, 0] + 1j * pairs[:, 1])


@dataclass(frozen=True)
class GridEvaluation:
    """Point values of a field on the uniform grid x_m = 2*pi*m/M."""

    values: np.ndarray

    @property
    def size(self) -> int:
        return int(self.values.shape[-1])

    @property
    def points(self) -> np.ndarray:
        return TWO_PI * np.arange(self.size) / self.size


def project_low(u: SpectralField, N: int) -> SpectralField:
    """Sharp Fourier projection onto |k| <= N, kept in the ambient cutoff."""
    data = np.array(u.coeffs)
    data[np.abs(u.modes) > N] = 0.0
    return SpectralField(u.K, data)


def project_high(u: SpectralField, N: int) -> SpectralField:
    """Complementary projection onto |k| > N."""
    data = np.array(u.coeffs)
    data[np.abs(u.modes) <= N] = 0.0
    return SpectralField(u.K, data)


def derivative(u: SpectralField, order: int = 1) -> SpectralField:
    if order < 0:
        raise ValueError(f"Derivative order must be non-negative, got {order}.")
    return SpectralField(u.K, u.coeffs * (1j * u.modes) ** order)


def bessel_multiplier(u: SpectralField, s: float) -> SpectralField:
    """Apply J^s, the Fourier multiplier (1 + k^2)^(s/2)."""
    return SpectralField(u.K, u.coeffs * (1.0 + u.modes.astype(np.float64) ** 2) ** (0.5 * s))


def sobolev_norm(u: SpectralField, s: float) -> float:
    weights = (1.0 + u.modes.astype(np.float64) ** 2) ** s
    return math.sqrt(TWO_PI * float(np.sum(weights * np.abs(u.coeffs) ** 2)))


def l2_inner(u: SpectralField, w: SpectralField) -> complex:
    """Return the integral of conj(u) * w over the torus."""
    K = min(u.K, w.K)
    left = _resize(u.coeffs, u.K, K)
    right = _resize(w.coeffs, w.K, K)
    return complex(TWO_PI * np.sum(np.conj(left) * right))


def integrate(u: SpectralField) -> complex:
    return TWO_PI * u.coefficient(0)


def dealiased_product(
    factors: Sequence[SpectralField],
    result_cutoff: int,
    conjugate: Sequence[bool] | None = None,
) -> SpectralField:
    """Exact coefficients |k| <= result_cutoff of a product of band-limited factors.

    A factor flagged in ``conjugate`` enters as its pointwise conjugate.
    """
    if not factors:
        raise ValueError("At least one factor is required.")
    flags = list(conjugate) if conjugate is not None else [False] * len(factors)
    if len(flags) != len(factors):
        raise ValueError("conjugate flags must match the number of factors.")
    arrays = [factor.coeffs for factor in factors]
    cutoffs = [factor.K for factor in factors]
    return SpectralField(result_cutoff, product_coeffs(arrays, cutoffs, flags, result_cutoff))


def integrate_product(factors: Sequence[SpectralField], conjugate: Sequence[bool] | None = None) -> complex:
    """Integral over the torus of a product of factors, computed exactly."""
    return integrate(dealiased_product(factors, 0, conjugate))


def to_grid(u: SpectralField, M: int | None = None) -> GridEvaluation:
    size = 2 * u.K + 1 if M is None else M
    if size < 2 * u.K + 1:
        raise ValueError(f"Grid of {size} points cannot resolve cutoff {u.K}.")
    return GridEvaluation(coeffs_to_grid(u.coeffs, u.K, size))


def from_grid(grid: GridEvaluation, K: int) -> SpectralField:
    if grid.size < 2 * K + 1:
        raise ValueError(f"Grid of {grid.size} points cannot resolve cutoff {K}.")
    return SpectralField(K, grid_to_coeffs(grid.values, K))


def w1inf_norm(u: SpectralField, oversampling: int = DEFAULT_OVERSAMPLING) -> float:
    """Grid estimate of sup|u| + sup|u_x| on an oversampled grid."""
    size = max(oversampling * max(u.K, 1), 2 * u.K + 1)
    values = coeffs_to_grid(u.coeffs, u.K, size)
    slopes = coeffs_to_grid(derivative(u).coeffs, u.K, size)
    return float(np.max(np.abs(values)) + np.max(np.abs(slopes)))


def sup_norm_constant(order: int, s: float, terms: int = SUP_NORM_TERMS) -> float:
    """Upper bound c with sup|d^order u| <= c * ||u||_{H^s} / sqrt(2 pi).

    The series sum_k k^(2 order) (1 + k^2)^(-s) is summed to |k| <= terms and
    its tail is bounded by the integral test.
    """
    decay = 2.0 * s - 2.0 * order
    if order < 0 or decay <= 1.0:
        raise ValueError(f"H^{s} does not embed derivative order {order} into L^inf.")
    modes = np.arange(-terms, terms + 1).astype(np.float64)
    head = float(np.sum(modes ** (2 * order) * (1.0 + modes**2) ** (-s)))
    tail = 2.0 * terms ** (1.0 - decay) / (decay - 1.0)
    return math.sqrt(head + tail)


def product_coeffs(
    arrays: Sequence[np.ndarray],
    cutoffs: Sequence[int],
    conjugate: Sequence[bool],
    result_cutoff: int,
) -> np.ndarray:
    """Array-level dealiased product; leading axes broadcast as a batch."""
    size = sum(cutoffs) + result_cutoff + 1
    product: np.ndarray | None = None
    for data, K, flag in zip(arrays, cutoffs, conjugate):
        values = coeffs_to_grid(data, K, size)
        if flag:
            values = np.conj(values)
        product = values if product is None else product * values
    assert product is not None
    return grid_to_coeffs(product, result_cutoff)


def coeffs_to_grid(data: np.ndarray, K: int, size: int) -> np.ndarray:
    padded = np.zeros(data.shape[:-1] + (size,), dtype=np.complex128)
    padded[..., np.arange(-K, K + 1) % size] = data
    return np.fft.ifft(padded, axis=-1) * size


def grid_to_coeffs(values: np.ndarray, K: int) -> np.ndarray:
    size = values.shape[-1]
    spectrum = np.fft.fft(values, axis=-1) / size
    return spectrum[..., np.arange(-K, K + 1) % size]


def _resize(data: np.ndarray, K_from: int, K_to: int) -> np.ndarray:
    if K_to >= K_from:
        pad = K_to - K_from
        return np.pad(data, [(0, 0)] * (data.ndim - 1) + [(pad, pad)])
    cut = K_from - K_to
    return np.array(data[..., cut : data.shape[-1] - cut])


def write_field_json(u: SpectralField, path: Path, metadata: Mapping[str, JSONValue] | None = None) -> Path:
    payload: dict[str, JSONValue] = {"field": u.to_dict()}
    if metadata:
        payload["metadata"] = dict(metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_field_json(path: Path) -> SpectralField:
    payload = json.loads(path.read_text(encoding="utf-8"))
    return SpectralField.from_dict(payload["field"] if "field" in payload else payload)


def spectrum_rows(fields: Iterable[SpectralField]) -> list[dict[str, JSONValue]]:
    """Per-mode mean and standard error of |u_k|^2 over a collection of fields."""
    stacked = np.array([field.coeffs for field in fields])
    if stacked.size == 0:
        return []
    K = (stacked.shape[1] - 1) // 2
    power = np.abs(stacked) ** 2
    count = power.shape[0]
    means = power.mean(axis=0)
    errors = power.std(axis=0, ddof=1) / math.sqrt(count) if count > 1 else np.zeros_like(means)
    return [
        {"k": k, "mean_abs2": float(means[k + K]), "stderr": float(errors[k + K])}
        for k in range(-K, K + 1)
    ]


def write_grid_csv(u: SpectralField, path: Path, M: int | None = None) -> Path:
    """Write point values as CSV columns x, re(u), im(u)."""
    grid = to_grid(u, M)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "re_u", "im_u"])
        for x, value in zip(grid.points, grid.values):
            writer.writerow([repr(float(x)), repr(float(value.real)), repr(float(value.imag))])
    return path
