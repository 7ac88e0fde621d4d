"""Conservation laws of the NLS hierarchy built from the w_n recursion.

w_1 = u and w_{j+1} = -i w_j' + conj(u) * sum_{k=1}^{j-1} w_k w_{j-k};
the energies are E_j(u) = Re of the integral of conj(u) * w_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import math
from typing import Iterable, Sequence

import numpy as np

from mkdvlab.errors import MkdvLabError, SingularSystemError
from mkdvlab.models import JSONValue
from mkdvlab.spectral import (
    TWO_PI,
    SpectralField,
    dealiased_product,
    derivative,
    integrate_product,
    l2_inner,
    sup_norm_constant,
)

Monomial = tuple[tuple[bool, int], ...]

MAX_CONDITION = 1e12
DEFAULT_EPSILONS_START = 0.5
DEFAULT_EPSILONS_STEP = 0.25


@dataclass(frozen=True)
class HierarchySequence:
    """The fields w_1..w_n_max of a base field; w_j has cutoff at most j*K."""

    u: SpectralField
    w: tuple[SpectralField, ...]

    @property
    def n_max(self) -> int:
        return len(self.w)

    def __getitem__(self, j: int) -> SpectralField:
        if not 1 <= j <= len(self.w):
            raise IndexError(f"w_{j} is outside 1..{len(self.w)}.")
        return self.w[j - 1]


@dataclass(frozen=True)
class EnergyReport:
    """Energies E_1..E_{2n+1} of one field with the R_n decomposition."""

    n: int
    values: dict[int, float]
    remainder: float
    quadratic: float
    imaginary_parts: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, JSONValue]:
        return {
            "n": self.n,
            "values": {f"E{j}": value for j, value in sorted(self.values.items())},
            "remainder": self.remainder,
            "quadratic": self.quadratic,
            "imaginary_parts": {f"E{j}": value for j, value in sorted(self.imaginary_parts.items())},
        }

    def csv_header(self) -> list[str]:
        return [f"E{j}" for j in sorted(self.values)] + [f"R{self.n}"]

    def csv_row(self) -> list[float]:
        return [self.values[j] for j in sorted(self.values)] + [self.remainder]


def w_sequence(u: SpectralField, n_max: int) -> HierarchySequence:
    if n_max < 1:
        raise ValueError(f"n_max must be at least 1, got {n_max}.")
    ws: list[SpectralField] = [u]
    u_bar = u.conj()
    for j in range(1, n_max):
        current = ws[j - 1]
        step = derivative(current) * (-1j)
        if j >= 2:
            cutoff = u.K + max(ws[k - 1].K + ws[j - k - 1].K for k in range(1, j))
            total = SpectralField.zeros(cutoff)
            for k in range(1, j):
                total = total + dealiased_product([u_bar, ws[k - 1], ws[j - k - 1]], cutoff)
            step = step + total
        ws.append(step)
    return HierarchySequence(u=u, w=tuple(ws))


def energy(u: SpectralField, n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}.")
    return energies(u, n)[n]


def energies(u: SpectralField, n_max: int) -> dict[int, float]:
    """E_1..E_n_max from a single recursion pass."""
    return {j: value.real for j, value in _energy_inners(u, n_max).items()}


def closed_form_sign(n: int) -> int:
    """Sign relating Re int conj(u) w_n to the closed-form density of energy_explicit."""
    if not 1 <= n <= 5:
        raise ValueError(f"Closed forms exist for n in 1..5, got {n}.")
    return -1 if n == 4 else 1


def energy_explicit(u: SpectralField, n: int) -> float:
    """Closed-form conservation laws E_1..E_5."""
    if not 1 <= n <= 5:
        raise ValueError(f"Closed forms exist for n in 1..5, got {n}.")
    du = derivative(u)
    if n == 1:
        return _real_integral([u, u], [False, True])
    if n == 2:
        return integrate_product([u, du], [True, False]).imag
    if n == 3:
        return _real_integral([du, du], [False, True]) + _real_integral(
            [u, u, u, u], [False, True, False, True]
        )
    if n == 4:
        d2u = derivative(u, 2)
        value = integrate_product([du, d2u], [False, True]) + 3.0 * integrate_product(
            [u, u, u, du], [False, True, False, True]
        )
        return value.imag
    d2u = derivative(u, 2)
    density = _modulus_squared_derivative(u)
    return (
        _real_integral([d2u, d2u], [False, True])
        + 6.0 * _real_integral([du, du, u, u], [False, True, False, True])
        + _real_integral([density, density], [False, True])
        + 2.0 * _real_integral([u] * 6, [False, True] * 3)
    )


def sobolev_seminorm_squared(u: SpectralField, n: int) -> float:
    """Squared L2 norm of the n-th derivative."""
    k = u.modes.astype(np.float64)
    return TWO_PI * float(np.sum(k ** (2 * n) * np.abs(u.coeffs) ** 2))


def remainder(u: SpectralField, n: int) -> float:
    if n < 2:
        raise ValueError(f"Remainder is defined for n >= 2, got {n}.")
    return energy(u, 2 * n + 1) - sobolev_seminorm_squared(u, n)


def leading_parts(u: SpectralField, n: int) -> tuple[float, float, float]:
    """Split E_{2n+1} into the quadratic part, the leading quartic part and the rest."""
    if n < 2:
        raise ValueError(f"Leading parts are defined for n >= 2, got {n}.")
    quadratic = sobolev_seminorm_squared(u, n)
    density = derivative(dealiased_product([u, u], 2 * u.K, [False, True]), n - 1)
    high = derivative(u, n - 1)
    quartic = _real_integral([density, density], [False, True]) + (4 * n - 2) * _real_integral(
        [high, high, u, u], [False, True, False, True]
    )
    residual = energy(u, 2 * n + 1) - quadratic - quartic
    return quadratic, quartic, residual


def homogeneous_component(
    u: SpectralField,
    n: int,
    degree: int,
    epsilons: Sequence[float] | None = None,
) -> float:
    """Coefficient of eps**degree in eps -> E_n(eps * u), by polarization.

    Even degrees are recovered from a fit in eps**2; odd degrees need the full
    polynomial fit and are only expected to vanish.
    """
    top = 2 * ((n + 1) // 2)
    if not 1 <= degree <= top:
        raise ValueError(f"degree must lie in 1..{top} for n={n}, got {degree}.")
    if degree % 2 == 0:
        powers = list(range(2, top + 1, 2))
    else:
        powers = list(range(1, top + 1))
    nodes = _polarization_nodes(len(powers), epsilons)
    matrix = np.array([[eps**power for power in powers] for eps in nodes], dtype=np.float64)
    condition = np.linalg.cond(matrix)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularSystemError(f"Polarization system is ill-conditioned (cond={condition:.3g}).")
    rhs = np.array([energy(u * eps, n) for eps in nodes], dtype=np.float64)
    solution = np.linalg.solve(matrix, rhs)
    return float(solution[powers.index(degree)])


def energy_report(u: SpectralField, n: int) -> EnergyReport:
    if n < 2:
        raise ValueError(f"Energy reports need n >= 2, got {n}.")
    inner = _energy_inners(u, 2 * n + 1)
    values = {j: value.real for j, value in inner.items()}
    quadratic = sobolev_seminorm_squared(u, n)
    return EnergyReport(
        n=n,
        values=values,
        remainder=values[2 * n + 1] - quadratic,
        quadratic=quadratic,
        imaginary_parts={j: value.imag for j, value in inner.items()},
    )


def linear_w(u: SpectralField, j: int) -> SpectralField:
    """Linear part of w_j: (-i d/dx)^(j-1) u."""
    if j < 1:
        raise ValueError(f"j must be at least 1, got {j}.")
    return SpectralField(u.K, u.coeffs * u.modes.astype(np.float64) ** (j - 1))


def cubic_w(u: SpectralField, j: int) -> SpectralField:
    """Cubic part of w_j, whose pairing with u gives the quartic part of E_j."""
    if j < 1:
        raise ValueError(f"j must be at least 1, got {j}.")
    u_bar = u.conj()
    cubic = SpectralField.zeros(u.K)
    for step in range(1, j):
        cubic = derivative(cubic) * (-1j)
        if step >= 2:
            cutoff = 3 * u.K
            for k in range(1, step):
                cubic = cubic + dealiased_product([u_bar, linear_w(u, k), linear_w(u, step - k)], cutoff)
    return cubic


def remainder_monomials(n: int) -> tuple[tuple[Monomial, complex], ...]:
    """R_n as a sum of c * integral(prod d^order v), v in {u, conj(u)}.

    Each factor is (conjugated, order). Terms are integrated by parts until no
    factor carries more than n - 1 derivatives, then folded onto their real part.
    """
    if n < 2:
        raise ValueError(f"Remainder is defined for n >= 2, got {n}.")
    return _remainder_monomials(n)


def evaluate_monomials(u: SpectralField, terms: Sequence[tuple[Monomial, complex]]) -> float:
    """Real part of sum_terms c * integral of the monomial evaluated on u."""
    top = max((order for monomial, _ in terms for _, order in monomial), default=0)
    derivatives = [derivative(u, order) for order in range(top + 1)]
    total = 0j
    for monomial, coefficient in terms:
        factors = [derivatives[order] for _, order in monomial]
        total += coefficient * integrate_product(factors, [conj for conj, _ in monomial])
    return total.real


def remainder_bound_coefficients(n: int) -> dict[int, float]:
    """Coefficients b_d of p_n(rho) = sum_d b_d rho^d with |R_n(u)| <= p_n(||u||_{H^{n-1}}).

    The two highest-order factors of each monomial go to L2, every other
    factor to L^inf through the H^{n-1} embedding.
    """
    coefficients: dict[int, float] = {}
    embeddings = {order: sup_norm_constant(order, n - 1) / math.sqrt(TWO_PI) for order in range(n - 1)}
    for monomial, coefficient in remainder_monomials(n):
        orders = sorted((order for _, order in monomial), reverse=True)
        if orders[0] > n - 1 or any(order > n - 2 for order in orders[2:]):
            raise MkdvLabError(f"Monomial {monomial} of R_{n} is not controlled by H^{n - 1}.")
        weight = abs(coefficient)
        for order in orders[2:]:
            weight *= embeddings[order]
        degree = len(monomial)
        coefficients[degree] = coefficients.get(degree, 0.0) + weight
    return dict(sorted(coefficients.items()))


def remainder_bound(n: int, rho: float) -> float:
    """p_n(rho), an upper bound for |R_n(u)| over fields with ||u||_{H^{n-1}} <= rho."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}.")
    return sum(weight * rho**degree for degree, weight in remainder_bound_coefficients(n).items())


@lru_cache(maxsize=None)
def _remainder_monomials(n: int) -> tuple[tuple[Monomial, complex], ...]:
    top = _symbolic_w(2 * n + 1)[-1]
    integrand = _collect(
        (_sorted_monomial(((True, 0),) + monomial), coefficient)
        for monomial, coefficient in top.items()
        if len(monomial) > 1
    )
    reduced = _integrate_by_parts(integrand)
    folded: dict[Monomial, complex] = {}
    for monomial in set(reduced) | {_conjugate_monomial(m) for m in reduced}:
        mirror = reduced.get(_conjugate_monomial(monomial), 0j)
        value = 0.5 * (reduced.get(monomial, 0j) + mirror.conjugate())
        if value != 0:
            folded[monomial] = value
    return tuple(sorted(folded.items()))


@lru_cache(maxsize=None)
def _symbolic_w(n_max: int) -> tuple[dict[Monomial, complex], ...]:
    """The w_j recursion on formal monomials."""
    ws: list[dict[Monomial, complex]] = [{((False, 0),): 1 + 0j}]
    for j in range(1, n_max):
        step = {monomial: -1j * c for monomial, c in _symbolic_derivative(ws[j - 1]).items()}
        products = (
            (_sorted_monomial(((True, 0),) + left + right), c_left * c_right)
            for k in range(1, j)
            for left, c_left in ws[k - 1].items()
            for right, c_right in ws[j - k - 1].items()
        )
        for monomial, coefficient in products:
            step[monomial] = step.get(monomial, 0j) + coefficient
        ws.append({monomial: c for monomial, c in step.items() if c != 0})
    return tuple(ws)


def _symbolic_derivative(terms: dict[Monomial, complex]) -> dict[Monomial, complex]:
    return _collect(
        (_raise_factor(monomial, index), coefficient)
        for monomial, coefficient in terms.items()
        for index in range(len(monomial))
    )


def _integrate_by_parts(terms: dict[Monomial, complex]) -> dict[Monomial, complex]:
    """Move derivatives off a unique top factor until it exceeds the next one by at most 1."""
    done: dict[Monomial, complex] = {}
    pending = terms
    while pending:
        moved: list[tuple[Monomial, complex]] = []
        for monomial, coefficient in pending.items():
            orders = sorted((order for _, order in monomial), reverse=True)
            if len(orders) < 2 or orders[0] < orders[1] + 2:
                done[monomial] = done.get(monomial, 0j) + coefficient
                continue
            top = max(range(len(monomial)), key=lambda index: monomial[index][1])
            conj, order = monomial[top]
            rest = monomial[:top] + monomial[top + 1 :]
            for index in range(len(rest)):
                moved.append((_raise_factor(rest, index) + ((conj, order - 1),), -coefficient))
        pending = _collect((_sorted_monomial(m), c) for m, c in moved)
    return {monomial: c for monomial, c in done.items() if c != 0}


def _raise_factor(monomial: Monomial, index: int) -> Monomial:
    conj, order = monomial[index]
    return _sorted_monomial(monomial[:index] + ((conj, order + 1),) + monomial[index + 1 :])


def _sorted_monomial(factors: Iterable[tuple[bool, int]]) -> Monomial:
    return tuple(sorted(factors))


def _conjugate_monomial(monomial: Monomial) -> Monomial:
    return _sorted_monomial((not conj, order) for conj, order in monomial)


def _collect(items: Iterable[tuple[Monomial, complex]]) -> dict[Monomial, complex]:
    collected: dict[Monomial, complex] = {}
    for monomial, coefficient in items:
        collected[monomial] = collected.get(monomial, 0j) + coefficient
    return {monomial: c for monomial, c in collected.items() if c != 0}


def _energy_inners(u: SpectralField, n_max: int) -> dict[int, complex]:
    sequence = w_sequence(u, n_max)
    return {j: l2_inner(u, sequence[j]) for j in range(1, n_max + 1)}


def _real_integral(factors: Sequence[SpectralField], conjugate: Sequence[bool]) -> float:
    return integrate_product(factors, conjugate).real


def _modulus_squared_derivative(u: SpectralField) -> SpectralField:
    return derivative(dealiased_product([u, u], 2 * u.K, [False, True]))


def _polarization_nodes(count: int, epsilons: Sequence[float] | None) -> list[float]:
    if epsilons is None:
        return [DEFAULT_EPSILONS_START + DEFAULT_EPSILONS_STEP * index for index in range(count)]
    nodes = [float(value) for value in epsilons]
    if len(nodes) < count:
        raise SingularSystemError(f"Need {count} polarization points, got {len(nodes)}.")
    nodes = nodes[:count]
    if any(math.isclose(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1 :]):
        raise SingularSystemError("Polarization points must be distinct.")
    return nodes
