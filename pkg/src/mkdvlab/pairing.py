"""Index families of sextic Gaussian monomials and their pairing combinatorics.

A vector j = (j1, ..., j6) stands for g_{j1} conj(g_{j2}) conj(g_{j3}) g_{j4} conj(g_{j5}) g_{j6}.
Slots 1, 4, 6 carry g and slots 2, 3, 5 carry conj(g). The family I_N collects the
vectors with entries in [-N, N], j1 - j2 - j3 + j4 - j5 + j6 = 0 and |j1 - j2 - j3| > N.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from functools import partial
import itertools
import logging
import math
import re
from typing import Iterator, Sequence

import numpy as np

from mkdvlab.errors import FitError, WickBudgetExceeded
from mkdvlab.flow import (
    e_star,
    gradient_weight_functional,
    leading_estar_functional,
    squared_gradient_functional,
)
from mkdvlab.hierarchy import energies
from mkdvlab.measures import (
    CutoffSpec,
    GaussianSamplerSpec,
    McEstimate,
    chi_r,
    estimate_from_values,
    field_from_draws,
    run_indexed,
    sample_mu,
)
from mkdvlab.spectral import TWO_PI

logger = logging.getLogger(__name__)

SIGNATURE = (1, -1, -1, 1, -1, 1)
PLUS_SLOTS = (1, 4, 6)
MINUS_SLOTS = (2, 3, 5)
WICK_MAX_N = 4
EXHAUSTIVE_MAX_N = 64
ISSERLIS_CHUNK = 256

_PLUS = tuple(slot - 1 for slot in PLUS_SLOTS)
_MINUS = tuple(slot - 1 for slot in MINUS_SLOTS)
_TAG_PATTERN = re.compile(r"^(I|TildeI|HatI)\((\d),(\d)\)$")
_KIND_PATTERN = re.compile(r"^An\((\d+)\)$")


@dataclass(frozen=True)
class IndexVector6:
    j: tuple[int, int, int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.j) != 6:
            raise ValueError(f"Expected 6 indices, got {len(self.j)}.")
        object.__setattr__(self, "j", tuple(int(value) for value in self.j))

    @property
    def L(self) -> int:
        return sum(sign * value for sign, value in zip(SIGNATURE, self.j))

    @property
    def P(self) -> int:
        return self.j[0] - self.j[1] - self.j[2]


@dataclass(frozen=True)
class PairingClass:
    """Maximal pairing: r matched (g, conj g) slot pairs, plus slots X with minus slots Y."""

    r: int
    X: tuple[int, ...] = ()
    Y: tuple[int, ...] = ()

    @property
    def is_zero(self) -> bool:
        return self.r == 0

    @property
    def slot_pair(self) -> tuple[int, int] | None:
        if self.r != 1:
            return None
        return self.X[0], self.Y[0]


@dataclass(frozen=True)
class FamilyTag:
    """One of I0, ALL, MULTI, or I/TildeI/HatI tied on one plus slot and one minus slot (either order)."""

    name: str
    k: int | None = None
    l: int | None = None

    def __post_init__(self) -> None:
        if self.name in {"I0", "ALL", "MULTI"}:
            if self.k is not None or self.l is not None:
                raise ValueError(f"Family {self.name} takes no slots.")
            return
        if self.name not in {"I", "TildeI", "HatI"}:
            raise ValueError(f"Unknown family '{self.name}'.")
        slots = {self.k, self.l}
        if len(slots & set(PLUS_SLOTS)) != 1 or len(slots & set(MINUS_SLOTS)) != 1:
            raise ValueError(
                f"Family slots must pair one of {PLUS_SLOTS} with one of {MINUS_SLOTS}, got ({self.k},{self.l})."
            )

    @classmethod
    def parse(cls, text: str) -> FamilyTag:
        compact = text.replace(" ", "")
        if compact in {"I0", "ALL", "MULTI"}:
            return cls(compact)
        match = _TAG_PATTERN.match(compact)
        if match is None:
            raise ValueError(f"Cannot parse family tag '{text}'.")
        return cls(match.group(1), int(match.group(2)), int(match.group(3)))

    @property
    def tie(self) -> tuple[int, int] | None:
        """The tied (plus slot, minus slot) pair."""
        if self.k is None or self.l is None:
            return None
        return (self.k, self.l) if self.k in PLUS_SLOTS else (self.l, self.k)

    def __str__(self) -> str:
        if self.tie is None:
            return self.name
        return f"{self.name}({self.k},{self.l})"


@dataclass(frozen=True)
class CoefficientKind:
    """Coefficient function A, B, C or An of order n."""

    name: str
    n: int = 2

    def __post_init__(self) -> None:
        if self.name not in {"A", "B", "C", "An"}:
            raise ValueError(f"Unknown coefficient kind '{self.name}'.")
        if self.name == "An" and self.n < 2:
            raise ValueError(f"An needs n >= 2, got {self.n}.")

    @classmethod
    def parse(cls, text: str) -> CoefficientKind:
        compact = text.replace(" ", "")
        if compact in {"A", "B", "C"}:
            return cls(compact)
        match = _KIND_PATTERN.match(compact)
        if match is None:
            raise ValueError(f"Cannot parse coefficient kind '{text}'.")
        return cls("An", int(match.group(1)))

    @property
    def sampler_level(self) -> int:
        return self.n if self.name == "An" else 2

    def __str__(self) -> str:
        return f"An({self.n})" if self.name == "An" else self.name


def classify(v: IndexVector6) -> PairingClass:
    """Maximal pairing; within each value, plus and minus slots are matched in slot order."""
    X: list[int] = []
    Y: list[int] = []
    for value in sorted(set(v.j)):
        plus = [slot for slot in PLUS_SLOTS if v.j[slot - 1] == value]
        minus = [slot for slot in MINUS_SLOTS if v.j[slot - 1] == value]
        for a, b in zip(plus, minus):
            X.append(a)
            Y.append(b)
    order = sorted(range(len(X)), key=lambda index: X[index])
    return PairingClass(r=len(X), X=tuple(X[i] for i in order), Y=tuple(Y[i] for i in order))


def in_family(v: IndexVector6, N: int, f: FamilyTag) -> bool:
    if any(abs(value) > N for value in v.j) or v.L != 0 or abs(v.P) <= N:
        return False
    return bool(family_mask(np.array([v.j], dtype=np.int64), f)[0])


def family_mask(J: np.ndarray, f: FamilyTag) -> np.ndarray:
    """Membership in the pairing condition of a family, for rows already in I_N."""
    equal = {(a, b): J[:, a] == J[:, b] for a in _PLUS for b in _MINUS}
    any_equal = np.zeros(J.shape[0], dtype=bool)
    for mask in equal.values():
        any_equal |= mask
    if f.name == "ALL":
        return np.ones(J.shape[0], dtype=bool)
    if f.name == "I0":
        return ~any_equal
    if f.name == "MULTI":
        single = np.zeros(J.shape[0], dtype=bool)
        for k in PLUS_SLOTS:
            for l in MINUS_SLOTS:
                single |= _one_pairing_mask(equal, k, l)
        return any_equal & ~single
    assert f.tie is not None
    mask = _one_pairing_mask(equal, *f.tie)
    if f.name == "I":
        return mask
    five_distinct = _distinct_counts(J) == 5
    return mask & five_distinct if f.name == "TildeI" else mask & ~five_distinct


def iter_family_blocks(N: int, f: FamilyTag) -> Iterator[np.ndarray]:
    """Blocks of family members as (m, 6) int64 arrays; block order is deterministic."""
    if N < 0:
        raise ValueError(f"N must be non-negative, got {N}.")
    blocks = _tied_blocks(N, f.tie) if f.tie is not None else _untied_blocks(N)
    for block in blocks:
        mask = family_mask(block, f)
        if mask.any():
            yield block[mask]


def family_array(N: int, f: FamilyTag) -> np.ndarray:
    """All members in lexicographic order."""
    if N > EXHAUSTIVE_MAX_N and f.tie is None:
        raise ValueError(f"Exhaustive enumeration is limited to N <= {EXHAUSTIVE_MAX_N}.")
    blocks = list(iter_family_blocks(N, f))
    if not blocks:
        return np.zeros((0, 6), dtype=np.int64)
    stacked = np.concatenate(blocks)
    order = np.lexsort(stacked.T[::-1])
    return stacked[order]


def enumerate_family(N: int, f: FamilyTag) -> Iterator[IndexVector6]:
    for row in family_array(N, f):
        yield IndexVector6(tuple(int(value) for value in row))  # type: ignore[arg-type]


def coefficients(J: np.ndarray, c: CoefficientKind) -> np.ndarray:
    """Vectorized coefficient of each row."""
    values = J.astype(np.float64)
    level = c.sampler_level
    denominator = np.prod(np.sqrt(1.0 + values ** (2 * level)), axis=1)
    P = values[:, 0] - values[:, 1] - values[:, 2]
    Q = values[:, 3] - values[:, 4] + values[:, 5]
    if c.name == "A":
        numerator = P * Q * values[:, 5]
    elif c.name == "B":
        numerator = values[:, 0] * values[:, 1] * values[:, 5]
    elif c.name == "C":
        numerator = values[:, 1] * values[:, 2] * values[:, 5]
    else:
        numerator = (P * Q) ** (c.n - 1) * values[:, 5]
    return numerator / denominator


def coefficient(v: IndexVector6, c: CoefficientKind) -> float:
    return float(coefficients(np.array([v.j], dtype=np.int64), c)[0])


def monomials(J: np.ndarray, g: np.ndarray, N: int) -> np.ndarray:
    """g_{j1} conj(g_{j2}) conj(g_{j3}) g_{j4} conj(g_{j5}) g_{j6}; g may carry leading batch axes."""
    index = J + N
    result = np.ones(g.shape[:-1] + (J.shape[0],), dtype=np.complex128)
    for slot, sign in enumerate(SIGNATURE):
        factor = g[..., index[:, slot]]
        result = result * (factor if sign > 0 else np.conj(factor))
    return result


def pathwise_sum(N: int, f: FamilyTag, c: CoefficientKind, g: np.ndarray) -> complex:
    """Sum of coeff * monomial over the family for one draw g indexed -N..N."""
    g = np.asarray(g, dtype=np.complex128)
    if g.shape[-1] != 2 * N + 1:
        raise ValueError(f"Expected {2 * N + 1} Gaussian values, got {g.shape[-1]}.")
    real_parts: list[float] = []
    imag_parts: list[float] = []
    for block in iter_family_blocks(N, f):
        partial_sum = np.sum(coefficients(block, c) * monomials(block, g, N))
        real_parts.append(float(partial_sum.real))
        imag_parts.append(float(partial_sum.imag))
    return complex(math.fsum(real_parts), math.fsum(imag_parts))


def pathwise_sums(N: int, f: FamilyTag, c: CoefficientKind, G: np.ndarray) -> np.ndarray:
    """pathwise_sum for a batch of draws G with shape (S, 2N + 1)."""
    G = np.atleast_2d(np.asarray(G, dtype=np.complex128))
    if G.shape[-1] != 2 * N + 1:
        raise ValueError(f"Expected {2 * N + 1} Gaussian values per draw, got {G.shape[-1]}.")
    partials = [monomials(block, G, N) @ coefficients(block, c) for block in iter_family_blocks(N, f)]
    if not partials:
        return np.zeros(G.shape[0], dtype=np.complex128)
    return np.sum(np.stack(partials), axis=0)


def partner(v: IndexVector6) -> IndexVector6:
    """Partner of a TildeI(2,6) or TildeI(3,6) member with equal coefficient and conjugate monomial."""
    j1, j2, j3, j4, j5, j6 = v.j
    if j2 == j6:
        return IndexVector6((j5, j6, j4, j3, j1, j6))
    if j3 == j6:
        return IndexVector6((j5, j4, j6, j2, j1, j6))
    raise ValueError(f"{v.j} is not paired on slots (2,6) or (3,6).")


def annal_bound(N: int, f: FamilyTag, c: CoefficientKind) -> float:
    """Sum over pairing shapes and free indices of (sum of |coeff| over matching vectors)^2.

    Vectors without a pairing contribute |coeff|^2 each.
    """
    unpaired: list[float] = []
    shape_keys: dict[tuple[int, int], list[np.ndarray]] = defaultdict(list)
    shape_weights: dict[tuple[int, int], list[np.ndarray]] = defaultdict(list)
    multi_groups: dict[tuple, float] = defaultdict(float)
    base = 2 * N + 1
    multi_tag = FamilyTag("MULTI")
    zero_tag = FamilyTag("I0")
    shapes = [f.tie] if f.tie is not None else [(k, l) for k in PLUS_SLOTS for l in MINUS_SLOTS]
    for block in iter_family_blocks(N, f):
        weights = np.abs(coefficients(block, c))
        zero = family_mask(block, zero_tag)
        if zero.any():
            unpaired.append(float(np.sum(weights[zero] ** 2)))
        equal = {(a, b): block[:, a] == block[:, b] for a in _PLUS for b in _MINUS}
        for k, l in shapes:
            mask = _one_pairing_mask(equal, k, l)
            if not mask.any():
                continue
            free = [slot - 1 for slot in range(1, 7) if slot not in (k, l)]
            keys = np.zeros(int(mask.sum()), dtype=np.int64)
            for column in free:
                keys = keys * base + (block[mask, column] + N)
            shape_keys[(k, l)].append(keys)
            shape_weights[(k, l)].append(weights[mask])
        multi = family_mask(block, multi_tag)
        for row, weight in zip(block[multi], weights[multi]):
            for shape, free_values in _maximal_shapes(tuple(int(x) for x in row)):
                multi_groups[(shape, free_values)] += float(weight)

    terms = list(unpaired)
    for shape in shape_keys:
        keys = np.concatenate(shape_keys[shape])
        weights = np.concatenate(shape_weights[shape])
        _, inverse = np.unique(keys, return_inverse=True)
        grouped = np.bincount(inverse.ravel(), weights=weights)
        terms.append(float(np.sum(grouped**2)))
    terms.extend(value**2 for value in multi_groups.values())
    return math.fsum(terms)


def isserlis_second_moment(coeffs: np.ndarray, plus_counts: np.ndarray, minus_counts: np.ndarray) -> float:
    """E|sum_m c_m prod_i g_i^{p_mi} conj(g_i)^{q_mi}|^2 for independent standard complex Gaussians.

    Only monomials with equal net signature p - q correlate, and for those
    E[M_m conj(M_m')] = prod_i (p_mi + q_m'i)!.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    plus_counts = np.asarray(plus_counts, dtype=np.int64)
    minus_counts = np.asarray(minus_counts, dtype=np.int64)
    if coeffs.size == 0:
        return 0.0
    top = int((plus_counts.sum(axis=1).max() + minus_counts.sum(axis=1).max()))
    factorials = np.array([math.factorial(k) for k in range(top + 1)], dtype=np.float64)
    net = plus_counts - minus_counts
    _, groups = np.unique(net, axis=0, return_inverse=True)
    groups = groups.ravel()
    totals: list[float] = []
    for group in np.unique(groups):
        members = np.flatnonzero(groups == group)
        p = plus_counts[members]
        q = minus_counts[members]
        c = coeffs[members]
        for start in range(0, members.size, ISSERLIS_CHUNK):
            rows = slice(start, start + ISSERLIS_CHUNK)
            moments = np.prod(factorials[p[rows, None, :] + q[None, :, :]], axis=2)
            totals.append(float(np.real(c[rows] @ moments @ np.conj(c))))
    return math.fsum(totals)


def wick_second_moment(N: int, f: FamilyTag, c: CoefficientKind) -> float:
    """Exact E|pathwise_sum|^2 under standard complex Gaussians."""
    if N > WICK_MAX_N:
        raise WickBudgetExceeded(f"Exact Wick moments are limited to N <= {WICK_MAX_N}, got {N}.")
    J = family_array(N, f)
    if J.shape[0] == 0:
        return 0.0
    plus_counts, minus_counts = signature_counts(J, N)
    return isserlis_second_moment(coefficients(J, c), plus_counts, minus_counts)


def signature_counts(J: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row counts of g and conj(g) factors for each index -N..N."""
    rows = np.arange(J.shape[0])
    plus = np.zeros((J.shape[0], 2 * N + 1), dtype=np.int64)
    minus = np.zeros_like(plus)
    for slot in _PLUS:
        np.add.at(plus, (rows, J[:, slot] + N), 1)
    for slot in _MINUS:
        np.add.at(minus, (rows, J[:, slot] + N), 1)
    return plus, minus


def decay_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Unweighted least-squares slope of log y against log N, with its standard error."""
    if len(points) < 3:
        raise FitError(f"decay_fit needs at least 3 points, got {len(points)}.")
    xs = np.array([float(N) for N, _ in points])
    ys = np.array([float(y) for _, y in points])
    if np.any(ys <= 0) or np.any(xs <= 0):
        raise FitError("decay_fit needs positive N and y values.")
    log_x = np.log(xs)
    log_y = np.log(ys)
    design = np.column_stack([np.ones_like(log_x), log_x])
    solution, _, rank, _ = np.linalg.lstsq(design, log_y, rcond=None)
    if rank < 2:
        raise FitError("decay_fit needs at least two distinct N values.")
    residuals = log_y - design @ solution
    sigma2 = float(residuals @ residuals) / (len(points) - 2)
    centered = log_x - log_x.mean()
    stderr = math.sqrt(sigma2 / float(centered @ centered))
    return float(solution[1]), stderr


def estar_l2_decay(
    j: int,
    n_ladder: Sequence[int],
    R: float,
    spec: GaussianSamplerSpec,
    n_samples: int,
    workers: int = 1,
) -> list[tuple[int, McEstimate]]:
    """Monte-Carlo squared L2 norm of the cutoff-weighted energy derivative for each N."""
    if j not in (3, 5):
        raise ValueError(f"j must be 3 or 5, got {j}.")
    if spec.n != 2:
        raise ValueError(f"Energy-derivative decay is defined for level n = 2, got {spec.n}.")
    task = partial(_estar_sample, spec, tuple(n_ladder), j, R)
    rows = np.asarray(run_indexed(task, n_samples, workers), dtype=np.float64).reshape(n_samples, len(n_ladder))
    return [(int(N), estimate_from_values(rows[:, column], spec.seed)) for column, N in enumerate(n_ladder)]


def field_functional(g: np.ndarray, N: int, c: CoefficientKind) -> float:
    """Field-space integral whose Fourier expansion yields the pathwise sum of kind c."""
    u = field_from_draws(g, c.sampler_level)
    if c.name == "A":
        return leading_estar_functional(u, N, 2)
    if c.name == "An":
        return leading_estar_functional(u, N, c.n)
    if c.name == "B":
        return gradient_weight_functional(u, N)
    return squared_gradient_functional(u, N)


def duality_constant() -> float:
    return TWO_PI**2


def duality_sign(c: CoefficientKind) -> int:
    """Sign in Im(pathwise sum over I_N) = sign * (2 pi)^2 * field_functional."""
    if c.name == "B":
        return -1
    if c.name == "An":
        return (-1) ** c.n
    return 1


def _estar_sample(spec: GaussianSamplerSpec, ladder: tuple[int, ...], j: int, R: float, index: int) -> list[float]:
    u = sample_mu(spec, index)
    cutoff = CutoffSpec(R)
    values: list[float] = []
    for N in ladder:
        v = u.with_cutoff(min(N, u.K))
        low = energies(v, 3)
        weight = chi_r(low[1], cutoff) * chi_r(low[3], cutoff, derivative=(j == 3))
        if weight == 0.0:
            values.append(0.0)
            continue
        values.append((weight * e_star(u, j, N)) ** 2)
    return values


def _one_pairing_mask(equal: dict[tuple[int, int], np.ndarray], k: int, l: int) -> np.ndarray:
    mask = equal[(k - 1, l - 1)].copy()
    for a in _PLUS:
        for b in _MINUS:
            if a != k - 1 and b != l - 1:
                mask &= ~equal[(a, b)]
    return mask


def _distinct_counts(J: np.ndarray) -> np.ndarray:
    ordered = np.sort(J, axis=1)
    return 1 + np.count_nonzero(np.diff(ordered, axis=1), axis=1)


def _maximal_shapes(row: tuple[int, ...]) -> list[tuple[tuple[tuple[int, int], ...], tuple[int, ...]]]:
    """Every maximal matching of equal plus/minus slots with the values of the unmatched slots."""
    edges = [(a, b) for a in PLUS_SLOTS for b in MINUS_SLOTS if row[a - 1] == row[b - 1]]
    matchings: list[tuple[tuple[int, int], ...]] = []
    for size in range(3, 0, -1):
        for combo in itertools.combinations(edges, size):
            plus = {a for a, _ in combo}
            minus = {b for _, b in combo}
            if len(plus) == size and len(minus) == size:
                matchings.append(combo)
        if matchings:
            break
    shapes = []
    for combo in matchings:
        used = {slot for pair in combo for slot in pair}
        free = tuple(row[slot - 1] for slot in range(1, 7) if slot not in used)
        shapes.append((combo, free))
    return shapes


def _untied_blocks(N: int) -> Iterator[np.ndarray]:
    values = np.arange(-N, N + 1, dtype=np.int64)
    for j1 in values:
        for j2 in values:
            j3 = values[np.abs(j1 - j2 - values) > N]
            if j3.size == 0:
                continue
            a3, a4, a5 = (axis.ravel() for axis in np.meshgrid(j3, values, values, indexing="ij"))
            a6 = -(j1 - j2 - a3) - a4 + a5
            keep = np.abs(a6) <= N
            count = int(keep.sum())
            if count == 0:
                continue
            yield np.column_stack(
                [np.full(count, j1), np.full(count, j2), a3[keep], a4[keep], a5[keep], a6[keep]]
            )


def _tied_blocks(N: int, tie: tuple[int, int]) -> Iterator[np.ndarray]:
    """Rows with j_l = j_k; one remaining slot is fixed by L = 0."""
    k, l = tie
    rest = [slot for slot in range(1, 7) if slot not in (k, l)]
    solved = rest[-1]
    free = rest[:-1]
    values = np.arange(-N, N + 1, dtype=np.int64)
    outer, inner = free[0], free[1:]
    for lead in values:
        grids = np.meshgrid(*([values] * len(inner)), indexing="ij")
        columns: dict[int, np.ndarray] = {outer: np.full(grids[0].size, lead)}
        for slot, grid in zip(inner, grids):
            columns[slot] = grid.ravel()
        partial_sum = sum(SIGNATURE[slot - 1] * columns[slot] for slot in free)
        columns[solved] = -SIGNATURE[solved - 1] * partial_sum
        for tied_value in values:
            columns[k] = np.full(columns[outer].size, tied_value)
            columns[l] = columns[k]
            block = np.column_stack([columns[slot] for slot in range(1, 7)])
            P = block[:, 0] - block[:, 1] - block[:, 2]
            keep = (np.abs(block[:, solved - 1]) <= N) & (np.abs(P) > N)
            if keep.any():
                yield block[keep]
