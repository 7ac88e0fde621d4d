"""Tests for sextic index families, pairing classes and the second-moment machinery."""

from __future__ import annotations

from collections import defaultdict
import itertools
import math

import numpy as np
import pytest

from mkdvlab.errors import FitError, WickBudgetExceeded
from mkdvlab.measures import GaussianSamplerSpec
from mkdvlab.pairing import (
    MINUS_SLOTS,
    PLUS_SLOTS,
    CoefficientKind,
    FamilyTag,
    IndexVector6,
    PairingClass,
    annal_bound,
    classify,
    coefficient,
    decay_fit,
    duality_constant,
    duality_sign,
    enumerate_family,
    estar_l2_decay,
    family_array,
    family_mask,
    field_functional,
    in_family,
    isserlis_second_moment,
    monomials,
    partner,
    pathwise_sum,
    pathwise_sums,
    wick_second_moment,
)
from tests.field_factory import gaussian_draw

KIND_A = CoefficientKind("A")


def _brute_members(N: int) -> list[tuple[int, ...]]:
    members = []
    for j in itertools.product(range(-N, N + 1), repeat=6):
        P = j[0] - j[1] - j[2]
        if P + j[3] - j[4] + j[5] == 0 and abs(P) > N:
            members.append(j)
    return members


def _is_unpaired(j: tuple[int, ...]) -> bool:
    return all(j[a - 1] != j[b - 1] for a in PLUS_SLOTS for b in MINUS_SLOTS)


def _brute_coefficient_a(j: tuple[int, ...]) -> float:
    P = j[0] - j[1] - j[2]
    Q = j[3] - j[4] + j[5]
    return P * Q * j[5] / math.prod(math.sqrt(1.0 + value**4) for value in j)


@pytest.mark.parametrize(
    ("j", "expected"),
    [
        ((1, 2, 3, 4, 5, 6), PairingClass(0)),
        ((7, 7, 3, 2, 5, 6), PairingClass(1, (1,), (2,))),
        ((1, 1, 9, 4, 4, 3), PairingClass(2, (1, 4), (2, 5))),
    ],
    ids=["zero", "one", "two"],
)
def test_classify_examples(j: tuple[int, ...], expected: PairingClass) -> None:
    assert classify(IndexVector6(j)) == expected


def test_pairing_class_helpers() -> None:
    assert PairingClass(0).is_zero
    assert PairingClass(1, (1,), (2,)).slot_pair == (1, 2)
    assert PairingClass(2, (1, 4), (2, 5)).slot_pair is None


def test_index_vector_derived_quantities() -> None:
    v = IndexVector6((3, -3, 2, -2, 3, 1))
    assert v.L == 0
    assert v.P == 4
    with pytest.raises(ValueError):
        IndexVector6((1, 2, 3))  # type: ignore[arg-type]


def test_in_family_examples() -> None:
    v = IndexVector6((3, -3, 2, -2, 3, 1))
    assert not in_family(v, 3, FamilyTag("I0"))
    assert in_family(v, 3, FamilyTag("I", 1, 5))
    assert in_family(v, 3, FamilyTag("ALL"))
    assert not in_family(v, 4, FamilyTag("ALL"))
    assert not in_family(IndexVector6((3, 1, 1, 2, 5, 2)), 5, FamilyTag("ALL"))
    assert not in_family(IndexVector6((7, 0, 0, 0, 0, -7)), 5, FamilyTag("ALL"))

    unpaired = IndexVector6((3, -2, 1, -3, 0, -1))
    assert in_family(unpaired, 3, FamilyTag("I0"))
    assert not in_family(unpaired, 3, FamilyTag("MULTI"))


def test_tilde_and_hat_split_on_distinct_values() -> None:
    hat = IndexVector6((3, -2, 0, -3, 0, -2))
    tilde = IndexVector6((3, 1, -2, -3, 2, 1))
    for v, in_tilde in ((hat, False), (tilde, True)):
        assert in_family(v, 3, FamilyTag("I", 2, 6))
        assert in_family(v, 3, FamilyTag("TildeI", 2, 6)) is in_tilde
        assert in_family(v, 3, FamilyTag("HatI", 2, 6)) is not in_tilde
        assert not in_family(v, 3, FamilyTag("TildeI", 3, 6))


def test_family_tag_parsing() -> None:
    tag = FamilyTag.parse("TildeI(2, 6)")
    assert tag.tie == (6, 2)
    assert str(tag) == "TildeI(2,6)"
    assert FamilyTag.parse("I(1,5)").tie == (1, 5)
    assert FamilyTag.parse("I0").tie is None
    for bad in ("I(1,4)", "I(2,3)", "Foo", "TildeI(2,7)"):
        with pytest.raises(ValueError):
            FamilyTag.parse(bad)
    with pytest.raises(ValueError):
        FamilyTag("ALL", 1, 2)


def test_coefficient_kind_parsing() -> None:
    kind = CoefficientKind.parse("An(3)")
    assert (kind.n, kind.sampler_level, str(kind)) == (3, 3, "An(3)")
    assert CoefficientKind.parse("B").sampler_level == 2
    with pytest.raises(ValueError):
        CoefficientKind.parse("An(1)")
    with pytest.raises(ValueError):
        CoefficientKind.parse("D")


def test_coefficient_matches_closed_form() -> None:
    v = IndexVector6((3, -3, 2, -2, 3, 1))
    assert coefficient(v, KIND_A) == pytest.approx(_brute_coefficient_a(v.j), rel=1e-14)
    assert coefficient(IndexVector6((0, 1, 2, 3, 4, 5)), CoefficientKind("B")) == 0.0


def test_enumeration_counts_match_brute_force() -> None:
    members = _brute_members(2)
    assert len(family_array(2, FamilyTag("ALL"))) == len(members)
    assert len(family_array(2, FamilyTag("I0"))) == sum(1 for j in members if _is_unpaired(j))
    assert len(family_array(1, FamilyTag("I0"))) == sum(1 for j in _brute_members(1) if _is_unpaired(j))


def test_enumeration_is_lexicographic_and_self_consistent() -> None:
    for text in ("I0", "MULTI", "I(1,5)", "TildeI(2,6)", "HatI(3,6)"):
        tag = FamilyTag.parse(text)
        rows = [v.j for v in enumerate_family(2, tag)]
        assert rows == sorted(rows)
        assert len(set(rows)) == len(rows)
        assert all(in_family(IndexVector6(j), 2, tag) for j in rows)


@pytest.mark.parametrize("text", ["I(1,5)", "I(4,3)", "I(2,6)", "TildeI(3,6)", "HatI(3,6)"])
def test_tied_enumeration_matches_filtered_full_family(text: str) -> None:
    tag = FamilyTag.parse(text)
    everything = family_array(3, FamilyTag("ALL"))
    expected = everything[family_mask(everything, tag)]
    assert np.array_equal(family_array(3, tag), expected)


@pytest.mark.parametrize("slots", [(2, 6), (3, 6)])
def test_tilde_and_hat_partition_one_pairings(slots: tuple[int, int]) -> None:
    k, l = slots
    whole = len(family_array(3, FamilyTag("I", k, l)))
    assert whole == len(family_array(3, FamilyTag("TildeI", k, l))) + len(family_array(3, FamilyTag("HatI", k, l)))
    assert whole > 0


def test_double_pairing_forces_triple_pairing() -> None:
    rows = family_array(3, FamilyTag("MULTI"))
    assert rows.shape[0] > 0
    assert all(classify(IndexVector6(tuple(row))).r == 3 for row in rows)


@pytest.mark.parametrize("slots", [(2, 6), (3, 6)])
def test_partner_cancels_imaginary_part(slots: tuple[int, int]) -> None:
    tag = FamilyTag("TildeI", *slots)
    g = gaussian_draw(3, seed=5)
    for row in family_array(3, tag):
        v = IndexVector6(tuple(row))
        w = partner(v)
        assert in_family(w, 3, tag)
        assert coefficient(w, KIND_A) == pytest.approx(coefficient(v, KIND_A), rel=1e-13)
        pair = np.array([v.j, w.j], dtype=np.int64)
        values = monomials(pair, g, 3)
        assert values[1] == pytest.approx(np.conj(values[0]), rel=1e-12, abs=1e-14)
    with pytest.raises(ValueError):
        partner(IndexVector6((1, 2, 3, 4, 5, 6)))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_tilde_sums_are_real(seed: int) -> None:
    g = gaussian_draw(4, seed)
    total = pathwise_sum(4, FamilyTag("TildeI", 2, 6), KIND_A, g) + pathwise_sum(
        4, FamilyTag("TildeI", 3, 6), KIND_A, g
    )
    assert abs(total.imag) <= 1e-10 * (1.0 + abs(total))
    multi = pathwise_sum(4, FamilyTag("MULTI"), KIND_A, g)
    assert abs(multi.imag) <= 1e-10 * (1.0 + abs(multi))


def test_pathwise_sum_edges() -> None:
    assert pathwise_sum(3, FamilyTag("I0"), KIND_A, np.zeros(7)) == 0
    with pytest.raises(ValueError):
        pathwise_sum(3, FamilyTag("I0"), KIND_A, np.zeros(5))
    draws = np.stack([gaussian_draw(2, seed) for seed in range(4)])
    batch = pathwise_sums(2, FamilyTag("ALL"), KIND_A, draws)
    single = [pathwise_sum(2, FamilyTag("ALL"), KIND_A, row) for row in draws]
    assert np.allclose(batch, single, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("text", ["A", "B", "C"])
def test_pathwise_sum_matches_field_functional(text: str) -> None:
    N = 8
    kind = CoefficientKind.parse(text)
    draws = np.stack([gaussian_draw(N, seed) for seed in range(40, 46)])
    spectral = pathwise_sums(N, FamilyTag("ALL"), kind, draws).imag
    physical = np.array([field_functional(g, N, kind) for g in draws])
    ratios = spectral / physical
    assert np.all(np.abs(physical) > 1e-8)
    assert np.allclose(ratios, ratios[0], rtol=1e-8)
    assert ratios[0] == pytest.approx(duality_sign(kind) * duality_constant(), rel=1e-8)


@pytest.mark.parametrize("seed", [11, 12])
def test_pathwise_sum_matches_field_functional_at_higher_level(seed: int) -> None:
    kind = CoefficientKind.parse("An(3)")
    g = gaussian_draw(3, seed)
    spectral = pathwise_sum(3, FamilyTag("ALL"), kind, g).imag
    physical = duality_sign(kind) * duality_constant() * field_functional(g, 3, kind)
    assert spectral == pytest.approx(physical, rel=1e-8, abs=1e-12)


def test_isserlis_small_cases() -> None:
    assert isserlis_second_moment(np.array([1.0]), np.array([[1, 0]]), np.array([[0, 1]])) == pytest.approx(1.0)
    assert isserlis_second_moment(np.array([1.0]), np.array([[1]]), np.array([[1]])) == pytest.approx(2.0)
    two_terms = isserlis_second_moment(np.array([1.0, 1.0]), np.array([[1, 0], [0, 1]]), np.zeros((2, 2), dtype=int))
    assert two_terms == pytest.approx(2.0)
    assert isserlis_second_moment(np.array([]), np.zeros((0, 1)), np.zeros((0, 1))) == 0.0


def test_wick_moment_agrees_with_monte_carlo() -> None:
    tag = FamilyTag("I0")
    exact = wick_second_moment(2, tag, KIND_A)
    assert exact > 0
    rng = np.random.default_rng(2024)
    values = []
    for _ in range(20):
        G = (rng.standard_normal((1000, 5)) + 1j * rng.standard_normal((1000, 5))) / math.sqrt(2.0)
        values.append(np.abs(pathwise_sums(2, tag, KIND_A, G)) ** 2)
    samples = np.concatenate(values)
    stderr = samples.std(ddof=1) / math.sqrt(samples.size)
    assert abs(samples.mean() - exact) <= 5.0 * stderr


def test_wick_budget_is_enforced() -> None:
    with pytest.raises(WickBudgetExceeded):
        wick_second_moment(5, FamilyTag("I0"), KIND_A)


def test_annal_bound_for_unpaired_family_is_sum_of_squares() -> None:
    expected = math.fsum(_brute_coefficient_a(j) ** 2 for j in _brute_members(2) if _is_unpaired(j))
    assert annal_bound(2, FamilyTag("I0"), KIND_A) == pytest.approx(expected, rel=1e-12)


def test_annal_bound_groups_one_pairings_by_free_indices() -> None:
    groups: dict[tuple[int, ...], float] = defaultdict(float)
    tag = FamilyTag("I", 1, 5)
    for j in _brute_members(2):
        if in_family(IndexVector6(j), 2, tag):
            groups[(j[1], j[2], j[3], j[5])] += abs(_brute_coefficient_a(j))
    expected = math.fsum(value**2 for value in groups.values())
    assert annal_bound(2, tag, KIND_A) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kind", ["A", "B"])
@pytest.mark.parametrize(
    ("tag", "ladder"),
    [
        (FamilyTag("I0"), (4, 8, 12)),
        (FamilyTag("I", 1, 5), (4, 8, 16)),
        (FamilyTag("HatI", 2, 6), (4, 8, 16)),
    ],
)
def test_annal_bound_decays_with_N(tag: FamilyTag, ladder: tuple[int, ...], kind: str) -> None:
    points = [(N, annal_bound(N, tag, CoefficientKind(kind))) for N in ladder]
    assert all(value > 0 for _, value in points)
    slope, _ = decay_fit(points)
    assert slope <= -0.7


def test_decay_fit() -> None:
    slope, stderr = decay_fit([(1, 1.0), (2, 0.5), (4, 0.25), (8, 0.125)])
    assert slope == pytest.approx(-1.0)
    assert stderr == pytest.approx(0.0, abs=1e-12)
    flat, _ = decay_fit([(2, 3.0), (4, 3.0), (8, 3.0)])
    assert flat == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(FitError):
        decay_fit([(2, 1.0), (4, 0.5)])
    with pytest.raises(FitError):
        decay_fit([(2, 1.0), (4, 0.0), (8, 0.5)])


def test_estar_decay_vanishes_for_tiny_cutoff() -> None:
    spec = GaussianSamplerSpec(n=2, K=7, seed=3)
    series = estar_l2_decay(3, [2], 1e-9, spec, n_samples=3)
    assert [N for N, _ in series] == [2]
    assert series[0][1].mean == 0.0
    with pytest.raises(ValueError):
        estar_l2_decay(4, [2], 5.0, spec, n_samples=3)
    with pytest.raises(ValueError):
        estar_l2_decay(3, [2], 5.0, GaussianSamplerSpec(n=3, K=7, seed=3), n_samples=3)
