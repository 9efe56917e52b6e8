import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egd.errors import ConfigError, RangeError, ShapeError
from egd.fitness import (
    ConstraintSpec,
    FitnessRecord,
    ObjectiveEntry,
    ObjectiveSpec,
    cliffs_delta,
    constraint_violation,
    csv_header,
    dominance_matrix,
    dominates_constrained,
    evaluate_molecule,
    hypervolume_2d,
    normalize,
    pareto_front,
    pareto_mask,
    penalized_array,
    penalized_fitness,
    spea2_assign,
    spea2_select,
    spea2_truncate,
    target_error,
)
from egd.molecule import Molecule, evaluate_property, extract_fragment_bfs, make_molecule

unit = st.floats(0, 1, allow_nan=False)


def rec(objs, cv=0.0):
    return FitnessRecord(np.asarray(objs, dtype=float), cv)


# ---------------------------------------------------------------------------
# scalar pieces


def test_target_error_cases():
    assert target_error([1.0, 2.0], [1.0, 2.0]) == 0
    assert target_error([3.0], [1.0], "squared") == 4
    assert target_error([1.0, 2.0], [0.0, 4.0], "abs") == 3
    assert target_error([1.0, 2.0], [0.0, 4.0], "abs", [2.0, 0.5]) == 3
    with pytest.raises(ShapeError):
        target_error([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        target_error([1.0], [1.0], "cubic")


def test_constraint_violation_cases():
    assert constraint_violation([-1, -2], [0]) == 0
    assert constraint_violation([0.5], []) == 0.5
    assert constraint_violation([-1, 2], [-0.5]) == 2.5


def test_penalized_fitness_cases():
    assert penalized_fitness(0.3, 0.0, 5.0) == 0.3
    assert penalized_fitness(0.3, 0.1, 5.0) == 5.3
    with pytest.raises(RangeError):
        penalized_fitness(-1.0, 0.0, 1.0)


def test_penalized_array_ranks_every_feasible_first():
    rng = np.random.default_rng(0)
    for _ in range(300):
        m = int(rng.integers(1, 40))
        mae = rng.exponential(size=m) * rng.choice([0.0, 1.0], size=m, p=[0.1, 0.9])
        cv = np.where(rng.random(m) < 0.5, 0.0, rng.random(m))
        pen = penalized_array(mae, cv)
        feas, infeas = pen[cv == 0], pen[cv > 0]
        if feas.size and infeas.size:
            assert feas.max() <= infeas.min()
        np.testing.assert_array_equal(pen[cv == 0], mae[cv == 0])
    assert penalized_array(np.array([]), np.array([])).size == 0


# ---------------------------------------------------------------------------
# dominance and fronts


def test_dominance_cases():
    assert dominates_constrained(rec([1, 1]), rec([2, 2]))
    assert not dominates_constrained(rec([1, 3]), rec([3, 1]))
    assert not dominates_constrained(rec([3, 1]), rec([1, 3]))
    assert dominates_constrained(rec([9, 9]), rec([0, 0], 0.1))
    assert not dominates_constrained(rec([0, 0], 0.1), rec([9, 9]))
    assert not dominates_constrained(rec([0, 0], 0.1), rec([1, 1], 0.5))
    assert not dominates_constrained(rec([1, 1]), rec([1, 1]))
    with pytest.raises(ShapeError):
        dominates_constrained(rec([1, 1]), rec([1, 1, 1]))


def test_pareto_front_cases():
    same = [rec([1, 1]) for _ in range(4)]
    assert len(pareto_front(same)) == 4
    pts = [rec([1, 2]), rec([2, 1]), rec([2, 2])]
    assert [r.objectives.tolist() for r in pareto_front(pts)] == [[1, 2], [2, 1]]
    assert pareto_front([]) == []
    # with no feasible record, every infeasible one is on the front
    assert len(pareto_front([rec([1, 1], 1.0), rec([2, 2], 0.5)])) == 2


def test_pareto_front_matches_all_pairs_filter():
    rng = np.random.default_rng(1)
    for _ in range(20):
        objs = np.round(rng.random((200, 2)) * 20) / 20
        feas = rng.random(200) < 0.7
        keep = []
        for j in range(200):
            dominated = False
            for i in range(200):
                if feas[i] and not feas[j]:
                    dominated = True
                elif feas[i] and feas[j] and np.all(objs[i] <= objs[j]) and np.any(objs[i] < objs[j]):
                    dominated = True
                if dominated:
                    break
            keep.append(not dominated)
        np.testing.assert_array_equal(pareto_mask(objs, feas), keep)


@given(arrays(float, st.tuples(st.integers(1, 20), st.just(2)), elements=unit), st.data())
def test_dominance_is_a_strict_partial_order(objs, data):
    feas = np.array(data.draw(st.lists(st.booleans(), min_size=len(objs), max_size=len(objs))))
    dom = dominance_matrix(objs, feas)
    assert not dom.diagonal().any()
    assert not (dom & dom.T).any()
    # transitivity
    two = (dom.astype(int) @ dom.astype(int)) > 0
    assert not (two & ~dom).any()
    assert pareto_mask(objs, feas).any()


# ---------------------------------------------------------------------------
# SPEA2


def test_spea2_three_point_example():
    res = spea2_assign(np.array([[1.0, 1], [2, 2], [3, 3]]), np.ones(3, dtype=bool), k_density=1)
    np.testing.assert_array_equal(res.S, [2, 1, 0])
    np.testing.assert_array_equal(res.R, [0, 2, 3])
    np.testing.assert_allclose(res.sigma, [math.sqrt(2)] * 3)
    d = 1 / (math.sqrt(2) + 2)
    np.testing.assert_allclose(res.D, [d] * 3)
    np.testing.assert_allclose(res.F, [d, 2 + d, 3 + d])
    assert not res.clamped


def test_spea2_single_record():
    res = spea2_assign(np.array([[0.4, 0.2]]), np.array([True]))
    assert res.S[0] == 0 and res.R[0] == 0
    assert res.F[0] == res.D[0] < 1
    assert res.k == 0 and res.clamped


def test_spea2_k_defaults_and_validation():
    res = spea2_assign(np.random.default_rng(0).random((20, 2)), np.ones(20, dtype=bool))
    assert res.k == 4
    with pytest.raises(RangeError):
        spea2_assign(np.zeros((3, 2)), np.ones(3, dtype=bool), k_density=0)
    empty = spea2_assign(np.zeros((0, 2)), np.zeros(0, dtype=bool))
    assert empty.F.size == 0


def test_spea2_density_uses_normalised_distances():
    objs = np.array([[0.0, 0.0], [10.0, 0.0]])
    raw = spea2_assign(objs, np.ones(2, dtype=bool), 1)
    scaled = spea2_assign(objs, np.ones(2, dtype=bool), 1, bounds=np.array([[0.0, 10.0], [0.0, 1.0]]))
    assert raw.sigma[0] == 10.0
    assert scaled.sigma[0] == 1.0


def _reference_select(objs, feas, size):
    """Plain-loop SPEA2 environmental selection."""
    m = len(objs)
    dom = [[(feas[i] and not feas[j]) or (feas[i] and feas[j] and all(objs[i] <= objs[j]) and any(objs[i] < objs[j]))
            for j in range(m)] for i in range(m)]
    S = [sum(row) for row in dom]
    R = [sum(S[i] for i in range(m) if dom[i][j]) for j in range(m)]
    k = max(1, math.isqrt(m))
    k = min(k, m - 1)
    F = []
    for i in range(m):
        dists = sorted(math.dist(objs[i], objs[j]) for j in range(m) if j != i)
        sigma = dists[k - 1] if k >= 1 else 0.0
        F.append(R[i] + 1 / (sigma + 2))
    nd = [i for i in range(m) if F[i] < 1]
    if len(nd) < size:
        return sorted(sorted(range(m), key=lambda i: F[i])[:size])
    alive = list(nd)
    while len(alive) > size:
        profiles = [sorted(math.dist(objs[a], objs[b]) for b in alive if b != a) for a in alive]
        victim = min(range(len(alive)), key=lambda i: (profiles[i], i))
        alive.pop(victim)
    return sorted(alive)


def test_spea2_select_matches_reference():
    rng = np.random.default_rng(5)
    for trial in range(60):
        m = 64
        if trial % 3 == 0:
            # many mutually non-dominated points force truncation
            x = rng.random(m)
            objs = np.column_stack([x, 1 - x + rng.normal(scale=0.01, size=m)])
        else:
            objs = rng.random((m, 2))
        feas = rng.random(m) < 0.8
        size = int(rng.integers(4, 33))
        got, _ = spea2_select(objs, feas, size)
        assert got == _reference_select(objs, feas, size)


def test_spea2_truncate_removes_crowded_member_first():
    objs = np.array([[0.0, 1.0], [0.5, 0.5], [0.51, 0.49], [1.0, 0.0]])
    kept = spea2_truncate(objs, [0, 1, 2, 3], 3)
    # 1 and 2 tie on the nearest distance; 2 is closer to its second neighbour
    assert kept == [0, 1, 3]
    twin = np.array([[0.0, 1.0], [0.5, 0.5], [0.5, 0.5], [1.0, 0.0]])
    assert spea2_truncate(twin, [0, 1, 2, 3], 3) == [0, 2, 3]  # exact tie: earliest goes
    assert spea2_truncate(objs, [0, 3], 2) == [0, 3]


# ---------------------------------------------------------------------------
# indicators


def test_hypervolume_cases():
    assert hypervolume_2d(np.zeros((0, 2))) == 0.0
    assert hypervolume_2d([(1, 1)], ref=(2, 2)) == 1.0
    assert hypervolume_2d([(1, 2), (2, 1)], ref=(3, 3)) == 3.0
    assert hypervolume_2d([(1, 2), (2, 1), (2, 2)], ref=(3, 3)) == 3.0
    assert hypervolume_2d([(0.5, 1.5)]) == 0.0  # outside the reference box


@given(arrays(float, st.tuples(st.integers(0, 15), st.just(2)), elements=unit),
       arrays(float, st.tuples(st.integers(1, 5), st.just(2)), elements=unit))
def test_hypervolume_monotone_and_bounded(a, b):
    hv_a = hypervolume_2d(a)
    hv_ab = hypervolume_2d(np.concatenate([a, b]))
    assert 0.0 <= hv_a <= hv_ab + 1e-12
    assert hv_ab <= 1.0 + 1e-12


def test_cliffs_delta_cases():
    assert cliffs_delta([1, 2, 3], [1, 2, 3]) == 0
    assert cliffs_delta([5, 6], [1, 2, 3]) == 1
    assert cliffs_delta([1, 3], [2]) == 0
    assert cliffs_delta(np.arange(5) + 1, np.arange(5)) == pytest.approx(9 / 25)  # 15 wins, 6 losses
    with pytest.raises(RangeError):
        cliffs_delta([], [1])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_cliffs_delta_is_antisymmetric_and_bounded(x, y):
    d = cliffs_delta(x, y)
    assert -1 <= d <= 1
    assert d == pytest.approx(-cliffs_delta(y, x))


def test_normalize():
    objs = np.array([[1.0, 10.0], [3.0, 20.0]])
    np.testing.assert_allclose(normalize(objs, np.array([[1.0, 3.0], [10.0, 20.0]])), [[0, 0], [1, 1]])
    assert normalize(objs, None) is not None


# ---------------------------------------------------------------------------
# specs and evaluation


def test_spec_validation(rules):
    with pytest.raises(ConfigError):
        ObjectiveSpec("maximize", (ObjectiveEntry("atom_count"),))
    with pytest.raises(ConfigError):
        ObjectiveSpec("target", (ObjectiveEntry("atom_count"),))
    with pytest.raises(ConfigError):
        ObjectiveSpec("target", ())
    with pytest.raises(ConfigError):
        ObjectiveSpec("minimize", (ObjectiveEntry("atom_count"),), norm="l3")
    with pytest.raises(ConfigError):
        ConstraintSpec("sometimes")
    with pytest.raises(ConfigError):
        ConstraintSpec("property_max", "atom_count")
    spec = ObjectiveSpec("minimize", (ObjectiveEntry("volume"),))
    with pytest.raises(ConfigError):
        spec.validate(rules, False)
    spec = ObjectiveSpec("minimize", (ObjectiveEntry("atom_count"),), (ConstraintSpec("containment"),))
    with pytest.raises(ConfigError):
        spec.validate(rules, False)
    spec.validate(rules, True)
    assert ObjectiveSpec.from_dict(spec.to_dict()) == spec


def test_evaluate_target_mode(world, rules):
    mol = world.molecules[0]
    spec = ObjectiveSpec("target", (ObjectiveEntry("typed_moment", 0.5), ObjectiveEntry("radius_of_gyration", 2.0, 2.0)),
                         (ConstraintSpec("validity"), ConstraintSpec("property_max", "atom_count", 6.0),
                          ConstraintSpec("property_eq", "type_fraction:1", 0.5)))
    ev = evaluate_molecule(mol, spec, rules)
    tm = evaluate_property(mol, "typed_moment", rules)
    rg = evaluate_property(mol, "radius_of_gyration", rules)
    np.testing.assert_allclose(ev.objectives, [abs(tm - 0.5), abs(rg - 2.0)])
    assert ev.mae == pytest.approx(abs(tm - 0.5) + 2 * abs(rg - 2.0))
    assert ev.g.tolist() == [0.0, 2.0]
    frac_c = float(np.mean(mol.types == 1))
    assert ev.h.tolist() == pytest.approx([frac_c - 0.5])
    assert ev.cv == pytest.approx(2.0 + abs(frac_c - 0.5))
    assert ev.valid and not ev.feasible


def test_evaluate_minimize_mode_and_validity_constraint(rules):
    # two C atoms too far apart: each unstable, and disconnected
    mol = make_molecule(np.array([[0.0, 0, 0], [5.0, 0, 0]]), np.array([1, 1]), rules)
    spec = ObjectiveSpec("minimize", (ObjectiveEntry("radius_of_gyration"), ObjectiveEntry("pairwise_energy")),
                         (ConstraintSpec("validity"),))
    ev = evaluate_molecule(mol, spec, rules)
    assert ev.objectives.tolist() == pytest.approx([2.5, 1 / 26])
    assert ev.g.tolist() == [2.0]
    assert not ev.valid and ev.cv == 2.0


def test_evaluate_containment_constraint(world, rules):
    mol = world.molecules[0]
    frag = extract_fragment_bfs(mol, 0, 3)
    spec = ObjectiveSpec("minimize", (ObjectiveEntry("atom_count"),), (ConstraintSpec("containment"),))
    ev = evaluate_molecule(mol, spec, rules, frag)
    assert ev.containment == 1.0 and ev.feasible
    lone = Molecule(np.zeros((1, 3)), np.array([0]))
    ev = evaluate_molecule(lone, spec, rules, frag)
    assert ev.g[0] == 1.0 - ev.containment


def test_csv_row_layout():
    r = FitnessRecord(np.array([0.1, 0.2]), 0.0, 0.5, 0.7)
    row = r.csv_row(3, 1)
    assert len(row) == len(csv_header(2))
    assert row[:2] == [3, 1] and row[-1] == 1
    assert float(row[2]) == 0.1
