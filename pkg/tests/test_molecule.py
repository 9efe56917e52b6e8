import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egd.diffusion import State
from egd.errors import DecodeError, ExtractionError, RegistryError, RulesError
from egd.molecule import (
    Fragment,
    Molecule,
    TypeRules,
    check_validity,
    containment_ratio,
    decode,
    default_rules,
    encode,
    evaluate_property,
    extract_fragment_bfs,
    infer_bonds,
    make_molecule,
    make_reference_dataset,
    molecule_from_dict,
    molecule_from_xyz,
    random_tree_molecule,
    smoothed_denoiser,
    type_prior,
)

C, H, N, O = 1, 0, 2, 3


def graph(types, bonds):
    """Molecule with the given bond graph and dummy positions (graph algorithms ignore geometry)."""
    return Molecule(np.zeros((len(types), 3)), np.array(types), frozenset((min(a, b), max(a, b)) for a, b in bonds))


def path(n, t=C):
    return graph([t] * n, [(i, i + 1) for i in range(n - 1)])


# ---------------------------------------------------------------------------
# decoding and bonds


def test_decode_argmax_and_ties(rules):
    s = State(np.zeros((2, 3)), np.array([[0.1, 0.9, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]]))
    s.coords[1, 0] = 5.0
    mol = decode(s, rules)
    assert mol.types.tolist() == [1, 0]


def test_decode_rejects_bad_states(rules):
    with pytest.raises(DecodeError):
        decode(State(np.zeros((2, 3)), np.zeros((2, 4)), 3), rules)
    with pytest.raises(DecodeError):
        decode(State(np.full((2, 3), np.nan), np.zeros((2, 4))), rules)
    with pytest.raises(DecodeError):
        decode(State(np.zeros((2, 3)), np.zeros((2, 3))), rules)


def test_bond_window_boundaries(rules):
    lo, hi = rules.window(C, C)
    types = np.array([C, C])
    assert infer_bonds(np.array([[0, 0, 0], [lo, 0, 0]], dtype=float), types, rules) == {(0, 1)}
    assert infer_bonds(np.array([[0, 0, 0], [hi, 0, 0]], dtype=float), types, rules) == frozenset()
    assert infer_bonds(np.zeros((1, 3)), np.array([C]), rules) == frozenset()


def test_chain_geometry_gives_path(rules):
    pos = np.array([[1.5 * i, 0.0, 0.0] for i in range(4)])
    mol = make_molecule(pos, np.full(4, C), rules)
    assert mol.bonds == {(0, 1), (1, 2), (2, 3)}


def test_bonds_match_all_pairs_oracle(rules):
    rng = np.random.default_rng(0)
    for _ in range(50):
        pos = rng.uniform(-2, 2, size=(8, 3))
        types = rng.integers(0, 4, 8)
        expected = set()
        for i in range(8):
            for j in range(i + 1, 8):
                lo, hi = rules.window(int(types[i]), int(types[j]))
                if lo <= math.dist(pos[i], pos[j]) < hi:
                    expected.add((i, j))
        assert infer_bonds(pos, types, rules) == expected


def test_rules_validation():
    with pytest.raises(RulesError):
        TypeRules(("A",), {(0, 0): (1.0, 0.5)}, {0: (1, 1)})
    with pytest.raises(RulesError):
        TypeRules(("A", "B"), {(0, 1): (1.0, 2.0), (1, 0): (1.0, 3.0)}, {0: (1, 1), 1: (1, 1)})
    with pytest.raises(RulesError):
        TypeRules(("A",), {(0, 0): (1.0, 2.0)}, {0: (2, 1)})
    with pytest.raises(RulesError):
        default_rules().window(0, 7)


def same_molecule(a, b):
    return a.types.tolist() == b.types.tolist() and a.bonds == b.bonds and np.allclose(a.positions, b.positions, atol=1e-12)


def test_encode_decode_round_trip(world):
    for mol in world.molecules:
        assert same_molecule(decode(encode(mol, 4), world.rules), mol)


def test_dict_and_xyz_round_trip(world, rules):
    mol = world.molecules[0]
    assert same_molecule(molecule_from_dict(mol.to_dict(), rules), mol)
    back = molecule_from_xyz(mol.to_xyz(rules, "x"), rules)
    assert back.types.tolist() == mol.types.tolist()
    assert back.bonds == mol.bonds
    np.testing.assert_allclose(back.positions, mol.positions, atol=1e-5)


# ---------------------------------------------------------------------------
# validity


def test_validity_hand_cases():
    single = TypeRules(("X",), {(0, 0): (1.0, 2.0)}, {0: (0, 2)})
    rep = check_validity(make_molecule(np.zeros((1, 3)), np.array([0]), single), single)
    assert (rep.atom_stable_fraction, rep.molecule_stable, rep.valid) == (1.0, True, True)
    rules = default_rules()
    far = make_molecule(np.array([[0, 0, 0], [10, 0, 0]], dtype=float), np.array([C, C]), rules)
    rep = check_validity(far, rules)
    assert (rep.atom_stable_fraction, rep.molecule_stable, rep.valid) == (0.0, False, False)


def test_disconnected_but_stable_is_invalid(rules):
    mol = graph([H, H, H, H], [(0, 1), (2, 3)])
    rep = check_validity(mol, rules)
    assert rep.molecule_stable and not rep.valid


def test_stability_matches_recount(world):
    from egd.diffusion import sample_unconditional

    rules = world.rules
    states = sample_unconditional(8, 4, world.schedule, world.denoiser, [np.random.default_rng(i) for i in range(200)])
    for s in states:
        mol = decode(s, rules)
        deg = [sum(1 for b in mol.bonds if i in b) for i in range(mol.n)]
        ok = [rules.valence[int(k)][0] <= deg[i] <= rules.valence[int(k)][1] for i, k in enumerate(mol.types)]
        rep = check_validity(mol, rules)
        assert rep.atom_stable_fraction == sum(ok) / mol.n
        assert rep.molecule_stable == all(ok)


# ---------------------------------------------------------------------------
# fragments


def test_bfs_extraction_cases(world):
    mol = world.molecules[0]
    whole = extract_fragment_bfs(mol, 0, mol.n)
    assert whole.n == mol.n and len(whole.molecule.bonds) == len(mol.bonds)
    one = extract_fragment_bfs(mol, 3, 1)
    assert one.n == 1 and not one.molecule.bonds
    p = path(5)
    frag = extract_fragment_bfs(p, 0, 3)
    assert frag.molecule.bonds == {(0, 1), (1, 2)}
    assert np.allclose(frag.molecule.positions.mean(axis=0), 0)


def test_bfs_extraction_errors():
    p = graph([C, C, C], [(0, 1)])
    with pytest.raises(ExtractionError):
        extract_fragment_bfs(p, 5, 1)
    with pytest.raises(ExtractionError):
        extract_fragment_bfs(p, 0, 0)
    with pytest.raises(ExtractionError):
        extract_fragment_bfs(p, 0, 3)


def test_injection_order_walks_bonds():
    star = Fragment(graph([C, C, C, C], [(0, 1), (0, 2), (0, 3)]))
    assert star.injection_order() == [1, 0, 2, 3]
    chain = Fragment(graph([C, O, N], [(0, 1), (0, 2)]))
    order = chain.injection_order()
    bonds = chain.molecule.bonds
    assert all((min(a, b), max(a, b)) in bonds for a, b in zip(order, order[1:]))


def _oracle_containment(mol, frag):
    """Exhaustive search over connected fragment subsets and injective type-consistent maps."""
    f = frag
    fadj = {i: set() for i in range(f.n)}
    for a, b in f.bonds:
        fadj[a].add(b)
        fadj[b].add(a)
    for size in range(f.n, 0, -1):
        for subset in itertools.combinations(range(f.n), size):
            sub = set(subset)
            seen, stack = {subset[0]}, [subset[0]]
            while stack:
                a = stack.pop()
                for b in fadj[a] & sub:
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            if seen != sub:
                continue
            for image in itertools.permutations(range(mol.n), size):
                m = dict(zip(subset, image))
                if any(mol.types[m[a]] != f.types[a] for a in subset):
                    continue
                if all((min(m[a], m[b]), max(m[a], m[b])) in mol.bonds for a, b in f.bonds if a in sub and b in sub):
                    return size / f.n
    return 0.0


def test_containment_hand_cases():
    mol = graph([C, C, O, N], [(0, 1), (1, 2), (1, 3)])
    induced = graph([C, O], [(0, 1)])
    assert containment_ratio(mol, induced) == 1.0
    assert containment_ratio(path(4, C), graph([H, H], [(0, 1)])) == 0.0
    star = graph([C, C, C, C], [(0, 1), (0, 2), (0, 3)])
    assert containment_ratio(path(4, C), star) == 0.75
    assert _oracle_containment(path(4, C), star) == 0.75


def test_containment_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(150):
        n_m, n_f = int(rng.integers(1, 7)), int(rng.integers(1, 5))

        def random_graph(n):
            types = rng.integers(1, 4, n).tolist()
            bonds = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.45]
            return graph(types, bonds)

        mol, frag = random_graph(n_m), random_graph(n_f)
        assert containment_ratio(mol, frag) == pytest.approx(_oracle_containment(mol, frag), abs=1e-15)


def test_containment_of_extracted_fragment_is_one(world):
    for mol in world.molecules:
        frag = extract_fragment_bfs(mol, 2, 4)
        assert containment_ratio(mol, frag) == 1.0


def test_containment_rejects_huge_fragments():
    with pytest.raises(ExtractionError):
        containment_ratio(path(3), path(13))


# ---------------------------------------------------------------------------
# properties


def test_property_hand_cases(rules):
    lone = make_molecule(np.zeros((1, 3)), np.array([C]), rules)
    assert evaluate_property(lone, "radius_of_gyration", rules) == 0.0
    pair = make_molecule(np.array([[-1.0, 0, 0], [1.0, 0, 0]]), np.array([O, O]), rules)
    assert evaluate_property(pair, "typed_moment", rules) == 0.0
    assert evaluate_property(pair, "atom_count", rules) == 2.0
    assert evaluate_property(pair, "pairwise_energy", rules) == pytest.approx(1 / 5)
    assert evaluate_property(pair, "type_fraction:3", rules) == 1.0


def test_properties_match_plain_arithmetic(rules):
    rng = np.random.default_rng(4)
    for _ in range(20):
        mol = random_tree_molecule(6, rules, rng)
        x = mol.positions - mol.positions.mean(axis=0)
        rg = math.sqrt(sum(float(v @ v) for v in x) / 6)
        q = [rules.charges[k] for k in mol.types]
        mom = [sum(q[i] * x[i][a] for i in range(6)) for a in range(3)]
        energy = sum(1 / (1 + math.dist(mol.positions[i], mol.positions[j]) ** 2) for i in range(6) for j in range(i + 1, 6))
        assert evaluate_property(mol, "radius_of_gyration", rules) == pytest.approx(rg, abs=1e-12)
        assert evaluate_property(mol, "typed_moment", rules) == pytest.approx(math.hypot(*mom), abs=1e-12)
        assert evaluate_property(mol, "pairwise_energy", rules) == pytest.approx(energy, abs=1e-12)
        for k in range(4):
            assert evaluate_property(mol, f"type_fraction:{k}", rules) == pytest.approx(list(mol.types).count(k) / 6)


def test_unknown_properties(rules):
    mol = path(2)
    for bad in ("volume", "type_fraction:9", "type_fraction:x"):
        with pytest.raises(RegistryError):
            evaluate_property(mol, bad, rules)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_random_trees_are_valid_trees(n, seed):
    rules = default_rules()
    mol = random_tree_molecule(n, rules, np.random.default_rng(seed))
    assert check_validity(mol, rules).valid
    assert len(mol.bonds) == n - 1


# ---------------------------------------------------------------------------
# reference data


def test_reference_dataset_is_reproducible(rules):
    a = make_reference_dataset(3, 6, rules, 9)
    b = make_reference_dataset(3, 6, rules, 9)
    assert all(x == y for x, y in zip(a, b))


def test_type_prior_rows(rules, world):
    mol = world.molecules[0]
    p = type_prior(mol, rules, 0.5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p[np.arange(mol.n), mol.types] >= 0.5)
    deg = mol.degrees()
    for i in range(mol.n):
        allowed = rules.compatible_types(int(deg[i]))
        assert np.all(p[i, [k for k in range(4) if k not in allowed]] == 0)
    np.testing.assert_array_equal(type_prior(mol, rules, 0.0), np.eye(4)[mol.types])
    weighted = type_prior(mol, rules, 1.0, [1.0, 1.0, 0.0, 1.0])
    assert np.all(weighted[:, N] == 0)


def test_smoothed_denoiser_samples_are_valid_mostly(world):
    den = smoothed_denoiser(world.molecules, world.rules, 0.0, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = den.sample(8, rng)
        assert check_validity(decode(s, world.rules), world.rules).valid
