"""Toy molecule semantics for decoded point clouds.

Bonds come from distance windows per type pair, stability from per-type
degree windows.  None of this is real chemistry; it only has to be a fixed,
well-defined rule set that diffusion samples can satisfy or violate.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffusion import SmoothedDatasetDenoiser, State, center
from .errors import DecodeError, ExtractionError, RegistryError, RulesError

MAX_FRAGMENT_ATOMS = 12


@dataclass(frozen=True)
class TypeRules:
    """Surrogate chemistry.

    ``bond_windows`` maps an unordered type pair to ``[min, max)`` bond
    distances, ``valence`` maps a type to its allowed ``[min, max]`` degree.
    ``charges`` feed the ``typed_moment`` property.
    """

    symbols: tuple[str, ...]
    bond_windows: dict[tuple[int, int], tuple[float, float]]
    valence: dict[int, tuple[int, int]]
    charges: tuple[float, ...] = ()

    def __post_init__(self):
        windows = {}
        for (a, b), (lo, hi) in self.bond_windows.items():
            if not lo < hi:
                raise RulesError(f"bond window for {(a, b)} must have min < max")
            key = (min(a, b), max(a, b))
            if key in windows and windows[key] != (lo, hi):
                raise RulesError(f"conflicting windows for {key}")
            windows[key] = (float(lo), float(hi))
        object.__setattr__(self, "bond_windows", windows)
        for k, (lo, hi) in self.valence.items():
            if not lo <= hi:
                raise RulesError(f"valence window for type {k} must have min <= max")
        if not self.charges:
            object.__setattr__(self, "charges", (0.0,) * len(self.symbols))

    @property
    def d(self) -> int:
        return len(self.symbols)

    def window(self, a: int, b: int) -> tuple[float, float]:
        try:
            return self.bond_windows[(min(a, b), max(a, b))]
        except KeyError:
            raise RulesError(f"no bond window for type pair {(a, b)}") from None

    def valence_window(self, k: int) -> tuple[int, int]:
        try:
            return self.valence[int(k)]
        except KeyError:
            raise RulesError(f"no valence window for type {k}") from None

    def compatible_types(self, degree: int) -> list[int]:
        return [k for k in range(self.d) if self.valence_window(k)[0] <= degree <= self.valence_window(k)[1]]


def default_rules() -> TypeRules:
    """Four types loosely modelled on H, C, N, O."""
    heavy = (1, 2, 3)
    windows = {(0, 0): (0.6, 0.9)}
    for a in heavy:
        windows[(0, a)] = (0.9, 1.4)
        for b in heavy:
            if a <= b:
                windows[(a, b)] = (1.1, 1.8)
    return TypeRules(
        symbols=("H", "C", "N", "O"),
        bond_windows=windows,
        valence={0: (1, 1), 1: (1, 4), 2: (1, 3), 3: (1, 2)},
        charges=(0.3, 0.0, -0.3, -0.5),
    )


# ---------------------------------------------------------------------------
# molecules


@dataclass(frozen=True, eq=False)
class Molecule:
    positions: np.ndarray
    types: np.ndarray
    bonds: frozenset = field(default_factory=frozenset)

    @property
    def n(self) -> int:
        return len(self.types)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.types, other.types)
            and self.bonds == other.bonds
        )

    __hash__ = None  # type: ignore[assignment]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        for row in adj:
            row.sort()
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.bonds:
            deg[i] += 1
            deg[j] += 1
        return deg

    def to_dict(self) -> dict:
        return {"positions": self.positions.tolist(), "types": [int(k) for k in self.types]}

    def to_xyz(self, rules: TypeRules, comment: str = "") -> str:
        lines = [str(self.n), comment]
        for k, (x, y, z) in zip(self.types, self.positions):
            lines.append(f"{rules.symbols[k]} {x:.6f} {y:.6f} {z:.6f}")
        return "\n".join(lines) + "\n"


def molecule_from_dict(data: dict, rules: TypeRules, recenter: bool = True) -> Molecule:
    return make_molecule(np.array(data["positions"], dtype=float).reshape(-1, 3), np.array(data["types"], dtype=int), rules,
                         recenter=recenter)


def molecule_from_xyz(text: str, rules: TypeRules) -> Molecule:
    lines = text.strip("\n").splitlines()
    n = int(lines[0])
    index = {s: k for k, s in enumerate(rules.symbols)}
    types, pos = [], []
    for line in lines[2 : 2 + n]:
        sym, *xyz = line.split()
        types.append(index[sym])
        pos.append([float(v) for v in xyz])
    return make_molecule(np.array(pos), np.array(types), rules)


def make_molecule(positions: np.ndarray, types: np.ndarray, rules: TypeRules, recenter: bool = True) -> Molecule:
    positions = np.asarray(positions, dtype=float)
    types = np.asarray(types, dtype=int)
    if recenter:
        positions = center(positions)
    return Molecule(positions, types, infer_bonds(positions, types, rules))


def infer_bonds(positions: np.ndarray, types: np.ndarray, rules: TypeRules) -> frozenset:
    """Pairs ``(i, j)``, ``i < j``, whose distance is in ``[min, max)`` for their types."""
    positions = np.asarray(positions, dtype=float)
    if not np.all(np.isfinite(positions)):
        raise DecodeError("non-finite positions")
    n = len(types)
    if n < 2:
        return frozenset()
    i, j = np.triu_indices(n, k=1)
    dist = np.linalg.norm(positions[i] - positions[j], axis=1)
    lo = np.empty(len(i))
    hi = np.empty(len(i))
    for p, (a, b) in enumerate(zip(types[i], types[j])):
        lo[p], hi[p] = rules.window(int(a), int(b))
    mask = (dist >= lo) & (dist < hi)
    return frozenset(zip(i[mask].tolist(), j[mask].tolist()))


def decode(state: State, rules: TypeRules) -> Molecule:
    """Argmax-decode features (ties to the lowest index) and infer bonds."""
    if state.t != 0:
        raise DecodeError(f"decode expects a clean state, got t={state.t}")
    if not (np.all(np.isfinite(state.coords)) and np.all(np.isfinite(state.feats))):
        raise DecodeError("state has non-finite entries")
    if state.feats.shape[1] != rules.d:
        raise DecodeError(f"feature width {state.feats.shape[1]} != {rules.d} types")
    return make_molecule(state.coords, np.argmax(state.feats, axis=1), rules)


def encode(mol: Molecule, d: int) -> State:
    return State(center(mol.positions), np.eye(d)[mol.types], 0)


# ---------------------------------------------------------------------------
# validity


@dataclass(frozen=True)
class ValidityReport:
    atom_stable_fraction: float
    molecule_stable: bool
    valid: bool


def connected_components(n: int, bonds: Iterable[tuple[int, int]]) -> int:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    count = n
    for i, j in bonds:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            count -= 1
    return count


def is_connected(mol: Molecule) -> bool:
    return connected_components(mol.n, mol.bonds) == 1


def check_validity(mol: Molecule, rules: TypeRules) -> ValidityReport:
    deg = mol.degrees()
    stable = [rules.valence_window(k)[0] <= deg[i] <= rules.valence_window(k)[1] for i, k in enumerate(mol.types)]
    frac = sum(stable) / mol.n
    ms = all(stable)
    return ValidityReport(frac, ms, ms and is_connected(mol))


# ---------------------------------------------------------------------------
# fragments


@dataclass(frozen=True, eq=False)
class Fragment:
    molecule: Molecule
    template: bool = True

    @property
    def n(self) -> int:
        return self.molecule.n

    def injection_order(self) -> list[int]:
        """DFS preorder from the lowest-index minimum-degree atom.

        Laying rows out in this order puts bonded atoms on adjacent rows
        wherever the fragment is path-like.
        """
        mol = self.molecule
        if mol.n == 1:
            return [0]
        adj = mol.adjacency()
        deg = mol.degrees()
        start = int(np.argmin(deg))
        order, seen, stack = [], set(), [start]
        while stack:
            a = stack.pop()
            if a in seen:
                continue
            seen.add(a)
            order.append(a)
            stack.extend(sorted((b for b in adj[a] if b not in seen), reverse=True))
        return order

    def to_dict(self) -> dict:
        return self.molecule.to_dict()


def extract_fragment_bfs(mol: Molecule, start: int, size: int, rng: np.random.Generator | None = None) -> Fragment:
    """First ``size`` atoms in BFS order from ``start`` (neighbours ascending), re-centred.

    ``rng`` is accepted for interface symmetry; the traversal is deterministic.
    """
    if not 0 <= start < mol.n:
        raise ExtractionError(f"start {start} outside [0, {mol.n})")
    if not 1 <= size <= mol.n:
        raise ExtractionError(f"size {size} outside [1, {mol.n}]")
    adj = mol.adjacency()
    order, seen, queue = [], {start}, deque([start])
    while queue and len(order) < size:
        a = queue.popleft()
        order.append(a)
        for b in adj[a]:
            if b not in seen:
                seen.add(b)
                queue.append(b)
    if len(order) < size:
        raise ExtractionError(f"component of atom {start} has {len(order)} atoms, need {size}")
    remap = {a: k for k, a in enumerate(order)}
    bonds = frozenset(
        (min(remap[i], remap[j]), max(remap[i], remap[j])) for i, j in mol.bonds if i in remap and j in remap
    )
    sub = Molecule(center(mol.positions[order]), mol.types[order].copy(), bonds)
    return Fragment(sub)


def containment_ratio(mol: Molecule, frag: Fragment | Molecule) -> float:
    """Largest connected, type- and bond-consistent partial embedding of ``frag`` into ``mol``.

    Returns the embedded atom count over the fragment atom count.  The
    embedding is a monomorphism on the chosen fragment atoms: each fragment
    bond among them must map onto a molecule bond, extra molecule bonds are
    allowed.  Geometry is ignored.
    """
    f = frag.molecule if isinstance(frag, Fragment) else frag
    if f.n > MAX_FRAGMENT_ATOMS:
        raise ExtractionError(f"fragments above {MAX_FRAGMENT_ATOMS} atoms are not supported")
    if f.n == 0:
        return 1.0
    return _max_connected_embedding(mol, f) / f.n


def _max_connected_embedding(mol: Molecule, f: Molecule) -> int:
    fadj = [set(a) for a in f.adjacency()]
    madj = [set(a) for a in mol.adjacency()]
    by_type: dict[int, list[int]] = {}
    for i, k in enumerate(mol.types):
        by_type.setdefault(int(k), []).append(i)
    if not any(int(k) in by_type for k in f.types):
        return 0
    comp_size = _component_sizes(f.n, fadj)
    best = 1
    mapping: dict[int, int] = {}
    used: set[int] = set()
    visited_sets: set[frozenset] = set()

    def extend():
        nonlocal best
        if len(mapping) > best:
            best = len(mapping)
        if best == f.n:
            return True
        key = frozenset(mapping.items())
        if key in visited_sets:
            return False
        visited_sets.add(key)
        # any connected superset stays in the seed's fragment component
        if comp_size[next(iter(mapping))] <= best:
            return False
        frontier = sorted({b for a in mapping for b in fadj[a] if b not in mapping})
        for fb in frontier:
            mapped_nbrs = [a for a in fadj[fb] if a in mapping]
            cands = madj[mapping[mapped_nbrs[0]]]
            for mb in sorted(cands):
                if mb in used or mol.types[mb] != f.types[fb]:
                    continue
                if all(mapping[a] in madj[mb] for a in mapped_nbrs):
                    mapping[fb] = mb
                    used.add(mb)
                    done = extend()
                    del mapping[fb]
                    used.discard(mb)
                    if done:
                        return True
        return False

    for fa in range(f.n):
        if comp_size[fa] <= best and best > 0:
            continue
        for ma in by_type.get(int(f.types[fa]), []):
            mapping[fa] = ma
            used.add(ma)
            done = extend()
            del mapping[fa]
            used.discard(ma)
            if done:
                return best
    return best


def _component_sizes(n, adj) -> list[int]:
    size = [0] * n
    seen = [False] * n
    for s in range(n):
        if seen[s]:
            continue
        comp, stack = [], [s]
        seen[s] = True
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in adj[a]:
                if not seen[b]:
                    seen[b] = True
                    stack.append(b)
        for a in comp:
            size[a] = len(comp)
    return size


# ---------------------------------------------------------------------------
# properties


def _centered(mol: Molecule) -> np.ndarray:
    return mol.positions - mol.positions.mean(axis=0)


def _atom_count(mol, rules):
    return float(mol.n)


def _radius_of_gyration(mol, rules):
    x = _centered(mol)
    return math.sqrt(float(np.sum(x * x)) / mol.n)


def _typed_moment(mol, rules):
    q = np.asarray(rules.charges, dtype=float)[mol.types]
    return float(np.linalg.norm(np.sum(q[:, None] * _centered(mol), axis=0)))


def _pairwise_energy(mol, rules):
    if mol.n < 2:
        return 0.0
    i, j = np.triu_indices(mol.n, k=1)
    d2 = np.sum((mol.positions[i] - mol.positions[j]) ** 2, axis=1)
    return float(np.sum(1.0 / (1.0 + d2)))


PROPERTIES: dict[str, Callable[[Molecule, TypeRules], float]] = {
    "atom_count": _atom_count,
    "radius_of_gyration": _radius_of_gyration,
    "typed_moment": _typed_moment,
    "pairwise_energy": _pairwise_energy,
}


def property_ids(rules: TypeRules) -> list[str]:
    return list(PROPERTIES) + [f"type_fraction:{k}" for k in range(rules.d)]


def evaluate_property(mol: Molecule, prop: str, rules: TypeRules) -> float:
    """Evaluate a registered property; ``type_fraction:k`` is parametrised by type."""
    if prop in PROPERTIES:
        return PROPERTIES[prop](mol, rules)
    if prop.startswith("type_fraction:"):
        try:
            k = int(prop.split(":", 1)[1])
        except ValueError:
            raise RegistryError(f"bad type index in {prop!r}") from None
        if not 0 <= k < rules.d:
            raise RegistryError(f"type index {k} outside [0, {rules.d})")
        return float(np.mean(mol.types == k))
    raise RegistryError(f"unknown property {prop!r}")


def check_property_id(prop: str, rules: TypeRules) -> None:
    evaluate_property(Molecule(np.zeros((1, 3)), np.zeros(1, dtype=int)), prop, rules)


# ---------------------------------------------------------------------------
# reference data


def random_tree_molecule(
    n: int,
    rules: TypeRules,
    rng: np.random.Generator,
    bond_length: float = 1.25,
    min_nonbonded: float = 2.1,
    branch_prob: float = 0.15,
    max_degree: int = 3,
    type_weights: Sequence[float] | None = None,
    max_tries: int = 1000,
) -> Molecule:
    """Grow a random valid tree-shaped molecule.

    Atom ``i`` attaches to ``i - 1`` unless a branch is drawn, in which case
    it attaches to a random earlier atom with spare degree.  Types are drawn
    after the geometry among those whose valence window admits the degree.
    """
    weights = np.ones(rules.d) if type_weights is None else np.asarray(type_weights, dtype=float)
    for _ in range(max_tries):
        pos = np.zeros((n, 3))
        deg = np.zeros(n, dtype=int)
        nbrs: list[list[int]] = [[] for _ in range(n)]
        ok = True
        for i in range(1, n):
            parent = i - 1
            if i > 1 and rng.random() < branch_prob:
                options = [a for a in range(i - 1) if deg[a] < max_degree]
                if options:
                    parent = int(rng.choice(options))
            if deg[parent] >= max_degree:
                ok = False
                break
            placed = False
            for _ in range(200):
                u = rng.standard_normal(3)
                u /= np.linalg.norm(u)
                cand = pos[parent] + bond_length * u
                if any(np.dot(u, (pos[b] - pos[parent]) / bond_length) > math.cos(math.radians(100)) for b in nbrs[parent]):
                    continue
                others = [a for a in range(i) if a != parent]
                if others and np.min(np.linalg.norm(pos[others] - cand, axis=1)) < min_nonbonded:
                    continue
                pos[i] = cand
                placed = True
                break
            if not placed:
                ok = False
                break
            deg[i] += 1
            deg[parent] += 1
            nbrs[i].append(parent)
            nbrs[parent].append(i)
        if not ok:
            continue
        types = np.empty(n, dtype=int)
        for i in range(n):
            allowed = rules.compatible_types(int(deg[i]))
            p = weights[allowed] / weights[allowed].sum()
            types[i] = allowed[int(rng.choice(len(allowed), p=p))]
        mol = make_molecule(pos, types, rules)
        if check_validity(mol, rules).valid and mol.degrees().tolist() == deg.tolist():
            return mol
    raise RuntimeError("could not grow a valid molecule; loosen the geometry constraints")


def make_reference_dataset(size: int, n_atoms: int, rules: TypeRules, seed: int, **kwargs) -> list[Molecule]:
    rng = np.random.default_rng(seed)
    return [random_tree_molecule(n_atoms, rules, rng, **kwargs) for _ in range(size)]


def type_prior(
    mol: Molecule, rules: TypeRules, smoothing: float, type_weights: Sequence[float] | None = None
) -> np.ndarray:
    """Per-atom type distribution: ``(1 - s) * onehot + s * weighted uniform over degree-compatible types``."""
    weights = np.ones(rules.d) if type_weights is None else np.asarray(type_weights, dtype=float)
    deg = mol.degrees()
    prior = np.zeros((mol.n, rules.d))
    for i in range(mol.n):
        allowed = rules.compatible_types(int(deg[i]))
        spread = np.zeros(rules.d)
        spread[allowed] = weights[allowed] / weights[allowed].sum()
        prior[i] = smoothing * spread
        prior[i, mol.types[i]] += 1.0 - smoothing
    return prior


def smoothed_denoiser(
    molecules: Sequence[Molecule],
    rules: TypeRules,
    coord_bandwidth: float,
    type_smoothing: float,
    type_weights: Sequence[float] | None = None,
) -> SmoothedDatasetDenoiser:
    return SmoothedDatasetDenoiser(
        [m.positions for m in molecules],
        [type_prior(m, rules, type_smoothing, type_weights) for m in molecules],
        coord_bandwidth,
    )
