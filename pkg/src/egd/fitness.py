"""Scoring: target errors, constraint violation, penalized fitness, constrained
Pareto dominance, SPEA2 fitness and truncation, 2-D hypervolume, Cliff's delta.

Objective vectors are always minimised.  Batch routines take an ``(m, k)``
objective array plus an ``(m,)`` feasibility mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .molecule import (
    Fragment,
    Molecule,
    TypeRules,
    check_property_id,
    check_validity,
    containment_ratio,
    evaluate_property,
    is_connected,
)

NORMS = ("abs", "squared")
CONSTRAINT_KINDS = ("validity", "containment", "property_max", "property_min", "property_eq")


def target_error(values: Sequence[float], targets: Sequence[float], norm: str = "abs",
                 weights: Sequence[float] | None = None) -> float:
    """Weighted sum of per-property deviations from their targets.

    ``abs`` sums absolute errors, ``squared`` sums squared errors.
    """
    v = np.asarray(values, dtype=float)
    o = np.asarray(targets, dtype=float)
    if v.shape != o.shape:
        raise ShapeError(f"{v.shape[0] if v.ndim else 0} values vs {o.shape[0] if o.ndim else 0} targets")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if norm == "abs":
        err = np.abs(v - o)
    elif norm == "squared":
        err = (v - o) ** 2
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return float(np.sum(w * err))


def constraint_violation(g_values: Sequence[float], h_values: Sequence[float]) -> float:
    """Total violation: positive parts of inequalities plus magnitudes of equalities."""
    g = np.asarray(g_values, dtype=float)
    h = np.asarray(h_values, dtype=float)
    return float(np.sum(np.maximum(0.0, g)) + np.sum(np.abs(h)))


def penalized_fitness(mae: float, cv: float, mae_max: float) -> float:
    """Feasible individuals score their error; infeasible ones add the set maximum."""
    if mae < 0 or cv < 0 or mae_max < 0:
        raise RangeError("penalized_fitness inputs must be non-negative")
    return float(mae) if cv == 0 else float(mae) + float(mae_max)


def penalized_array(mae: np.ndarray, cv: np.ndarray) -> np.ndarray:
    """Vector form with ``mae_max`` taken over the given set."""
    mae = np.asarray(mae, dtype=float)
    cv = np.asarray(cv, dtype=float)
    if mae.size == 0:
        return mae.copy()
    return np.where(cv == 0, mae, mae + float(np.max(mae)))


# ---------------------------------------------------------------------------
# objective specification


@dataclass(frozen=True)
class ObjectiveEntry:
    prop: str
    target: float | None = None
    weight: float = 1.0


@dataclass(frozen=True)
class ConstraintSpec:
    """One constraint.

    ``validity``: g = (1 - atom-stable fraction) + (1 if disconnected).
    ``containment``: g = 1 - containment ratio of the run's fragment.
    ``property_max`` / ``property_min``: g = value - bound / bound - value.
    ``property_eq``: h = value - bound.
    """

    kind: str
    prop: str | None = None
    bound: float | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ConfigError(f"unknown constraint kind {self.kind!r}", "kind")
        if self.kind.startswith("property_") and (self.prop is None or self.bound is None):
            raise ConfigError(f"{self.kind} needs prop and bound", "prop")

    @property
    def is_equality(self) -> bool:
        return self.kind == "property_eq"


@dataclass(frozen=True)
class ObjectiveSpec:
    """What to optimise.

    In ``target`` mode each objective is the deviation of a property from its
    target; in ``minimize`` mode it is the property value itself.
    """

    mode: str
    entries: tuple[ObjectiveEntry, ...]
    constraints: tuple[ConstraintSpec, ...] = ()
    norm: str = "abs"

    def __post_init__(self):
        if self.mode not in ("target", "minimize"):
            raise ConfigError(f"unknown objective mode {self.mode!r}", "mode")
        if not self.entries:
            raise ConfigError("at least one objective entry is required", "entries")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}", "norm")
        for i, e in enumerate(self.entries):
            if self.mode == "target" and e.target is None:
                raise ConfigError("target mode needs a target value", f"entries[{i}].target")

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def props(self) -> list[str]:
        return [e.prop for e in self.entries]

    def validate(self, rules: TypeRules, has_fragment: bool) -> None:
        for i, e in enumerate(self.entries):
            try:
                check_property_id(e.prop, rules)
            except KeyError as err:
                raise ConfigError(str(err), f"entries[{i}].prop") from None
        for i, c in enumerate(self.constraints):
            if c.prop is not None:
                try:
                    check_property_id(c.prop, rules)
                except KeyError as err:
                    raise ConfigError(str(err), f"constraints[{i}].prop") from None
            if c.kind == "containment" and not has_fragment:
                raise ConfigError("containment constraint needs a fragment", f"constraints[{i}]")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "norm": self.norm,
            "entries": [{"prop": e.prop, "target": e.target, "weight": e.weight} for e in self.entries],
            "constraints": [{"kind": c.kind, "prop": c.prop, "bound": c.bound} for c in self.constraints],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ObjectiveSpec:
        return cls(
            mode=data["mode"],
            norm=data.get("norm", "abs"),
            entries=tuple(ObjectiveEntry(e["prop"], e.get("target"), e.get("weight", 1.0)) for e in data["entries"]),
            constraints=tuple(ConstraintSpec(c["kind"], c.get("prop"), c.get("bound")) for c in data.get("constraints", ())),
        )


@dataclass
class Evaluation:
    """Everything measured on one decoded molecule."""

    values: np.ndarray  # raw property values, one per objective entry
    objectives: np.ndarray  # minimised objective vector
    mae: float  # scalarised target error (or weighted sum in minimize mode)
    g: np.ndarray
    h: np.ndarray
    cv: float
    atom_stable_fraction: float
    molecule_stable: bool
    valid: bool
    containment: float = float("nan")

    @property
    def feasible(self) -> bool:
        return self.cv == 0


def evaluate_molecule(mol: Molecule, spec: ObjectiveSpec, rules: TypeRules, fragment: Fragment | None = None) -> Evaluation:
    values = np.array([evaluate_property(mol, e.prop, rules) for e in spec.entries])
    weights = np.array([e.weight for e in spec.entries])
    if spec.mode == "target":
        targets = np.array([e.target for e in spec.entries], dtype=float)
        dev = np.abs(values - targets) if spec.norm == "abs" else (values - targets) ** 2
        objectives = dev
        mae = target_error(values, targets, spec.norm, weights)
    else:
        objectives = values.copy()
        mae = float(np.sum(weights * values))
    report = check_validity(mol, rules)
    cont = containment_ratio(mol, fragment) if fragment is not None else float("nan")
    g, h = [], []
    for c in spec.constraints:
        if c.kind == "validity":
            g.append((1.0 - report.atom_stable_fraction) + (0.0 if is_connected(mol) else 1.0))
        elif c.kind == "containment":
            g.append(1.0 - cont)
        else:
            v = evaluate_property(mol, c.prop, rules)
            if c.kind == "property_max":
                g.append(v - c.bound)
            elif c.kind == "property_min":
                g.append(c.bound - v)
            else:
                h.append(v - c.bound)
    g_arr, h_arr = np.array(g, dtype=float), np.array(h, dtype=float)
    return Evaluation(
        values=values,
        objectives=objectives,
        mae=mae,
        g=g_arr,
        h=h_arr,
        cv=constraint_violation(g_arr, h_arr),
        atom_stable_fraction=report.atom_stable_fraction,
        molecule_stable=report.molecule_stable,
        valid=report.valid,
        containment=cont,
    )


# ---------------------------------------------------------------------------
# records and dominance


@dataclass
class FitnessRecord:
    objectives: np.ndarray
    cv: float
    scalar_fitness: float = float("nan")
    spea2_fitness: float = float("nan")

    @property
    def feasible(self) -> bool:
        return self.cv == 0

    def csv_row(self, generation: int, index: int) -> list:
        return [generation, index, *(repr(float(v)) for v in self.objectives), repr(float(self.cv)),
                repr(float(self.scalar_fitness)), repr(float(self.spea2_fitness)), int(self.feasible)]


def csv_header(k: int) -> list[str]:
    return ["generation", "index", *(f"obj{i}" for i in range(k)), "cv", "scalar_fitness", "spea2_fitness", "feasible"]


def dominates_constrained(a: FitnessRecord, b: FitnessRecord) -> bool:
    """Feasibility-first Pareto dominance; two infeasible records never dominate."""
    oa = np.asarray(a.objectives, dtype=float)
    ob = np.asarray(b.objectives, dtype=float)
    if oa.shape != ob.shape:
        raise ShapeError(f"objective dimensions differ: {oa.shape} vs {ob.shape}")
    if a.feasible and not b.feasible:
        return True
    if not (a.feasible and b.feasible):
        return False
    return bool(np.all(oa <= ob) and np.any(oa < ob))


def dominance_matrix(objs: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    """``dom[i, j]`` is True when record i constraint-dominates record j."""
    objs = np.asarray(objs, dtype=float)
    feasible = np.asarray(feasible, dtype=bool)
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=2)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=2)
    both = feasible[:, None] & feasible[None, :]
    return (feasible[:, None] & ~feasible[None, :]) | (both & le & lt)


def pareto_mask(objs: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    objs = np.asarray(objs, dtype=float)
    if objs.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return ~dominance_matrix(objs, feasible).any(axis=0)


def pareto_front(records: Sequence[FitnessRecord]) -> list[FitnessRecord]:
    """Constraint-non-dominated records, in input order."""
    if not records:
        return []
    objs = np.array([r.objectives for r in records], dtype=float)
    mask = pareto_mask(objs, np.array([r.feasible for r in records]))
    return [r for r, keep in zip(records, mask) if keep]


def normalize(objs: np.ndarray, bounds: np.ndarray | None) -> np.ndarray:
    """Map objectives to ``(x - lo) / (hi - lo)`` per column; identity when bounds is None."""
    objs = np.asarray(objs, dtype=float)
    if bounds is None:
        return objs
    b = np.asarray(bounds, dtype=float)
    return (objs - b[:, 0]) / (b[:, 1] - b[:, 0])


def _distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


@dataclass
class Spea2Result:
    S: np.ndarray
    R: np.ndarray
    D: np.ndarray
    F: np.ndarray
    sigma: np.ndarray
    k: int
    clamped: bool = False


def default_k(size: int) -> int:
    return max(1, int(math.isqrt(size)))


def spea2_assign(objs: np.ndarray, feasible: np.ndarray, k_density: int | None = None,
                 bounds: np.ndarray | None = None) -> Spea2Result:
    """Strength, raw fitness, k-NN density and combined fitness ``F = R + D``.

    Distances are Euclidean on objectives normalised by ``bounds``.  A
    ``k_density`` at or above the set size is clamped to ``size - 1`` and the
    result is flagged.
    """
    objs = np.asarray(objs, dtype=float)
    feasible = np.asarray(feasible, dtype=bool)
    m = objs.shape[0]
    if m == 0:
        e = np.zeros(0)
        return Spea2Result(e, e, e, e, e, 0)
    k = default_k(m) if k_density is None else int(k_density)
    if k < 1:
        raise RangeError("k_density must be >= 1")
    clamped = False
    if k >= m:
        k, clamped = m - 1, True
    dom = dominance_matrix(objs, feasible)
    S = dom.sum(axis=1).astype(float)
    R = np.array([S[dom[:, i]].sum() for i in range(m)], dtype=float)
    if k == 0:
        sigma = np.zeros(m)
    else:
        dist = _distances(normalize(objs, bounds))
        np.fill_diagonal(dist, np.inf)
        sigma = np.sort(dist, axis=1)[:, k - 1]
    D = 1.0 / (sigma + 2.0)
    return Spea2Result(S, R, D, R + D, sigma, k, clamped)


def spea2_truncate(objs: np.ndarray, keep: Sequence[int], size: int, bounds: np.ndarray | None = None) -> list[int]:
    """Iteratively drop the member closest to the rest until ``size`` remain.

    "Closest" compares each member's sorted distances to the others
    lexicographically; ties go to the earliest position in ``keep``.
    """
    keep = list(keep)
    x = normalize(np.asarray(objs, dtype=float)[keep], bounds)
    dist = _distances(x)
    alive = list(range(len(keep)))
    while len(alive) > size:
        sub = dist[np.ix_(alive, alive)]
        np.fill_diagonal(sub, np.inf)
        profiles = np.sort(sub, axis=1)
        victim = 0
        for i in range(1, len(alive)):
            for a, b in zip(profiles[i], profiles[victim]):
                if a != b:
                    if a < b:
                        victim = i
                    break
        alive.pop(victim)
    return [keep[i] for i in alive]


def spea2_select(objs: np.ndarray, feasible: np.ndarray, size: int, k_density: int | None = None,
                 bounds: np.ndarray | None = None) -> tuple[list[int], Spea2Result]:
    """SPEA2 environmental selection; returns chosen indices (ascending) and the assignment."""
    res = spea2_assign(objs, feasible, k_density, bounds)
    nd = [i for i in range(len(res.F)) if res.F[i] < 1.0]
    if len(nd) > size:
        chosen = spea2_truncate(objs, nd, size, bounds)
    elif len(nd) < size:
        order = np.argsort(res.F, kind="stable")
        chosen = sorted(int(i) for i in order[:size])
    else:
        chosen = nd
    return sorted(chosen), res


# ---------------------------------------------------------------------------
# indicators


def hypervolume_2d(points: np.ndarray | Sequence[Sequence[float]], ref: Sequence[float] = (1.0, 1.0)) -> float:
    """Exact area dominated by ``points`` and bounded by ``ref`` (minimisation)."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    r = np.asarray(ref, dtype=float)
    p = p[np.all(p < r, axis=1)]
    if p.shape[0] == 0:
        return 0.0
    p = p[np.lexsort((p[:, 1], p[:, 0]))]
    area = 0.0
    best_y = r[1]
    for x, y in p:
        if y < best_y:
            area += (r[0] - x) * (best_y - y)
            best_y = y
    return float(area)


def cliffs_delta(xs: Sequence[float], ys: Sequence[float]) -> float:
    """``(#{x > y} - #{x < y}) / (|xs| |ys|)`` over all pairs."""
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise RangeError("cliffs_delta needs two non-empty samples")
    return float(np.mean(np.sign(x[:, None] - y[None, :])))
