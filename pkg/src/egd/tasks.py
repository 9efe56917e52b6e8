"""Reference worlds and the shipped benchmark tasks.

A world bundles type rules, a noise schedule, a small set of random valid
reference molecules and the smoothed closed-form denoiser built from them.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, SmoothedDatasetDenoiser, State, build_schedule
from .engine import RunConfig
from .errors import ConfigError, ExtractionError
from .fitness import ConstraintSpec, ObjectiveEntry, ObjectiveSpec
from .molecule import (
    Fragment,
    Molecule,
    TypeRules,
    default_rules,
    encode,
    extract_fragment_bfs,
    make_reference_dataset,
    molecule_from_dict,
    random_tree_molecule,
    smoothed_denoiser,
)

DEFAULT_SCHEDULE = {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02}


@dataclass
class WorldConfig:
    dataset_size: int = 10
    n_atoms: int = 8
    dataset_seed: int = 1
    branch_prob: float = 0.15
    coord_bandwidth: float = 0.03
    type_smoothing: float = 0.5
    type_weights: list[float] | None = None
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    config: WorldConfig
    rules: TypeRules
    schedule: NoiseSchedule
    molecules: list[Molecule]
    dataset: list[State]
    denoiser: SmoothedDatasetDenoiser


def build_world(cfg: WorldConfig | None = None) -> World:
    cfg = cfg or WorldConfig()
    rules = default_rules()
    params = {k: v for k, v in cfg.schedule.items() if k not in ("kind", "T")}
    schedule = build_schedule(cfg.schedule.get("kind", "linear"), int(cfg.schedule.get("T", 1000)), **params)
    mols = make_reference_dataset(cfg.dataset_size, cfg.n_atoms, rules, cfg.dataset_seed, branch_prob=cfg.branch_prob,
                                  type_weights=cfg.type_weights)
    den = smoothed_denoiser(mols, rules, cfg.coord_bandwidth, cfg.type_smoothing, cfg.type_weights)
    return World(cfg, rules, schedule, mols, [encode(m, rules.d) for m in mols], den)


# bounds used to normalise objectives for densities and hypervolume
_RG = (2.0, 2.8)
_ENERGY = (4.2, 5.0)

TASKS: dict[str, dict] = {
    "T1": {
        "mode": "single",
        "objectives": {
            "mode": "target",
            "entries": [{"prop": "typed_moment", "target": 0.5}],
            "constraints": [{"kind": "validity"}],
        },
        "objective_bounds": [[0.0, 3.0]],
    },
    "T2": {
        "mode": "single",
        "objectives": {
            "mode": "target",
            "entries": [{"prop": "radius_of_gyration", "target": 2.45}, {"prop": "typed_moment", "target": 1.0}],
            "constraints": [{"kind": "validity"}],
        },
        "objective_bounds": [[0.0, 0.6], [0.0, 3.0]],
    },
    "T3": {
        "mode": "multi",
        "objectives": {
            "mode": "minimize",
            "entries": [{"prop": "radius_of_gyration"}, {"prop": "pairwise_energy"}],
            "constraints": [{"kind": "validity"}],
        },
        "objective_bounds": [list(_RG), list(_ENERGY)],
    },
    "T4": {
        "mode": "multi",
        "objectives": {
            "mode": "minimize",
            "entries": [{"prop": "radius_of_gyration"}, {"prop": "pairwise_energy"}],
            "constraints": [{"kind": "validity"}, {"kind": "containment"}],
        },
        "objective_bounds": [list(_RG), list(_ENERGY)],
        # N is rare in this world, so the fragment (two N atoms) almost never
        # appears unless injected; lower t_add keeps injected types legible
        "fragment": {"source": "random", "seed": 4, "start": 6, "size": 3},
        "world": {"type_smoothing": 0.3, "type_weights": [1.0, 1.0, 0.03, 1.0]},
        "run": {"t_add": 100},
    },
}


def task_template(task: str) -> dict:
    try:
        return copy.deepcopy(TASKS[task])
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}", "task") from None


def fragment_from_spec(spec: dict, world: World) -> Fragment:
    """BFS-cut a fragment from a source molecule.

    ``source`` is ``reference`` (``molecule`` indexes the world's reference
    set), ``random`` (a fresh random valid molecule grown from ``seed`` with
    uniform type weights) or ``explicit`` (``molecule`` holds positions/types).
    """
    source = spec.get("source", "reference")
    if source == "reference":
        j = int(spec["molecule"])
        if not 0 <= j < len(world.molecules):
            raise ConfigError(f"molecule index {j} outside [0, {len(world.molecules)})", "fragment.molecule")
        mol = world.molecules[j]
    elif source == "random":
        mol = random_tree_molecule(int(spec.get("n_atoms", world.config.n_atoms)), world.rules,
                                   np.random.default_rng(int(spec["seed"])))
    elif source == "explicit":
        mol = molecule_from_dict(spec["molecule"], world.rules)
    else:
        raise ConfigError(f"unknown fragment source {source!r}", "fragment.source")
    try:
        return extract_fragment_bfs(mol, int(spec["start"]), int(spec["size"]))
    except ExtractionError as err:
        raise ConfigError(str(err), "fragment") from None


def task_world_config(task: str, base: WorldConfig | None = None) -> WorldConfig:
    """World settings for a task: defaults, then the task's own overrides."""
    cfg = copy.deepcopy(base) if base is not None else WorldConfig()
    for k, v in task_template(task).get("world", {}).items():
        setattr(cfg, k, copy.deepcopy(v))
    return cfg


def make_run_config(task: str, world: World, **overrides) -> RunConfig:
    """RunConfig for a shipped task; ``overrides`` replace RunConfig fields."""
    tpl = task_template(task)
    frag = fragment_from_spec(tpl["fragment"], world) if "fragment" in tpl else None
    kwargs = {
        "objectives": ObjectiveSpec(
            mode=tpl["objectives"]["mode"],
            entries=tuple(ObjectiveEntry(e["prop"], e.get("target"), e.get("weight", 1.0)) for e in tpl["objectives"]["entries"]),
            constraints=tuple(ConstraintSpec(c["kind"], c.get("prop"), c.get("bound")) for c in tpl["objectives"]["constraints"]),
        ),
        "mode": tpl["mode"],
        "fragment": frag,
        "objective_bounds": tuple(tuple(b) for b in tpl["objective_bounds"]),
        "n_atoms": world.config.n_atoms,
    }
    kwargs.update(tpl.get("run", {}))
    kwargs.update(overrides)
    return RunConfig(**kwargs)
