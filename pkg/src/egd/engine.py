"""Evolutionary guidance inside the diffusion sampler.

Each generation selects parents by tournament, noises them to ``t_add``,
crosses the noisy states (optionally overwriting rows with a noised
fragment), denoises offspring and noised parents back to ``t = 0`` and keeps
the best ``N`` of old population, denoised parents and offspring.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .diffusion import Denoiser, NoiseSchedule, State, center, denoise_many, forward_noise, sample_unconditional
from .errors import ConfigError, InjectionError, PreconditionError, ShapeError
from .fitness import (
    Evaluation,
    FitnessRecord,
    ObjectiveSpec,
    evaluate_molecule,
    hypervolume_2d,
    normalize,
    pareto_mask,
    penalized_array,
    spea2_assign,
    spea2_select,
)
from .molecule import Fragment, Molecule, TypeRules, decode, molecule_from_dict

CROSSOVERS = ("uniform_mask", "blend")


def resolve_threads(requested: int | None = None) -> int:
    """Worker count: explicit value, else ``EGD_THREADS`` (0 means all cores)."""
    if requested is None or requested < 0:
        requested = int(os.environ.get("EGD_THREADS", "1") or 1)
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, int(requested))


@dataclass
class RunConfig:
    """Full description of one evolutionary run.

    ``objective_bounds`` holds one ``(min, max)`` pair per objective entry and
    is used to normalise objectives for densities and hypervolume.
    """

    objectives: ObjectiveSpec
    N: int = 32
    R: int = 10
    t_add: int = 200
    k_tournament: int = 2
    mode: str = "single"
    fragment: Fragment | None = None
    archive_size: int | None = None
    seed: int = 0
    crossover: str = "uniform_mask"
    objective_bounds: tuple[tuple[float, float], ...] | None = None
    init: str = "diffusion"
    n_atoms: int = 8
    denoise_parents: bool = True
    fragment_rate: float = 1.0
    mask_prob: float = 0.5
    stochastic: bool = True
    k_density: int | None = None

    def __post_init__(self):
        if self.archive_size is None:
            self.archive_size = self.N

    def validate(self, schedule: NoiseSchedule, rules: TypeRules) -> None:
        if self.N < 2:
            raise ConfigError("N must be >= 2", "N")
        if self.R < 0:
            raise ConfigError("R must be >= 0", "R")
        if not 1 <= self.t_add <= schedule.T:
            raise ConfigError(f"t_add={self.t_add} violates 1 <= t_add <= T={schedule.T}", "t_add")
        if not 1 <= self.k_tournament <= self.N:
            raise ConfigError(f"k_tournament={self.k_tournament} violates 1 <= k <= N={self.N}", "k_tournament")
        if self.mode not in ("single", "multi"):
            raise ConfigError(f"unknown mode {self.mode!r}", "mode")
        if self.mode == "single" and self.objectives.mode != "target" and self.objectives.k > 1:
            raise ConfigError("single mode with several minimised objectives is ambiguous; use multi", "mode")
        if self.archive_size != self.N:
            raise ConfigError("archive_size must equal N (the archive is the next population)", "archive_size")
        if self.crossover not in CROSSOVERS:
            raise ConfigError(f"unknown crossover {self.crossover!r}", "crossover")
        if self.init not in ("diffusion", "dataset"):
            raise ConfigError(f"unknown init {self.init!r}", "init")
        if self.n_atoms < 1:
            raise ConfigError("n_atoms must be >= 1", "n_atoms")
        if not 0.0 <= self.fragment_rate <= 1.0:
            raise ConfigError("fragment_rate must be in [0, 1]", "fragment_rate")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must be in [0, 1]", "mask_prob")
        if self.fragment is not None and self.fragment.n > self.n_atoms:
            raise ConfigError("fragment larger than the molecules being evolved", "fragment")
        if self.objective_bounds is not None:
            if len(self.objective_bounds) != self.objectives.k:
                raise ConfigError("need one (min, max) pair per objective", "objective_bounds")
            for i, (lo, hi) in enumerate(self.objective_bounds):
                if not hi > lo:
                    raise ConfigError("max must exceed min", f"objective_bounds[{i}]")
        if self.k_density is not None and self.k_density < 1:
            raise ConfigError("k_density must be >= 1", "k_density")
        self.objectives.validate(rules, self.fragment is not None)

    def bounds_array(self) -> np.ndarray | None:
        return None if self.objective_bounds is None else np.asarray(self.objective_bounds, dtype=float)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "R": self.R,
            "t_add": self.t_add,
            "k_tournament": self.k_tournament,
            "mode": self.mode,
            "objectives": self.objectives.to_dict(),
            "fragment": None if self.fragment is None else self.fragment.to_dict(),
            "archive_size": self.archive_size,
            "seed": self.seed,
            "crossover": self.crossover,
            "objective_bounds": None if self.objective_bounds is None else [list(b) for b in self.objective_bounds],
            "init": self.init,
            "n_atoms": self.n_atoms,
            "denoise_parents": self.denoise_parents,
            "fragment_rate": self.fragment_rate,
            "mask_prob": self.mask_prob,
            "stochastic": self.stochastic,
            "k_density": self.k_density,
        }

    @classmethod
    def from_dict(cls, data: dict, rules: TypeRules) -> RunConfig:
        data = dict(data)
        data["objectives"] = ObjectiveSpec.from_dict(data["objectives"])
        if data.get("fragment") is not None:
            # stored positions are already centred; re-centring would perturb the digest
            data["fragment"] = Fragment(molecule_from_dict(data["fragment"], rules, recenter=False))
        if data.get("objective_bounds") is not None:
            data["objective_bounds"] = tuple(tuple(float(v) for v in b) for b in data["objective_bounds"])
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Individual:
    state: State
    molecule: Molecule
    evaluation: Evaluation
    birth_generation: int
    fitness: FitnessRecord = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.fitness is None:
            self.fitness = FitnessRecord(self.evaluation.objectives.copy(), self.evaluation.cv)

    @property
    def selection_value(self) -> float:
        return self.fitness.scalar_fitness

    def to_dict(self) -> dict:
        return {
            "state": self.state.to_dict(),
            "birth_generation": self.birth_generation,
            "scalar_fitness": self.fitness.scalar_fitness,
            "spea2_fitness": self.fitness.spea2_fitness,
        }


# ---------------------------------------------------------------------------
# operators


def tournament_select(values: Sequence[float], k: int, count: int, rng: np.random.Generator) -> list[int]:
    """Winners of ``count`` tournaments of ``k`` uniform draws with replacement.

    Lower value wins; ties go to the lower index.
    """
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if n == 0:
        raise PreconditionError("cannot select from an empty population")
    if not 1 <= k <= n:
        raise PreconditionError(f"tournament size {k} outside [1, {n}]")
    draws = rng.integers(0, n, size=(count, k))
    out = []
    for row in draws:
        best = int(row[0])
        for c in row[1:]:
            c = int(c)
            if v[c] < v[best] or (v[c] == v[best] and c < best):
                best = c
        out.append(best)
    return out


def reconcile_sizes(a: State, b: State, schedule: NoiseSchedule, rng: np.random.Generator) -> tuple[State, State]:
    """Bring two noisy parents to a common atom count.

    The count is drawn uniformly between the two sizes.  The larger parent
    keeps its atoms nearest its centroid; the smaller one duplicates random
    rows of its own with fresh forward noise added.
    """
    if a.n == b.n:
        return a, b
    if a.t != b.t:
        raise PreconditionError("parents sit at different diffusion steps")
    lo, hi = sorted((a.n, b.n))
    m = int(rng.integers(lo, hi + 1))
    return _resize(a, m, schedule, rng), _resize(b, m, schedule, rng)


def _resize(s: State, m: int, schedule: NoiseSchedule, rng: np.random.Generator) -> State:
    if s.n == m:
        return s
    if s.n > m:
        d2 = np.sum(center(s.coords) ** 2, axis=1)
        keep = np.sort(np.argsort(d2, kind="stable")[:m])
        return State(center(s.coords[keep]), s.feats[keep], s.t)
    extra = rng.integers(0, s.n, size=m - s.n)
    sd = math.sqrt(1.0 - schedule.abar(s.t)) if s.t > 0 else 0.0
    z = rng.standard_normal((m - s.n, 3 + s.d))
    coords = np.concatenate([s.coords, s.coords[extra] + sd * z[:, :3]])
    feats = np.concatenate([s.feats, s.feats[extra] + sd * z[:, 3:]])
    return State(center(coords), feats, s.t)


def crossover_noised(
    a: State,
    b: State,
    op: str,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    weight: float | None = None,
    mask_prob: float = 0.5,
) -> State:
    """Cross two noisy parents of equal size.

    ``uniform_mask`` takes each atom row from ``a`` with probability
    ``mask_prob``; ``blend`` forms ``w a + (1 - w) b`` with one ``w ~ U(0, 1)``
    per offspring.  ``mask`` / ``weight`` override the random draw.
    """
    if a.t != b.t:
        raise PreconditionError(f"parents at t={a.t} and t={b.t}")
    if a.n != b.n or a.d != b.d:
        raise ShapeError("reconcile parent sizes before crossover")
    if op == "uniform_mask":
        if mask is None:
            mask = rng.random(a.n) < mask_prob
        mask = np.asarray(mask, dtype=bool)
        coords = np.where(mask[:, None], a.coords, b.coords)
        feats = np.where(mask[:, None], a.feats, b.feats)
    elif op == "blend":
        w = float(rng.random()) if weight is None else float(weight)
        coords = w * a.coords + (1.0 - w) * b.coords
        feats = w * a.feats + (1.0 - w) * b.feats
    else:
        raise ValueError(f"unknown crossover {op!r}")
    return State(center(coords), feats, a.t)


def inject_fragment(
    offspring: State,
    fragment: Fragment,
    schedule: NoiseSchedule,
    t_add: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    offset: int | None = None,
) -> State:
    """Overwrite a contiguous block of rows with the forward-noised fragment.

    Fragment atoms are laid out in bond-walk order.  The noised fragment is
    translated so its centroid matches the block it replaces, which leaves
    the offspring's centre of mass unchanged.
    """
    m, n = fragment.n, offspring.n
    if m > n:
        raise InjectionError(f"fragment has {m} atoms, offspring only {n}")
    if offset is None:
        offset = int(rng.integers(0, n - m + 1))
    if not 0 <= offset <= n - m:
        raise InjectionError(f"offset {offset} outside [0, {n - m}]")
    order = fragment.injection_order()
    frag_mol = fragment.molecule
    clean = State(center(frag_mol.positions[order]), np.eye(offspring.d)[frag_mol.types[order]], 0)
    noised = forward_noise(clean, t_add, schedule, rng=rng, noise=noise)
    block = slice(offset, offset + m)
    coords = offspring.coords.copy()
    feats = offspring.feats.copy()
    shift = coords[block].mean(axis=0) - noised.coords.mean(axis=0)
    coords[block] = noised.coords + shift
    feats[block] = noised.feats
    return State(center(coords), feats, offspring.t)


# ---------------------------------------------------------------------------
# engine


@dataclass
class RunResult:
    metrics: list[dict]
    population: list[Individual]
    archive: list[Individual]
    denoise_steps: int
    evaluations: int
    wall_time: float
    front: np.ndarray

    def final(self, name: str) -> float:
        return self.metrics[-1][name]


class Engine:
    """Stateful driver for one run; use :func:`run` for the common case."""

    def __init__(
        self,
        config: RunConfig,
        denoiser: Denoiser,
        schedule: NoiseSchedule,
        rules: TypeRules,
        dataset: Sequence[State] | None = None,
        threads: int | None = None,
    ):
        config.validate(schedule, rules)
        self.config = config
        self.denoiser = denoiser
        self.schedule = schedule
        self.rules = rules
        self.dataset = dataset
        self.threads = resolve_threads(threads)
        self.population: list[Individual] = []
        self.generation = -1
        self.metrics: list[dict] = []
        self.denoise_steps = 0
        self.evaluations = 0
        self.best_front = np.zeros((0, config.objectives.k))

    # -- evaluation -------------------------------------------------------

    def make_individual(self, state: State, generation: int) -> Individual:
        mol = decode(state, self.rules)
        ev = evaluate_molecule(mol, self.config.objectives, self.rules, self.config.fragment)
        return Individual(state, mol, ev, generation)

    def _assign(self, pool: list[Individual]) -> None:
        """Set scalar (penalized) and SPEA2 fitness relative to ``pool``."""
        mae = np.array([ind.evaluation.mae for ind in pool])
        cv = np.array([ind.evaluation.cv for ind in pool])
        pen = penalized_array(mae, cv)
        for ind, p in zip(pool, pen):
            ind.fitness.scalar_fitness = float(p)
        if self.config.mode == "multi":
            objs = np.array([ind.evaluation.objectives for ind in pool])
            res = spea2_assign(objs, cv == 0, self.config.k_density, self.config.bounds_array())
            for ind, f in zip(pool, res.F):
                ind.fitness.spea2_fitness = float(f)

    def _select_values(self) -> list[float]:
        if self.config.mode == "multi":
            return [ind.fitness.spea2_fitness for ind in self.population]
        return [ind.fitness.scalar_fitness for ind in self.population]

    # -- phases -----------------------------------------------------------

    def initialize(self) -> None:
        cfg = self.config
        if cfg.init == "diffusion":
            states = sample_unconditional(
                cfg.n_atoms, self.rules.d, self.schedule, self.denoiser,
                rngmod.streams(cfg.seed, 0, rngmod.INIT, cfg.N), threads=self.threads,
            )
            self.denoise_steps += cfg.N * self.schedule.T
        else:
            if not self.dataset:
                raise PreconditionError("dataset initialisation needs a dataset")
            g = rngmod.stream(cfg.seed, 0, rngmod.INIT)
            size = len(self.dataset)
            idx = g.permutation(size)[: cfg.N] if cfg.N <= size else g.integers(0, size, cfg.N)
            states = [self.dataset[int(i)].centered() for i in idx]
        pop = [self.make_individual(s, 0) for s in states]
        self.evaluations += len(pop)
        self._environmental_selection(pop, initial=True)
        self.generation = 0
        self._record(pop)

    def step(self) -> None:
        cfg = self.config
        g = self.generation + 1
        N, sched = cfg.N, self.schedule
        parents = tournament_select(self._select_values(), cfg.k_tournament, N, rngmod.stream(cfg.seed, g, rngmod.SELECT))
        noised = [
            forward_noise(self.population[p].state, cfg.t_add, sched, rngmod.stream(cfg.seed, g, rngmod.PARENT_NOISE, i))
            for i, p in enumerate(parents)
        ]
        offspring = []
        for i in range(N):
            crng = rngmod.stream(cfg.seed, g, rngmod.CROSSOVER, i)
            a, b = reconcile_sizes(noised[i], noised[(i + 1) % N], sched, crng)
            child = crossover_noised(a, b, cfg.crossover, crng, mask_prob=cfg.mask_prob)
            if cfg.fragment is not None and crng.random() < cfg.fragment_rate:
                child = inject_fragment(child, cfg.fragment, sched, cfg.t_add, rngmod.stream(cfg.seed, g, rngmod.FRAGMENT, i))
            offspring.append(child)
        to_denoise = list(offspring)
        rngs = rngmod.streams(cfg.seed, g, rngmod.DENOISE_OFFSPRING, N)
        if cfg.denoise_parents:
            to_denoise += noised
            rngs += rngmod.streams(cfg.seed, g, rngmod.DENOISE_PARENT, N)
        clean = denoise_many(to_denoise, sched, self.denoiser, rngs if cfg.stochastic else None,
                             stochastic=cfg.stochastic, threads=self.threads)
        self.denoise_steps += len(to_denoise) * cfg.t_add
        # pool order: old population, denoised parents, offspring
        off_clean, par_clean = clean[:N], clean[N:]
        candidates = [self.make_individual(s, g) for s in par_clean + off_clean]
        self.evaluations += len(candidates)
        pool = self.population + candidates
        self._environmental_selection(pool)
        self.generation = g
        self._record(pool)

    def _environmental_selection(self, pool: list[Individual], initial: bool = False) -> None:
        cfg = self.config
        self._assign(pool)
        if initial and len(pool) == cfg.N:
            self.population = pool
            return
        if cfg.mode == "single":
            keys = [(ind.fitness.scalar_fitness, ind.evaluation.cv, ind.birth_generation, i) for i, ind in enumerate(pool)]
            order = sorted(range(len(pool)), key=lambda i: keys[i])
            self.population = [pool[i] for i in order[: cfg.N]]
        else:
            objs = np.array([ind.evaluation.objectives for ind in pool])
            feas = np.array([ind.evaluation.feasible for ind in pool])
            chosen, _ = spea2_select(objs, feas, cfg.archive_size, cfg.k_density, cfg.bounds_array())
            self.population = [pool[i] for i in chosen]

    # -- bookkeeping ------------------------------------------------------

    def _normalized_feasible(self, inds: Sequence[Individual]) -> np.ndarray:
        pts = np.array([ind.evaluation.objectives for ind in inds if ind.evaluation.feasible]).reshape(-1, self.config.objectives.k)
        return normalize(pts, self.config.bounds_array())

    def _record(self, pool: list[Individual]) -> None:
        cfg = self.config
        pop = self.population
        ev = [ind.evaluation for ind in pop]
        sel = np.array(self._select_values())
        best = pop[int(np.argmin(sel))] if cfg.mode == "multi" else min(
            pop, key=lambda ind: (ind.fitness.scalar_fitness, ind.evaluation.cv))
        feas_mae = [e.mae for e in ev if e.feasible]
        row = {
            "generation": self.generation,
            "best_fitness": float(np.min(sel)),
            "mean_fitness": float(np.mean(sel)),
            "best_penalized": float(min(ind.fitness.scalar_fitness for ind in pop)),
            "best_mae": float(best.evaluation.mae),
            "min_feasible_mae": float(min(feas_mae)) if feas_mae else float("nan"),
            "mean_mae": float(np.mean([e.mae for e in ev])),
            "feasible_rate": float(np.mean([e.feasible for e in ev])),
            "valid_rate": float(np.mean([e.valid for e in ev])),
            "atom_stable_rate": float(np.mean([e.atom_stable_fraction for e in ev])),
            "molecule_stable_rate": float(np.mean([e.molecule_stable for e in ev])),
        }
        if cfg.fragment is not None:
            row["containment_mean"] = float(np.mean([e.containment for e in ev]))
        if cfg.objectives.k == 2:
            cur = self._normalized_feasible(pop)
            row["hv"] = hypervolume_2d(cur)
            pts = np.concatenate([self.best_front, self._normalized_feasible(pool)])
            if pts.shape[0]:
                pts = pts[pareto_mask(pts, np.ones(pts.shape[0], dtype=bool))]
            self.best_front = pts
            row["hv_best"] = hypervolume_2d(pts)
        row["denoise_steps"] = self.denoise_steps
        row["evaluations"] = self.evaluations
        self.metrics.append(row)

    # -- checkpoints ------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "config_hash": self.config.digest(),
            "config": self.config.to_dict(),
            "generation": self.generation,
            "rng": {"scheme": rngmod.SCHEME, "seed": self.config.seed, "next_generation": self.generation + 1},
            "population": [ind.to_dict() for ind in self.population],
            "archive": [ind.to_dict() for ind in self.population] if self.config.mode == "multi" else [],
            "best_front": self.best_front.tolist(),
            "metrics": self.metrics,
            "denoise_steps": self.denoise_steps,
            "evaluations": self.evaluations,
        }

    def restore(self, ckpt: dict) -> None:
        if ckpt["config_hash"] != self.config.digest():
            raise PreconditionError("checkpoint was written by a different configuration")
        self.generation = int(ckpt["generation"])
        pop = []
        for rec in ckpt["population"]:
            ind = self.make_individual(State.from_dict(rec["state"]), int(rec["birth_generation"]))
            ind.fitness.scalar_fitness = float(rec["scalar_fitness"])
            ind.fitness.spea2_fitness = float(rec["spea2_fitness"])
            pop.append(ind)
        self.population = pop
        self.best_front = np.array(ckpt["best_front"], dtype=float).reshape(-1, self.config.objectives.k)
        self.metrics = [dict(m) for m in ckpt["metrics"]]
        self.denoise_steps = int(ckpt["denoise_steps"])
        self.evaluations = int(ckpt["evaluations"])

    def result(self, wall_time: float = 0.0) -> RunResult:
        front = np.array([ind.evaluation.objectives for ind in self.population if ind.evaluation.feasible])
        front = front.reshape(-1, self.config.objectives.k)
        if front.shape[0]:
            front = front[pareto_mask(front, np.ones(front.shape[0], dtype=bool))]
        archive = self.population if self.config.mode == "multi" else []
        return RunResult(self.metrics, self.population, archive, self.denoise_steps, self.evaluations, wall_time, front)


def checkpoint_path(directory: str | Path, generation: int) -> Path:
    return Path(directory) / f"gen_{generation:04d}.json"


def latest_checkpoint(directory: str | Path) -> Path | None:
    files = sorted(Path(directory).glob("gen_*.json"))
    return files[-1] if files else None


def write_json(path: Path, data) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=1, allow_nan=True))
    os.replace(tmp, path)


def initialize_population(config: RunConfig, denoiser: Denoiser, schedule: NoiseSchedule, rules: TypeRules,
                          dataset: Sequence[State] | None = None) -> list[Individual]:
    eng = Engine(config, denoiser, schedule, rules, dataset)
    eng.initialize()
    return eng.population


def run(
    config: RunConfig,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rules: TypeRules,
    dataset: Sequence[State] | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: str | Path | None = None,
    threads: int | None = None,
    stop_after: int | None = None,
    on_generation: Callable[[Engine], None] | None = None,
) -> RunResult:
    """Initialise and evolve for ``config.R`` generations.

    Args:
        checkpoint_dir: when set, one JSON checkpoint is written per generation.
        resume: checkpoint file (or directory, meaning its latest file) to continue from.
        stop_after: stop once this generation has completed (used to simulate interruption).
    """
    t0 = time.perf_counter()
    eng = Engine(config, denoiser, schedule, rules, dataset, threads)
    if resume is not None:
        path = Path(resume)
        if path.is_dir():
            path = latest_checkpoint(path)
            if path is None:
                raise PreconditionError(f"no checkpoint in {resume}")
        eng.restore(json.loads(path.read_text()))
    else:
        eng.initialize()
        _after(eng, checkpoint_dir, on_generation)
    while eng.generation < config.R:
        if stop_after is not None and eng.generation >= stop_after:
            break
        eng.step()
        _after(eng, checkpoint_dir, on_generation)
    return eng.result(time.perf_counter() - t0)


def _after(eng: Engine, checkpoint_dir, on_generation) -> None:
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        write_json(checkpoint_path(checkpoint_dir, eng.generation), eng.checkpoint())
    if on_generation is not None:
        on_generation(eng)
