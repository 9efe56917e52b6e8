"""Experiment harness: noise sweeps, EGD-vs-screening ablations, multi-seed
aggregation and the fragment demo, plus CSV/JSON emission."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import rng as rngmod
from .diffusion import State, denoise_many, forward_noise, sample_unconditional
from .engine import RunConfig, RunResult, crossover_noised, resolve_threads, run
from .errors import BudgetError, PreconditionError, RangeError
from .fitness import cliffs_delta, evaluate_molecule, penalized_array
from .molecule import check_validity, decode
from .tasks import World

IMPROVEMENT_FORMULA = "(baseline_mean - egd_mean) / egd_mean * 100 (minimisation)"
DELTA_ORIENTATION = "cliffs_delta(baseline, egd); positive means EGD attains lower error"


# ---------------------------------------------------------------------------
# noise sweep


@dataclass
class SweepResult:
    rows: list[dict]  # t_add, arm, metric, value
    unconditional: dict  # rates and 95% CI of the valid rate
    grid: list[int]
    samples: int

    def value(self, t_add: int, arm: str, metric: str) -> float:
        for r in self.rows:
            if r["t_add"] == t_add and r["arm"] == arm and r["metric"] == metric:
                return r["value"]
        raise KeyError((t_add, arm, metric))


def _rates(states: Sequence[State], world: World) -> dict:
    reports = [check_validity(decode(s, world.rules), world.rules) for s in states]
    return {
        "atom_stable": float(np.mean([r.atom_stable_fraction for r in reports])),
        "molecule_stable": float(np.mean([r.molecule_stable for r in reports])),
        "valid": float(np.mean([r.valid for r in reports])),
    }


def binomial_ci(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) interval for a binomial proportion."""
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def noise_sweep(world: World, grid: Sequence[int] = (0, 25, 50, 100, 200, 400), samples: int = 100,
                seed: int = 0, threads: int | None = None) -> SweepResult:
    """Validity of denoised parents and of denoised crossover offspring per ``t_add``.

    Parents are valid unconditional samples.  At ``t_add = 0`` nothing is
    denoised: the parents arm is the parents themselves and the offspring arm
    is the clean crossover.
    """
    sched = world.schedule
    for t in grid:
        if not 0 <= t <= sched.T:
            raise RangeError(f"grid value {t} outside [0, {sched.T}]")
    threads = resolve_threads(threads)
    n, d = world.config.n_atoms, world.rules.d
    uncond = sample_unconditional(n, d, sched, world.denoiser, rngmod.streams(seed, 0, rngmod.SWEEP, samples), threads)
    u_rates = _rates(uncond, world)
    k = int(round(u_rates["valid"] * samples))
    lo, hi = binomial_ci(k, samples)
    pool = [s for s in uncond if check_validity(decode(s, world.rules), world.rules).valid]
    if not pool:
        raise PreconditionError("the unconditional sampler produced no valid parents")
    rows = []
    for gi, t in enumerate(grid):
        gen = gi + 1
        par, off = [], []
        for i in range(samples):
            g = rngmod.stream(seed, gen, rngmod.SWEEP, i)
            a = pool[int(g.integers(len(pool)))]
            b = pool[int(g.integers(len(pool)))]
            a_t = forward_noise(a, t, sched, g)
            b_t = forward_noise(b, t, sched, g)
            child = crossover_noised(a_t, b_t, "uniform_mask", g)
            par.append(a_t)
            off.append(child)
        if t > 0:
            par = denoise_many(par, sched, world.denoiser, rngmod.streams(seed, gen, rngmod.SWEEP, samples, samples),
                               threads=threads)
            off = denoise_many(off, sched, world.denoiser, rngmod.streams(seed, gen, rngmod.SWEEP, samples, 2 * samples),
                               threads=threads)
        for arm, states in (("parents", par), ("offspring", off)):
            for metric, v in _rates(states, world).items():
                rows.append({"t_add": int(t), "arm": arm, "metric": metric, "value": v})
    unconditional = dict(u_rates, valid_ci_low=lo, valid_ci_high=hi, samples=samples)
    return SweepResult(rows, unconditional, [int(t) for t in grid], samples)


def sweep_trend(result: SweepResult, grid: Sequence[int] | None = None, metric: str = "valid") -> dict:
    """Spearman correlation of the offspring rate with ``t_add`` and the plateau gap."""
    grid = list(grid or [t for t in result.grid if t > 0])
    off = [result.value(t, "offspring", metric) for t in grid]
    rho = float(stats.spearmanr(grid, off).statistic) if len(set(off)) > 1 else float("nan")
    last = grid[-1]
    return {
        "grid": grid,
        "offspring": off,
        "spearman_rho": rho,
        "plateau_gap": abs(result.value(last, "offspring", metric) - result.value(last, "parents", metric)),
    }


# ---------------------------------------------------------------------------
# screening baseline and ablations


@dataclass
class Screening:
    """Unconditional generate-and-filter baseline for one seed."""

    mae: np.ndarray
    cv: np.ndarray

    def final_mae(self, count: int, keep: int) -> float:
        """Error of the best of the top-``keep`` among the first ``count`` samples.

        Ranking uses the penalized fitness, so feasible samples come first.
        """
        if count < 1:
            raise PreconditionError("baseline needs at least one sample")
        pen = penalized_array(self.mae[:count], self.cv[:count])
        order = np.argsort(pen, kind="stable")[:keep]
        return float(self.mae[order[0]])


def screen(world: World, config: RunConfig, count: int, seed: int, threads: int | None = None) -> Screening:
    states = sample_unconditional(config.n_atoms, world.rules.d, world.schedule, world.denoiser,
                                  rngmod.streams(seed, 0, rngmod.BASELINE, count), resolve_threads(threads))
    evs = [evaluate_molecule(decode(s, world.rules), config.objectives, world.rules, config.fragment) for s in states]
    return Screening(np.array([e.mae for e in evs]), np.array([e.cv for e in evs]))


def runtime_parity_count(egd_steps: int, T: int) -> int:
    """Smallest number of full-length samples whose reverse steps cover ``egd_steps``."""
    return max(1, -(-int(egd_steps) // int(T)))


def budget_ledger(config: RunConfig, result: RunResult, T: int) -> dict:
    N, R = config.N, config.R
    evals_count = result.evaluations
    runtime_count = runtime_parity_count(result.denoise_steps, T)
    ledger = {
        "egd_evaluations": result.evaluations,
        "egd_reverse_steps": result.denoise_steps,
        "equal_evals": {"baseline_samples": evals_count, "baseline_evaluations": evals_count,
                        "baseline_reverse_steps": evals_count * T},
        "equal_runtime": {"baseline_samples": runtime_count, "baseline_evaluations": runtime_count,
                          "baseline_reverse_steps": runtime_count * T},
        "reference_constants": {
            "one_plus_RN_over_5": math.ceil(1 + R * N / 5),
            "N_times_one_plus_R_minus_1_over_5": math.ceil(N * (1 + (R - 1) / 5)),
        },
        "t_add_over_T": config.t_add / T,
    }
    check_parity(ledger, T)
    return ledger


def check_parity(ledger: dict, T: int) -> None:
    ev = ledger["equal_evals"]
    if ev["baseline_evaluations"] != ledger["egd_evaluations"]:
        raise BudgetError("evaluation budgets differ")
    rt = ledger["equal_runtime"]
    gap = rt["baseline_reverse_steps"] - ledger["egd_reverse_steps"]
    if ledger["egd_reverse_steps"] > 0 and not 0 <= gap < T:
        raise BudgetError(f"runtime parity off by {gap} steps (allowed [0, {T}))")


def aggregate(egd: Sequence[float], baseline: Sequence[float], seeds_egd: Sequence[int] | None = None,
              seeds_baseline: Sequence[int] | None = None) -> dict:
    """Means, sample standard deviations, Cliff's delta and improvement percentage."""
    if seeds_egd is not None and seeds_baseline is not None and list(seeds_egd) != list(seeds_baseline):
        raise PreconditionError("arms were run on different seeds")
    e = np.asarray(egd, dtype=float)
    b = np.asarray(baseline, dtype=float)
    if e.shape != b.shape:
        raise PreconditionError(f"seed count mismatch: {e.size} vs {b.size}")
    if e.size < 2:
        raise PreconditionError("aggregation needs at least two seeds")
    em, bm = float(np.mean(e)), float(np.mean(b))
    imp = 0.0 if bm == em else ((bm - em) / em * 100.0 if em != 0 else math.inf)
    return {
        "egd_mean": em,
        "egd_std": float(np.std(e, ddof=1)),
        "baseline_mean": bm,
        "baseline_std": float(np.std(b, ddof=1)),
        "cliffs_delta": cliffs_delta(b, e),
        "improvement_pct": imp,
        "wins": int(np.sum(e < b)),
        "n": int(e.size),
    }


@dataclass
class AblationResult:
    task: str
    seeds: list[int]
    egd: list[float]
    baseline_evals: list[float]
    baseline_runtime: list[float]
    budgets: list[dict]
    runs: list[RunResult]

    def report(self, mode: str) -> dict:
        base = self.baseline_evals if mode == "evals" else self.baseline_runtime
        return {
            "task": self.task,
            "parity": "equal_evals" if mode == "evals" else "equal_runtime",
            "metric": "final best MAE (lower is better)",
            "improvement_formula": IMPROVEMENT_FORMULA,
            "delta_orientation": DELTA_ORIENTATION,
            "seeds": self.seeds,
            "egd": self.egd,
            "baseline": base,
            "summary": aggregate(self.egd, base),
            "budgets": [b["equal_evals" if mode == "evals" else "equal_runtime"] | {
                "egd_evaluations": b["egd_evaluations"], "egd_reverse_steps": b["egd_reverse_steps"],
                "reference_constants": b["reference_constants"]} for b in self.budgets],
        }


def ablate(world: World, config: RunConfig, seeds: Sequence[int], task: str = "", threads: int | None = None) -> AblationResult:
    """EGD vs. screening at equal evaluations and at equal reverse steps.

    Both baselines of a seed come from one stream of unconditional samples;
    the runtime-parity baseline uses its prefix.
    """
    if config.mode != "single":
        raise PreconditionError("ablations compare single-objective runs")
    T = world.schedule.T
    if config.t_add * 5 != T:
        warnings.warn(f"t_add={config.t_add} is not T/5; step parity uses t_add/T={config.t_add / T:.3f}", stacklevel=2)
    egd, b_ev, b_rt, budgets, runs = [], [], [], [], []
    for s in seeds:
        cfg = replace(config, seed=int(s))
        res = run(cfg, world.denoiser, world.schedule, world.rules, world.dataset, threads=threads)
        ledger = budget_ledger(cfg, res, T)
        n_ev = ledger["equal_evals"]["baseline_samples"]
        n_rt = ledger["equal_runtime"]["baseline_samples"]
        sc = screen(world, cfg, max(n_ev, n_rt), int(s), threads)
        egd.append(res.final("best_mae"))
        b_ev.append(sc.final_mae(n_ev, cfg.N))
        b_rt.append(sc.final_mae(n_rt, cfg.N))
        budgets.append(ledger)
        runs.append(res)
    return AblationResult(task, [int(s) for s in seeds], egd, b_ev, b_rt, budgets, runs)


# ---------------------------------------------------------------------------
# fragment demo


@dataclass
class FragmentDemo:
    seeds: list[int]
    injected: list[RunResult]
    control: list[RunResult]

    def containment(self, arm: str) -> list[float]:
        runs = self.injected if arm == "injected" else self.control
        return [r.final("containment_mean") for r in runs]

    def feasible(self, arm: str) -> list[float]:
        runs = self.injected if arm == "injected" else self.control
        return [r.final("feasible_rate") for r in runs]

    def report(self) -> dict:
        ci, cc = self.containment("injected"), self.containment("control")
        return {
            "seeds": self.seeds,
            "containment_injected": ci,
            "containment_control": cc,
            "feasible_injected": self.feasible("injected"),
            "feasible_control": self.feasible("control"),
            "paired_wins": int(sum(a > b for a, b in zip(ci, cc))),
            "cliffs_delta": cliffs_delta(ci, cc),
            "mean_feasible_injected": float(np.mean(self.feasible("injected"))),
        }


def fragment_demo(world: World, config: RunConfig, seeds: Sequence[int], threads: int | None = None) -> FragmentDemo:
    """Paired runs with and without fragment injection (selection is identical)."""
    if config.fragment is None:
        raise PreconditionError("fragment demo needs a fragment")
    inj, ctl = [], []
    for s in seeds:
        inj.append(run(replace(config, seed=int(s)), world.denoiser, world.schedule, world.rules, world.dataset, threads=threads))
        ctl.append(run(replace(config, seed=int(s), fragment_rate=0.0), world.denoiser, world.schedule, world.rules,
                       world.dataset, threads=threads))
    return FragmentDemo([int(s) for s in seeds], inj, ctl)


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_rows(experiment: str, seed: int, result: RunResult) -> list[list[str]]:
    rows = []
    for m in result.metrics:
        g = m["generation"]
        for k, v in m.items():
            if k != "generation":
                rows.append([experiment, str(seed), str(g), k, _fmt(v)])
    return rows


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


METRICS_HEADER = ("experiment", "seed", "generation", "metric", "value")


def write_metrics(path: Path, rows: Sequence[Sequence]) -> None:
    write_csv(path, METRICS_HEADER, rows)


def write_front(path: Path, front: np.ndarray, names: Sequence[str], seed: int | None = None) -> None:
    header = (["seed"] if seed is not None else []) + list(names)
    rows = [([str(seed)] if seed is not None else []) + [_fmt(v) for v in p] for p in np.asarray(front).reshape(-1, len(names))]
    write_csv(path, header, rows)


def write_sweep(path: Path, result: SweepResult) -> None:
    write_csv(path, ("t_add", "arm", "metric", "value"),
              [[r["t_add"], r["arm"], r["metric"], _fmt(r["value"])] for r in result.rows])
