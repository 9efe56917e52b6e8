"""JSON configuration: schema checks, default materialisation and object building.

A config is one JSON object.  Top-level run keys sit beside the nested
``schedule``, ``world``, ``objectives``, ``fragment`` and ``experiment``
sections.  ``task`` (T1..T4) pre-fills objectives, bounds, fragment and any
task-specific world or run settings; explicit keys win over the task.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .engine import RunConfig
from .errors import ConfigError
from .fitness import ConstraintSpec, ObjectiveEntry, ObjectiveSpec
from .tasks import TASKS, World, WorldConfig, build_world, fragment_from_spec, task_template

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"

RUN_KEYS = {
    "N": (_INT, 32),
    "R": (_INT, 10),
    "t_add": (_INT, 200),
    "k_tournament": (_INT, 2),
    "mode": (_STR, "single"),
    "seed": (_INT, 0),
    "crossover": (_STR, "uniform_mask"),
    "init": (_STR, "diffusion"),
    "denoise_parents": (_BOOL, True),
    "fragment_rate": (_FLOAT, 1.0),
    "mask_prob": (_FLOAT, 0.5),
    "stochastic": (_BOOL, True),
    "k_density": ("int?", None),
    "archive_size": ("int?", None),
    "objective_bounds": ("bounds?", None),
}
SCHEDULE_KEYS = {"kind": _STR, "T": _INT, "beta": _FLOAT, "beta_start": _FLOAT, "beta_end": _FLOAT, "s": _FLOAT,
                 "max_beta": _FLOAT}
WORLD_KEYS = {
    "dataset_size": (_INT, 10),
    "n_atoms": (_INT, 8),
    "dataset_seed": (_INT, 1),
    "branch_prob": (_FLOAT, 0.15),
    "coord_bandwidth": (_FLOAT, 0.03),
    "type_smoothing": (_FLOAT, 0.5),
    "type_weights": ("floats?", None),
}
EXPERIMENT_KEYS = {
    "seeds": ("ints?", None),
    "n_seeds": (_INT, 20),
    "sweep_grid": ("ints", [0, 25, 50, 100, 200, 400]),
    "sweep_samples": (_INT, 100),
    "threads": (_INT, 0),
}
TOP_KEYS = set(RUN_KEYS) | {"task", "schedule", "world", "objectives", "fragment", "experiment"}


def _check(value, kind: str, path: str):
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError("must not be null", path)
    if base == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
    elif base == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        value = float(value)
    elif base == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
    elif base == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
    elif base in ("ints", "floats"):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        value = [_check(v, _INT if base == "ints" else _FLOAT, f"{path}[{i}]") for i, v in enumerate(value)]
    elif base == "bounds":
        if not isinstance(value, list):
            raise ConfigError("expected a list of [min, max] pairs", path)
        out = []
        for i, pair in enumerate(value):
            if not isinstance(pair, list) or len(pair) != 2:
                raise ConfigError("expected [min, max]", f"{path}[{i}]")
            out.append([_check(v, _FLOAT, f"{path}[{i}]") for v in pair])
        value = out
    return value


def _reject_unknown(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError("expected an object", path or "<root>")
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", where)


def _objectives(raw: dict, path: str) -> dict:
    _reject_unknown(raw, {"mode", "norm", "entries", "constraints"}, path)
    out = {"mode": _check(raw.get("mode", "target"), _STR, f"{path}.mode"),
           "norm": _check(raw.get("norm", "abs"), _STR, f"{path}.norm"), "entries": [], "constraints": []}
    entries = raw.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("needs a non-empty list", f"{path}.entries")
    for i, e in enumerate(entries):
        p = f"{path}.entries[{i}]"
        _reject_unknown(e, {"prop", "target", "weight"}, p)
        out["entries"].append({
            "prop": _check(e.get("prop"), _STR, f"{p}.prop"),
            "target": _check(e.get("target"), "float?", f"{p}.target"),
            "weight": _check(e.get("weight", 1.0), _FLOAT, f"{p}.weight"),
        })
    for i, c in enumerate(raw.get("constraints", [])):
        p = f"{path}.constraints[{i}]"
        _reject_unknown(c, {"kind", "prop", "bound"}, p)
        out["constraints"].append({
            "kind": _check(c.get("kind"), _STR, f"{p}.kind"),
            "prop": _check(c.get("prop"), "str?", f"{p}.prop"),
            "bound": _check(c.get("bound"), "float?", f"{p}.bound"),
        })
    return out


def _fragment(raw, path: str):
    if raw is None:
        return None
    _reject_unknown(raw, {"source", "molecule", "seed", "start", "size", "n_atoms"}, path)
    out = {"source": _check(raw.get("source", "reference"), _STR, f"{path}.source"),
           "start": _check(raw.get("start", 0), _INT, f"{path}.start"),
           "size": _check(raw.get("size", 3), _INT, f"{path}.size")}
    if out["source"] == "reference":
        out["molecule"] = _check(raw.get("molecule"), _INT, f"{path}.molecule")
    elif out["source"] == "random":
        out["seed"] = _check(raw.get("seed"), _INT, f"{path}.seed")
        if "n_atoms" in raw:
            out["n_atoms"] = _check(raw["n_atoms"], _INT, f"{path}.n_atoms")
    elif out["source"] == "explicit":
        mol = raw.get("molecule")
        if not isinstance(mol, dict) or "positions" not in mol or "types" not in mol:
            raise ConfigError("explicit fragment needs molecule.positions and molecule.types", f"{path}.molecule")
        out["molecule"] = {"positions": mol["positions"], "types": mol["types"]}
    else:
        raise ConfigError(f"unknown source {out['source']!r}", f"{path}.source")
    return out


def resolve(raw: dict) -> dict:
    """Validate a raw config and return it with every default filled in."""
    _reject_unknown(raw, TOP_KEYS, "")
    task = raw.get("task")
    tpl: dict = {}
    if task is not None:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}", "task")
        tpl = task_template(task)
    out: dict = {"task": task}
    run_defaults = {k: d for k, (_, d) in RUN_KEYS.items()}
    run_defaults.update({k: tpl[k] for k in ("mode", "objective_bounds") if k in tpl})
    run_defaults.update(tpl.get("run", {}))
    for key, (kind, _) in RUN_KEYS.items():
        out[key] = _check(raw.get(key, run_defaults[key]), kind, key)

    sched = copy.deepcopy(raw.get("schedule", {}))
    _reject_unknown(sched, SCHEDULE_KEYS, "schedule")
    for k, v in sched.items():
        sched[k] = _check(v, SCHEDULE_KEYS[k], f"schedule.{k}")
    kind = sched.get("kind", "linear")
    if kind == "linear":
        sched = {"kind": "linear", "T": sched.get("T", 1000), "beta_start": sched.get("beta_start", 1e-4),
                 "beta_end": sched.get("beta_end", 0.02)} | {k: v for k, v in sched.items() if k not in ("kind", "T", "beta_start", "beta_end")}
    else:
        sched.setdefault("T", 1000)
    out["schedule"] = sched

    world_raw = raw.get("world", {})
    _reject_unknown(world_raw, WORLD_KEYS, "world")
    world_defaults = {k: d for k, (_, d) in WORLD_KEYS.items()}
    world_defaults.update(tpl.get("world", {}))
    out["world"] = {k: _check(world_raw.get(k, world_defaults[k]), kind, f"world.{k}") for k, (kind, _) in WORLD_KEYS.items()}

    if "objectives" in raw:
        out["objectives"] = _objectives(raw["objectives"], "objectives")
    elif "objectives" in tpl:
        out["objectives"] = _objectives(tpl["objectives"], "objectives")
    else:
        raise ConfigError("either task or objectives is required", "objectives")
    out["fragment"] = _fragment(raw["fragment"] if "fragment" in raw else tpl.get("fragment"), "fragment")

    exp_raw = raw.get("experiment", {})
    _reject_unknown(exp_raw, EXPERIMENT_KEYS, "experiment")
    exp = {k: _check(exp_raw.get(k, d), kind, f"experiment.{k}") for k, (kind, d) in EXPERIMENT_KEYS.items()}
    if exp["seeds"] is None:
        exp["seeds"] = list(range(out["seed"], out["seed"] + exp["n_seeds"]))
    exp["n_seeds"] = len(exp["seeds"])
    if exp["n_seeds"] < 1:
        raise ConfigError("need at least one seed", "experiment.seeds")
    if out["archive_size"] is None:
        out["archive_size"] = out["N"]
    out["experiment"] = exp
    # build once so invariant violations surface now, with field names
    build(out)
    return out


def _world_config(resolved: dict) -> WorldConfig:
    w = resolved["world"]
    return WorldConfig(schedule=dict(resolved["schedule"]), **w)


@dataclass
class Built:
    world: World
    run: RunConfig
    experiment: dict


def build(resolved: dict) -> Built:
    try:
        world = build_world(_world_config(resolved))
    except (ValueError, KeyError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err), "schedule" if "beta" in str(err) or "T" in str(err) else "world") from None
    obj = resolved["objectives"]
    try:
        spec = ObjectiveSpec(
            mode=obj["mode"],
            norm=obj["norm"],
            entries=tuple(ObjectiveEntry(e["prop"], e["target"], e["weight"]) for e in obj["entries"]),
            constraints=tuple(ConstraintSpec(c["kind"], c["prop"], c["bound"]) for c in obj["constraints"]),
        )
    except ConfigError as err:
        raise ConfigError(str(err), "objectives") from None
    frag = fragment_from_spec(resolved["fragment"], world) if resolved["fragment"] is not None else None
    fields = {k: resolved[k] for k in RUN_KEYS}
    bounds = fields.pop("objective_bounds")
    cfg = RunConfig(
        objectives=spec,
        fragment=frag,
        objective_bounds=None if bounds is None else tuple(tuple(b) for b in bounds),
        n_atoms=world.config.n_atoms,
        **fields,
    )
    cfg.validate(world.schedule, world.rules)
    return Built(world, cfg, resolved["experiment"])


def dumps(resolved: dict) -> str:
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


def load(path: str | Path) -> dict:
    """Read and parse a config file; syntax errors are reported with line and column."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", str(p)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}", str(p)) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", str(p))
    return raw
