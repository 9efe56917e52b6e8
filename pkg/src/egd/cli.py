"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .config import build, dumps, load, resolve
from .engine import latest_checkpoint, resolve_threads, run
from .errors import ConfigError, EGDError

log = logging.getLogger("egd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egd", description="Evolutionary guidance inside a diffusion sampler.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("-c", "--config", required=needs_config, help="JSON config file")
        sp.add_argument("-o", "--out", required=needs_config, help="output directory")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    r = sub.add_parser("run", help="one evolutionary run with per-generation checkpoints")
    common(r, needs_config=False)
    r.add_argument("--resume", help="run directory or checkpoint file to continue from")
    r.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    a = sub.add_parser("ablate", help="EGD vs. screening over the configured seeds")
    common(a)
    a.add_argument("--mode", choices=("evals", "runtime"), default="evals")
    common(sub.add_parser("sweep", help="validity vs. t_add for denoised parents and offspring"))
    common(sub.add_parser("fragment-demo", help="fragment injection vs. a no-injection control"))
    rep = sub.add_parser("report", help="print the summary stored in a run directory")
    rep.add_argument("dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(Path(args.dir))
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EGDError, RuntimeError, ValueError, KeyError, OSError) as err:
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


# ---------------------------------------------------------------------------
# helpers


def _resolved(args) -> dict:
    raw = load(args.config)
    if args.seed is not None:
        # unless seeds are listed explicitly they derive from this one
        raw["seed"] = args.seed
    return resolve(raw)


def _prepare_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite", "out")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _threads(resolved: dict) -> int:
    # 0 in the config defers to EGD_THREADS / all cores
    return resolve_threads(resolved["experiment"]["threads"] or None)


def _run_summary(result, cfg) -> dict:
    last = result.metrics[-1]
    out = {"final": last, "generations": len(result.metrics) - 1, "denoise_steps": result.denoise_steps,
           "evaluations": result.evaluations, "objectives": cfg.objectives.props, "mode": cfg.mode,
           "front_size": int(result.front.shape[0])}
    best = min(result.population, key=lambda ind: (ind.fitness.scalar_fitness, ind.evaluation.cv))
    out["best"] = {"values": best.evaluation.values.tolist(), "mae": best.evaluation.mae, "cv": best.evaluation.cv,
                   "molecule": best.molecule.to_dict()}
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    if args.resume:
        src = Path(args.resume)
        run_dir = src if src.is_dir() else src.parent.parent
        resolved = json.loads((run_dir / "config.resolved.json").read_text()) if args.config is None else _resolved(args)
        resolve(resolved)  # re-validate
        ckpt = latest_checkpoint(run_dir / "checkpoints") if src.is_dir() else src
        if ckpt is None:
            raise ConfigError(f"no checkpoint under {run_dir}", "resume")
        out = Path(args.out) if args.out else run_dir
        if out != run_dir:
            _prepare_dir(out, args.force)
            shutil.copytree(run_dir / "checkpoints", out / "checkpoints")
            ckpt = out / "checkpoints" / ckpt.name
    else:
        if args.config is None or args.out is None:
            raise ConfigError("run needs -c/--config and -o/--out (or --resume)", "argv")
        resolved = _resolved(args)
        out = Path(args.out)
        _prepare_dir(out, args.force)
        ckpt = None
    (out / "config.resolved.json").write_text(dumps(resolved))
    built = build(resolved)
    cfg, world = built.run, built.world
    t0 = time.perf_counter()
    result = run(cfg, world.denoiser, world.schedule, world.rules, world.dataset, checkpoint_dir=out / "checkpoints",
                 resume=ckpt, threads=_threads(resolved), stop_after=args.stop_after)
    wall = time.perf_counter() - t0
    bench.write_metrics(out / "metrics.csv", bench.metrics_rows(resolved["task"] or "run", cfg.seed, result))
    if cfg.mode == "multi":
        bench.write_front(out / "front.csv", result.front, cfg.objectives.props)
    _write_json(out / "report.json", {"kind": "run", **_run_summary(result, cfg)})
    _write_json(out / "timing.json", {"wall_time_s": wall})
    log.info("run finished: %s", out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    resolved = _resolved(args)
    if resolved["mode"] != "single":
        raise ConfigError("ablations compare single-objective runs", "mode")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    (out / "config.resolved.json").write_text(dumps(resolved))
    built = build(resolved)
    seeds = built.experiment["seeds"]
    t0 = time.perf_counter()
    res = bench.ablate(built.world, built.run, seeds, resolved["task"] or "custom", threads=_threads(resolved))
    rows = []
    base = res.baseline_evals if args.mode == "evals" else res.baseline_runtime
    for s, r, b in zip(seeds, res.runs, base):
        rows += bench.metrics_rows("egd", s, r)
        rows.append([f"baseline_{args.mode}", str(s), str(built.run.R), "best_mae", repr(float(b))])
    bench.write_metrics(out / "metrics.csv", rows)
    _write_json(out / "report.json", {"kind": "comparison", **res.report(args.mode)})
    _write_json(out / "timing.json", {"wall_time_s": time.perf_counter() - t0})
    return EXIT_OK


def cmd_sweep(args) -> int:
    resolved = _resolved(args)
    out = Path(args.out)
    _prepare_dir(out, args.force)
    (out / "config.resolved.json").write_text(dumps(resolved))
    built = build(resolved)
    exp = built.experiment
    t0 = time.perf_counter()
    res = bench.noise_sweep(built.world, exp["sweep_grid"], exp["sweep_samples"], built.run.seed, _threads(resolved))
    bench.write_sweep(out / "sweep.csv", res)
    positive = [t for t in res.grid if t > 0]
    report = {"kind": "sweep", "unconditional": res.unconditional, "grid": res.grid, "samples": res.samples}
    if len(positive) >= 2:
        report["trend"] = bench.sweep_trend(res, positive)
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", {"wall_time_s": time.perf_counter() - t0})
    return EXIT_OK


def cmd_fragment_demo(args) -> int:
    resolved = _resolved(args)
    out = Path(args.out)
    _prepare_dir(out, args.force)
    (out / "config.resolved.json").write_text(dumps(resolved))
    built = build(resolved)
    if built.run.fragment is None:
        raise ConfigError("fragment-demo needs a fragment (use task T4 or a fragment section)", "fragment")
    seeds = built.experiment["seeds"]
    t0 = time.perf_counter()
    demo = bench.fragment_demo(built.world, built.run, seeds, _threads(resolved))
    rows = []
    for s, a, b in zip(seeds, demo.injected, demo.control):
        rows += bench.metrics_rows("injected", s, a)
        rows += bench.metrics_rows("control", s, b)
    bench.write_metrics(out / "metrics.csv", rows)
    fronts = [np.column_stack([np.full(r.front.shape[0], s), r.front]) for s, r in zip(seeds, demo.injected)]
    bench.write_csv(out / "front.csv", ["seed", *built.run.objectives.props],
                    [[str(int(p[0])), *(repr(float(v)) for v in p[1:])] for f in fronts for p in f])
    _write_json(out / "report.json", {"kind": "fragment", **demo.report()})
    _write_json(out / "timing.json", {"wall_time_s": time.perf_counter() - t0})
    return EXIT_OK


def cmd_report(directory: Path) -> int:
    path = directory / "report.json"
    if not path.is_file():
        print(f"no report.json in {directory}", file=sys.stderr)
        return EXIT_CONFIG
    rep = json.loads(path.read_text())
    print(render_report(rep))
    return EXIT_OK


def render_report(rep: dict) -> str:
    kind = rep.get("kind")
    lines = []
    if kind == "comparison":
        s = rep["summary"]
        lines.append(f"task {rep['task']}  parity {rep['parity']}  seeds {s['n']}")
        lines.append(f"{'arm':<10}{'mean':>14}{'std':>14}")
        lines.append(f"{'egd':<10}{s['egd_mean']:>14.6g}{s['egd_std']:>14.6g}")
        lines.append(f"{'baseline':<10}{s['baseline_mean']:>14.6g}{s['baseline_std']:>14.6g}")
        lines.append(f"cliffs delta {s['cliffs_delta']:+.3f}  improvement {s['improvement_pct']:.2f}%  wins {s['wins']}/{s['n']}")
        lines.append(f"improvement = {rep['improvement_formula']}")
    elif kind == "sweep":
        u = rep["unconditional"]
        lines.append(f"unconditional valid {u['valid']:.3f} (95% CI {u['valid_ci_low']:.3f}-{u['valid_ci_high']:.3f})")
        if "trend" in rep:
            tr = rep["trend"]
            lines.append(f"{'t_add':>6}{'offspring valid':>18}")
            for t, v in zip(tr["grid"], tr["offspring"]):
                lines.append(f"{t:>6}{v:>18.3f}")
            lines.append(f"spearman rho {tr['spearman_rho']:.3f}  plateau gap {tr['plateau_gap']:.3f}")
    elif kind == "fragment":
        lines.append(f"seeds {len(rep['seeds'])}  paired wins {rep['paired_wins']}  cliffs delta {rep['cliffs_delta']:+.3f}")
        lines.append(f"mean containment injected {np.mean(rep['containment_injected']):.3f}  control {np.mean(rep['containment_control']):.3f}")
        lines.append(f"mean feasible fraction injected {rep['mean_feasible_injected']:.3f}")
    else:
        fin = rep.get("final", {})
        lines.append(f"run  generations {rep.get('generations')}  evaluations {rep.get('evaluations')}  steps {rep.get('denoise_steps')}")
        for k in sorted(fin):
            lines.append(f"  {k:<22}{fin[k]}")
    return "\n".join(lines)


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "sweep": cmd_sweep, "fragment-demo": cmd_fragment_demo}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
