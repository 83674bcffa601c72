"""Command-line front end.

Every subcommand writes its artifacts into ``--out`` and finishes by writing
``manifest.json``, so a manifest's presence means the command completed.
Configuration comes from an optional ``--config`` file (flat ``key = value``
lines, or a JSON object) overlaid by ``--<key> value`` flags.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .discovery import AnomalyDetector, KMeansState, SubgoalSet, discover
from .errors import ContractViolation
from .memory import ReplayBuffer, Transition
from .trainer import (FORMAT_VERSION, SCHEMA, ConfigError, TrainConfig, build_layout,
                      cluster_value_diagnostic, evaluate, load_artifacts, run_baseline,
                      run_intrinsic_pretraining, run_random_walk, run_unified, save_artifacts,
                      write_metrics, EpisodeRecord)

log = logging.getLogger("hrlrooms")

COMMANDS = ("pretrain", "walk", "discover", "train", "baseline", "eval", "diagnose")


# ------------------------------------------------------------------ config

def read_config_text(text: str, source: str = "<config>") -> dict:
    """Parse a JSON object or flat ``key = value`` / ``key: value`` lines."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{source}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValueError(f"{source}: JSON config must be an object")
        return data
    data = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = min((i for i in (line.find("="), line.find(":")) if i >= 0), default=-1)
        if sep <= 0:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line[:sep].strip(), line[sep + 1:].strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        if key in data:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        data[key] = value
    return data


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """File values (if any) overlaid with ``overrides``; validated as a whole."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        values.update(read_config_text(p.read_text(), str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def format_config(config: TrainConfig) -> str:
    """Flat ``key = value`` text that :func:`parse_config` reads back to an equal config."""
    lines = [f"# format_version = {FORMAT_VERSION}"]
    for key, value in dataclasses.asdict(config).items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ output

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: TrainConfig | None, files, started: str,
                   extra: dict | None = None) -> Path:
    """List every emitted file with its hash; called last."""
    out = Path(out)
    entries = []
    for f in files:
        f = Path(f)
        entries.append({"path": str(f.relative_to(out)) if f.is_relative_to(out) else str(f),
                        "sha256": _sha256(f), "bytes": f.stat().st_size})
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "version": __version__,
        "backend": backend_name(),
        "seed": None if config is None else config.seed,
        "config": None if config is None else config.to_dict(),
        "started": started,
        "finished": _now(),
        "files": entries,
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(out: Path, name: str, payload: dict) -> Path:
    p = out / name
    p.write_text(json.dumps({"format_version": FORMAT_VERSION, **payload}, indent=1,
                            sort_keys=True) + "\n")
    return p


# ------------------------------------------------------------------ commands

def cmd_pretrain(config: TrainConfig, args, out: Path) -> tuple[list[Path], dict]:
    layout = build_layout(config)
    res = run_intrinsic_pretraining(config, layout)
    files = [_write_json(out, "layout.json", layout.to_dict())]
    res.controller.net.save(out / "controller.bin")
    files += [out / "controller.bin", out / "controller.bin.json"]
    records = [EpisodeRecord(i, 0.0, 0, bool(ok), res.controller.eps.value, 0.0, 0, False, 1,
                             int(ok)) for i, ok in enumerate(res.attained)]
    write_metrics(records, out / "metrics.csv")
    files.append(out / "metrics.csv")
    if args.dump_memory:
        res.memory.dump_jsonl(out / "memory.jsonl")
        res.controller_memory.dump_jsonl(out / "controller_memory.jsonl")
        files += [out / "memory.jsonl", out / "controller_memory.jsonl"]
    rate = float(np.mean(res.attained)) if res.attained else 0.0
    print(f"pretrain: {len(res.attained)} episodes, goal success {rate:.3f}")
    return files, {"goal_success": rate}


def cmd_walk(config: TrainConfig, args, out: Path) -> tuple[list[Path], dict]:
    layout = build_layout(config)
    controller = None
    if args.controller:
        from .agents import ControllerAgent, EpsilonSchedule
        from .approx import StateGoalNet
        controller = ControllerAgent(StateGoalNet.load(args.controller),
                                     EpsilonSchedule(config.eps1_start, config.eps1_end,
                                                     config.eps_decay_episodes),
                                     config.alpha1, config.gamma)
    memory = run_random_walk(config, layout, controller)
    memory.dump_jsonl(out / "memory.jsonl")
    files = [_write_json(out, "layout.json", layout.to_dict()), out / "memory.jsonl"]
    positive = int((memory.column("r") > 0).sum())
    print(f"walk: {len(memory)} transitions, {positive} with positive reward")
    return files, {"transitions": len(memory), "positive_transitions": positive}


def cmd_discover(config: TrainConfig, args, out: Path) -> tuple[list[Path], dict]:
    memory = ReplayBuffer.load_jsonl(args.memory)
    if memory.entry_type is not Transition:
        raise ContractViolation(f"{args.memory}: expected a Transition memory dump")
    gset = SubgoalSet((config.width, config.height), config.merge_radius)
    detector = AnomalyDetector(config.anomaly_threshold, config.feature_distance_threshold,
                               (config.width, config.height))
    rng = np.random.default_rng(config.seed)
    gset, kstate, memory = discover(memory, detector, KMeansState(config.k), gset,
                                    max_iters=config.kmeans_max_iters, seed=rng)
    gset.save(out / "subgoals.json")
    files = [out / "subgoals.json"]
    n_anom, n_cent = len(gset.anomalies), len(gset.centroids)
    print(f"discover: {n_anom} anomalies, {n_cent} centroids")
    for g in gset:
        where = tuple(g.cell) if g.cell is not None else tuple(round(v, 4) for v in g.point)
        print(f"  {g.id:2d} {g.kind.value:8s} {where}")
    return files, {"anomalies": n_anom, "centroids": n_cent}


def _train_one(config: TrainConfig, out: Path, baseline: bool) -> dict:
    started = _now()
    out.mkdir(parents=True, exist_ok=True)

    def progress(res):
        log.info("episode %d: greedy success %.3f, mean return %.2f", res.episode,
                 res.success_rate, res.mean_return)

    art = (run_baseline if baseline else run_unified)(config, progress=progress)
    files = save_artifacts(art, out)
    tail = art.records[-1000:]
    summary = {
        "seed": config.seed,
        "final_window_success": float(np.mean([r.success for r in tail])) if tail else 0.0,
        "final_window_key": float(np.mean([r.key for r in tail])) if tail else 0.0,
        "final_eval": None if art.final_eval is None else dataclasses.asdict(art.final_eval),
        "env_steps": art.env_steps,
        "timings": art.timings,
    }
    write_manifest(out, "baseline" if baseline else "train", config, files, started, summary)
    return summary


def _run_sweep(config: TrainConfig, args, out: Path, baseline: bool) -> tuple[list[Path], dict]:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    if len(seeds) == 1:
        summary = _train_one(config, out, baseline)
        return [], {"already_written": True, **summary}
    runs = {s: (config.replace(seed=s), out / f"seed_{s}") for s in seeds}
    with concurrent.futures.ProcessPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        futures = {s: pool.submit(_train_one, c, d, baseline) for s, (c, d) in runs.items()}
        summaries = {s: f.result() for s, f in futures.items()}
    rows = ["seed,final_window_success,final_window_key,greedy_success,greedy_mean_return"]
    for s in seeds:
        sm = summaries[s]
        fe = sm["final_eval"] or {}
        rows.append(f"{s},{sm['final_window_success']},{sm['final_window_key']},"
                    f"{fe.get('success_rate', '')},{fe.get('mean_return', '')}")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    files = [out / "summary.csv"] + [d / "manifest.json" for _, d in runs.values()]
    return files, {"seeds": seeds}


def cmd_train(config, args, out):
    return _run_sweep(config, args, out, baseline=False)


def cmd_baseline(config, args, out):
    return _run_sweep(config, args, out, baseline=True)


def cmd_eval(config: TrainConfig, args, out: Path) -> tuple[list[Path], dict]:
    art = load_artifacts(args.checkpoint)
    res = evaluate(art, args.episodes, np.random.default_rng(config.seed))
    print(f"eval: success rate {res.success_rate:.3f}, mean return {res.mean_return:.2f} "
          f"over {res.episodes} episodes")
    return [_write_json(out, "eval.json", dataclasses.asdict(res))], {}


def cmd_diagnose(config: TrainConfig, args, out: Path) -> tuple[list[Path], dict]:
    art = load_artifacts(args.checkpoint)
    if art.controller is None:
        raise ContractViolation("diagnose needs a hierarchical run checkpoint")
    diag = cluster_value_diagnostic(art, args.samples, np.random.default_rng(config.seed))
    for cl, st in diag["clusters"].items():
        print(f"cluster {cl}: mean {st['mean']:.3f} std {st['std']:.3f} (n={st['n']})")
    diag.pop("format_version")
    return [_write_json(out, "diagnostic.json", diag)], {}


HANDLERS = {"pretrain": cmd_pretrain, "walk": cmd_walk, "discover": cmd_discover,
            "train": cmd_train, "baseline": cmd_baseline, "eval": cmd_eval,
            "diagnose": cmd_diagnose}


# ------------------------------------------------------------------ parser

def _config_flags(parser: argparse.ArgumentParser, skip=()) -> None:
    group = parser.add_argument_group("configuration (overrides --config)")
    defaults = TrainConfig()
    for key in TrainConfig.keys():
        if key in skip:
            continue
        spec = SCHEMA[key]
        if spec[0] == "choice":
            allowed = "{" + ",".join(spec[1]) + "}"
        else:
            lo = "-inf" if spec[1] is None else spec[1]
            hi = "inf" if spec[2] is None else spec[2]
            allowed = f"{spec[0]} in [{lo}, {hi}]"
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        group.add_argument(*flags, dest=f"cfg_{key}", metavar="V", default=None,
                           help=f"{allowed}; default {getattr(defaults, key)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrlrooms", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hrlrooms {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain": "train the controller alone on random goal cells",
        "walk": "collect an exploration memory dump (JSONL)",
        "discover": "find anomaly and centroid subgoals in a memory dump",
        "train": "run the full hierarchical learner",
        "baseline": "run the flat SARSA baseline",
        "eval": "greedy evaluation of a saved run",
        "diagnose": "per-cluster Monte-Carlo state values of a saved run",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="flat key = value file or JSON object")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pretrain":
            p.add_argument("--dump-memory", action="store_true",
                           help="also write the agent and controller memories as JSONL")
        if name == "walk":
            p.add_argument("--controller", help="controller checkpoint to walk with")
        if name == "discover":
            p.add_argument("--memory", required=True, help="Transition JSONL dump")
        if name in ("train", "baseline"):
            p.add_argument("--seeds", help="comma-separated seeds; one child run per seed")
            p.add_argument("--jobs", type=int, default=1, help="parallel child runs")
        if name in ("eval", "diagnose"):
            p.add_argument("--checkpoint", required=True, help="output directory of a run")
        if name == "eval":
            p.add_argument("--episodes", type=int, default=100)
        if name == "diagnose":
            p.add_argument("--samples", type=int, default=50, help="states per cluster")
        # eval's --episodes counts evaluation episodes, not the training budget
        _config_flags(p, skip=("episodes",) if name == "eval" else ())
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        config = parse_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = _now()
        files, extra = HANDLERS[args.command](config, args, out)
        if not extra.pop("already_written", False):
            write_manifest(out, args.command, config, files, started, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
