"""Training loops: controller pretraining, the discovery walk, the unified
hierarchical learner, the flat SARSA baseline, and greedy evaluation."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .agents import (ControllerAgent, EpsilonSchedule, MetaControllerAgent, SarsaBaseline,
                     epsilon_greedy)
from .approx import GaussianCoder, MetaQTable, StateGoalNet
from .discovery import (AnomalyDetector, KMeansState, StateIndexer, SubgoalKind, SubgoalSet,
                        discover, kmeans_fit, memory_points)
from .env import (DEFAULT_MAX_STEPS, EnvState, GridPos, Layout, Variant, generate_layout, reset,
                  step, wall_mask, with_goal)
from .errors import ContractViolation
from .memory import IntrinsicTransition, MetaTransition, ReplayBuffer, Transition

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METRIC_COLUMNS = ("episode", "return", "steps", "success", "eps1", "eps2", "n_subgoals",
                  "key", "attempts", "attained")


class ConfigError(ValueError):
    """A configuration value outside its allowed range (or an unknown key)."""

    def __init__(self, key: str, value, allowed: str):
        self.key, self.value, self.allowed = key, value, allowed
        super().__init__(f"config key {key!r}: value {value!r} not allowed; expected {allowed}")


def _int_range(lo, hi=None):
    return ("int", lo, hi)


def _float_range(lo, hi=None):
    return ("float", lo, hi)


# key -> (type, lower, upper) or ("choice", options)
SCHEMA: dict[str, tuple] = {
    "variant": ("choice", tuple(v.value for v in Variant)),
    "placement": ("choice", ("hard", "easy")),
    "width": _int_range(5, 200),
    "height": _int_range(5, 200),
    "episodes": _int_range(0),
    "max_steps": _int_range(1),
    "subgoal_steps": _int_range(1),
    "k": _int_range(1, 64),
    "alpha1": _float_range(0.0, 1.0),
    "alpha2": _float_range(0.0, 1.0),
    "gamma": _float_range(0.0, 1.0),
    "eps1_start": _float_range(0.0, 1.0),
    "eps1_end": _float_range(0.0, 1.0),
    "eps2_start": _float_range(0.0, 1.0),
    "eps2_end": _float_range(0.0, 1.0),
    "eps_decay_episodes": _int_range(1),
    "discovery_interval": _int_range(1),
    "memory_capacity": _int_range(1),
    "controller_capacity": _int_range(1),
    "meta_capacity": _int_range(1),
    "batch1": _int_range(1),
    "batch2": _int_range(1),
    "pretrain_episodes": _int_range(0),
    "walk_episodes": _int_range(0),
    "walk_policy": ("choice", ("controller", "random")),
    "seed": _int_range(0, 2**63 - 1),
    "n_hidden": _int_range(1, 10_000),
    "kwta_k": _int_range(1, 10_000),
    "coder_grid": _int_range(2, 64),
    "gate_threshold": _float_range(0.0, 1.0),
    "anomaly_threshold": _float_range(None),
    "feature_distance_threshold": _float_range(0.0),
    "merge_radius": _float_range(0.0),
    "meta_discount_mode": ("choice", ("power", "plain")),
    "kmeans_max_iters": _int_range(1),
    "eval_interval": _int_range(0),
    "eval_episodes": _int_range(1),
    "final_eval_episodes": _int_range(0),
}


@dataclass
class TrainConfig:
    variant: str = Variant.FOUR_ROOM_KEY_LOCK.value
    placement: str = "hard"
    width: int = 20
    height: int = 20
    episodes: int = 50_000
    max_steps: int = DEFAULT_MAX_STEPS
    subgoal_steps: int = 50
    k: int = 4
    alpha1: float = 0.001
    alpha2: float = 0.001
    gamma: float = 0.99
    eps1_start: float = 0.2
    eps1_end: float = 0.2
    eps2_start: float = 0.2
    eps2_end: float = 0.2
    eps_decay_episodes: int = 1
    discovery_interval: int = 10_000
    memory_capacity: int = 1_000_000
    controller_capacity: int = 1_000_000
    meta_capacity: int = 50_000
    batch1: int = 32
    batch2: int = 32
    pretrain_episodes: int = 2_000
    walk_episodes: int = 100
    walk_policy: str = "random"
    seed: int = 0
    n_hidden: int = 50
    kwta_k: int = 5
    coder_grid: int = 5
    gate_threshold: float = 0.1
    anomaly_threshold: float = 1.0
    feature_distance_threshold: float | None = None
    merge_radius: float | None = None
    meta_discount_mode: str = "power"
    kmeans_max_iters: int = 100
    eval_interval: int = 500
    eval_episodes: int = 100
    final_eval_episodes: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            spec = SCHEMA[f.name]
            if v is None and f.default is None:
                continue
            if spec[0] == "choice":
                if v not in spec[1]:
                    raise ConfigError(f.name, v, "one of " + ", ".join(spec[1]))
                continue
            kind, lo, hi = spec
            ok = isinstance(v, (int, np.integer)) and not isinstance(v, bool) if kind == "int" \
                else isinstance(v, (int, float, np.floating)) and not isinstance(v, bool)
            ok = ok and np.isfinite(v) and (lo is None or v >= lo) and (hi is None or v <= hi)
            if not ok:
                lo_s = "-inf" if lo is None else lo
                hi_s = "inf" if hi is None else hi
                raise ConfigError(f.name, v, f"{kind} in [{lo_s}, {hi_s}]")
        if self.kwta_k > self.n_hidden:
            raise ConfigError("kwta_k", self.kwta_k, f"int in [1, n_hidden={self.n_hidden}]")
        if self.eps1_end > self.eps1_start:
            raise ConfigError("eps1_end", self.eps1_end, f"float in [0, eps1_start={self.eps1_start}]")
        if self.eps2_end > self.eps2_start:
            raise ConfigError("eps2_end", self.eps2_end, f"float in [0, eps2_start={self.eps2_start}]")

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        """Build from plain values; unknown keys and out-of-range values raise ConfigError."""
        names = set(cls.keys())
        clean = {}
        for key, value in d.items():
            if key == "format_version":
                continue
            if key not in names:
                raise ConfigError(key, value, "a known key: " + ", ".join(sorted(names)))
            clean[key] = _coerce(key, value)
        return cls(**clean)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**asdict(self), **changes})


def _coerce(key: str, value):
    """Loose text values (from flags or flat files) to the schema type."""
    spec = SCHEMA[key]
    if value is None or spec[0] == "choice":
        return value
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("none", "null", ""):
            return None
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(key, value, f"a number ({spec[0]})") from None
    if spec[0] == "float" and isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return float(value)
    if spec[0] == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


# ------------------------------------------------------------------ records

@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    steps: int
    success: bool
    eps1: float
    eps2: float
    n_subgoals: int
    key: bool = False
    attempts: int = 0
    attained: int = 0

    def row(self) -> list:
        return [self.episode, self.ret, self.steps, int(self.success), self.eps1, self.eps2,
                self.n_subgoals, int(self.key), self.attempts, self.attained]


@dataclass
class EvalResult:
    episode: int
    success_rate: float
    key_rate: float
    mean_return: float
    max_return: float
    episodes: int


@dataclass
class RunArtifacts:
    config: TrainConfig
    layout: Layout
    controller: ControllerAgent | None = None
    meta: MetaControllerAgent | None = None
    baseline: SarsaBaseline | None = None
    gset: SubgoalSet | None = None
    kstate: KMeansState | None = None
    memory: ReplayBuffer | None = None
    controller_memory: ReplayBuffer | None = None
    meta_memory: ReplayBuffer | None = None
    records: list[EpisodeRecord] = field(default_factory=list)
    evals: list[EvalResult] = field(default_factory=list)
    final_eval: EvalResult | None = None
    env_steps: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "baseline" if self.baseline is not None else "hrl"


def write_metrics(records: Iterable[EpisodeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics(path) -> list[EpisodeRecord]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [EpisodeRecord(int(r["episode"]), float(r["return"]), int(r["steps"]),
                          bool(int(r["success"])), float(r["eps1"]), float(r["eps2"]),
                          int(r["n_subgoals"]), bool(int(r["key"])), int(r["attempts"]),
                          int(r["attained"])) for r in rows]


def write_evals(evals: Iterable[EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["episode", "success_rate", "key_rate", "mean_return", "max_return",
                    "episodes"])
        for e in evals:
            w.writerow([e.episode, e.success_rate, e.key_rate, e.mean_return, e.max_return,
                        e.episodes])


def read_evals(path) -> list[EvalResult]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [EvalResult(int(r["episode"]), float(r["success_rate"]), float(r["key_rate"]),
                       float(r["mean_return"]), float(r["max_return"]), int(r["episodes"]))
            for r in csv.DictReader(lines)]


# ------------------------------------------------------------------ helpers

class _Streams:
    """Independent generators derived from the single run seed."""

    NAMES = ("layout", "init", "pretrain", "walk", "kmeans", "train", "baseline")

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def layout_seed(self) -> int:
        return int(np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
                   .integers(2**31))

    def eval_rng(self, episode: int) -> np.random.Generator:
        # a fresh stream per evaluation point keeps evaluation from shifting training
        return np.random.default_rng([self.seed, 7919, episode])


def build_layout(config: TrainConfig) -> Layout:
    return generate_layout(config.variant, _Streams(config.seed).layout_seed(),
                           width=config.width, height=config.height, placement=config.placement)


def build_net(config: TrainConfig, rng) -> StateGoalNet:
    return StateGoalNet((config.width, config.height),
                        state_coder=GaussianCoder(config.coder_grid, config.coder_grid),
                        goal_coder=GaussianCoder(config.coder_grid, config.coder_grid),
                        n_hidden=config.n_hidden, k=config.kwta_k, gate_threshold=config.gate_threshold,
                        seed=rng)


def _eps(config: TrainConfig, level: int) -> EpsilonSchedule:
    if level == 1:
        return EpsilonSchedule(config.eps1_start, config.eps1_end, config.eps_decay_episodes)
    return EpsilonSchedule(config.eps2_start, config.eps2_end, config.eps_decay_episodes)


def _detector(config: TrainConfig) -> AnomalyDetector:
    return AnomalyDetector(config.anomaly_threshold, config.feature_distance_threshold,
                           (config.width, config.height))


def _greedy(net: StateGoalNet, cell_idx: int, rows) -> int:
    return int(np.argmax(kernels.q_values(net.w1, net.w2, net.codes[cell_idx], rows, net.k)))


def _act(net: StateGoalNet, cell_idx: int, rows, epsilon: float, rng) -> int:
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return _greedy(net, cell_idx, rows)


# ------------------------------------------------------------ pretraining

@dataclass
class PretrainResult:
    controller: ControllerAgent
    memory: ReplayBuffer
    controller_memory: ReplayBuffer
    attained: list[bool]

    def __iter__(self):
        # unpacks as (controller, memory)
        return iter((self.controller, self.memory))


def run_intrinsic_pretraining(config: TrainConfig, layout: Layout | None = None, *,
                              controller: ControllerAgent | None = None,
                              rng: np.random.Generator | None = None,
                              episodes: int | None = None) -> PretrainResult:
    """Train the controller alone on uniformly random goal cells.

    Each episode starts on a random open cell, draws a different random open
    cell as the goal and runs until the goal is reached, the task ends or
    ``subgoal_steps`` pass. Experience goes to both the agent memory and the
    controller memory; the controller replays ``batch1`` entries per step.
    """
    streams = _Streams(config.seed)
    layout = layout or build_layout(config)
    rng = rng or streams.pretrain
    if controller is None:
        controller = ControllerAgent(build_net(config, streams.init), _eps(config, 1),
                                     config.alpha1, config.gamma)
    net = controller.net
    width = config.width
    memory = ReplayBuffer(Transition, config.memory_capacity)
    cmem = ReplayBuffer(IntrinsicTransition, config.controller_capacity)
    cells = layout.free_cells
    n = config.pretrain_episodes if episodes is None else episodes
    horizon = min(config.subgoal_steps, config.max_steps)
    row_cache: dict[GridPos, np.ndarray] = {}
    outcomes = []
    eps = controller.eps.value
    # on the moving-goal task the environment's own goal follows the drawn goal
    dynamic = layout.variant is Variant.SINGLE_ROOM_DYNAMIC_GOAL
    for _ in range(n):
        start = cells[int(rng.integers(len(cells)))]
        goal = start
        while goal == start:
            goal = cells[int(rng.integers(len(cells)))]
        rows = row_cache.get(goal)
        if rows is None:
            rows = row_cache[goal] = net.gates(goal)
        gp = net.normalize(goal)
        env = with_goal(layout, goal) if dynamic else layout
        state = reset(env, None, start=start, max_steps=horizon)
        s = start
        reached = False
        while not state.done:
            a = _act(net, s.y * width + s.x, rows, eps, rng)
            state, out = step(state, a)
            s1 = out.next_obs
            reached = s1 == goal
            rt = 1.0 if reached else min(out.reward, -1.0)
            memory.append(s, a, out.reward, s1, state.success)
            cmem.append(s, -1, a, rt, s1, reached, gp, state.success)
            controller.update_from_buffer(cmem, config.batch1, rng)
            s = s1
            if reached:
                break
        outcomes.append(reached)
    return PretrainResult(controller, memory, cmem, outcomes)


def run_random_walk(config: TrainConfig, layout: Layout | None = None,
                    controller: ControllerAgent | None = None, *,
                    rng: np.random.Generator | None = None,
                    episodes: int | None = None) -> ReplayBuffer:
    """Fill a fresh agent memory with exploratory episodes, without learning.

    With a controller, the agent chases uniformly random goal cells, drawing a
    new one whenever the current one is reached or ``subgoal_steps`` pass;
    without one, actions are uniform.
    """
    layout = layout or build_layout(config)
    rng = rng or _Streams(config.seed).walk
    memory = ReplayBuffer(Transition, config.memory_capacity)
    cells = layout.free_cells
    width = config.width
    n = config.walk_episodes if episodes is None else episodes
    for _ in range(n):
        state = reset(layout, rng, max_steps=config.max_steps)
        s = state.agent
        goal, rows, budget = None, None, 0
        while not state.done:
            if controller is None:
                a = int(rng.integers(4))
            else:
                if goal is None or budget == 0:
                    goal = cells[int(rng.integers(len(cells)))]
                    rows = controller.net.gates(goal)
                    budget = config.subgoal_steps
                a = _act(controller.net, s.y * width + s.x, rows, controller.eps.value, rng)
                budget -= 1
            state, out = step(state, a)
            memory.append(s, a, out.reward, out.next_obs, state.success)
            s = out.next_obs
            if s == goal:
                goal = None
    return memory


# ------------------------------------------------------------ unified loop

class _SubgoalCache:
    """Per-subgoal gate rows, goal points and attainment tests for the hot loop."""

    def __init__(self, net: StateGoalNet, gset: SubgoalSet, indexer: StateIndexer):
        self.net, self.gset, self.indexer = net, gset, indexer
        self.refresh()

    def refresh(self) -> None:
        w = self.gset.grid_shape[0]
        self.rows = [self.net.gates(g.point) for g in self.gset]
        self.points = [g.point for g in self.gset]
        # anomaly: exact cell index; centroid: -(cluster + 1)
        self.target = [g.cell.y * w + g.cell.x if g.kind is SubgoalKind.ANOMALY
                       else -(g.cluster + 1) for g in self.gset]

    def attained(self, g: int, cell_idx: int) -> bool:
        t = self.target[g]
        if t >= 0:
            return cell_idx == t
        return self.indexer.cluster_of[cell_idx] == -t - 1


def _initial_discovery(config: TrainConfig, layout: Layout, streams: _Streams,
                       controller: ControllerAgent | None):
    memory = run_random_walk(config, layout,
                             controller if config.walk_policy == "controller" else None,
                             rng=streams.walk)
    gset = SubgoalSet((config.width, config.height), config.merge_radius)
    kstate = KMeansState(config.k)
    gset, kstate, memory = discover(memory, _detector(config), kstate, gset,
                                    max_iters=config.kmeans_max_iters, seed=streams.kmeans)
    if not kstate.ready:
        raise ContractViolation("discovery walk produced fewer states than clusters")
    return gset, kstate, memory


def run_unified(config: TrainConfig, *, progress=None) -> RunArtifacts:
    """Pretrain, walk, discover, then learn both levels jointly for ``episodes`` episodes."""
    t0 = time.perf_counter()
    streams = _Streams(config.seed)
    layout = build_layout(config)
    pre = run_intrinsic_pretraining(config, layout, rng=streams.pretrain)
    controller = pre.controller
    t_pre = time.perf_counter()
    gset, kstate, memory = _initial_discovery(config, layout, streams, controller)
    t_disc = time.perf_counter()

    net = controller.net
    width = config.width
    detector = _detector(config)
    meta = MetaControllerAgent(MetaQTable(len(gset)), _eps(config, 2), config.alpha2,
                               config.gamma, config.meta_discount_mode)
    cmem = pre.controller_memory
    mmem = ReplayBuffer(MetaTransition, config.meta_capacity)
    indexer = StateIndexer(gset, kstate)
    cache = _SubgoalCache(net, gset, indexer)
    rng = streams.train
    art = RunArtifacts(config, layout, controller=controller, meta=meta, gset=gset,
                       kstate=kstate, memory=memory, controller_memory=cmem, meta_memory=mmem)
    gamma, horizon = config.gamma, config.subgoal_steps
    since_fit = 0

    for episode in range(config.episodes):
        eps1, eps2 = controller.eps.value, meta.eps.value
        state = reset(layout, rng, max_steps=config.max_steps)
        s = state.agent
        ep_ret, attempts, hits = 0.0, 0, 0
        while not state.done:
            s0 = s
            g = epsilon_greedy(meta.table.values[indexer.table[s0.y * width + s0.x]], eps2, rng)
            rows, gp = cache.rows[g], cache.points[g]
            seg_G, disc, seg_steps, reached = 0.0, 1.0, 0, False
            attempts += 1
            while True:
                a = _act(net, s.y * width + s.x, rows, eps1, rng)
                state, out = step(state, a)
                s1, r = out.next_obs, out.reward
                idx1 = s1.y * width + s1.x
                reached = cache.attained(g, idx1)
                cmem.append(s, g, a, 1.0 if reached else min(r, -1.0), s1, reached, gp,
                            state.success)
                if r >= detector.positive_threshold or (
                        detector.feature_distance_threshold is not None
                        and detector.is_anomalous(Transition(s, a, r, s1, state.success))):
                    if gset.add_anomaly(s1) is not None:
                        log.info("episode %d: new anomaly subgoal at %s", episode, tuple(s1))
                        meta.table.grow(len(gset))
                        indexer.refresh(gset, kstate)
                        cache.refresh()
                else:
                    memory.append(s, a, r, s1, state.success)
                seg_G += disc * r
                disc *= gamma
                seg_steps += 1
                ep_ret += r
                controller.update_from_buffer(cmem, config.batch1, rng)
                if len(mmem):
                    meta.update_from_buffer(mmem, config.batch2, rng, indexer)
                s = s1
                if reached or state.done or seg_steps >= horizon:
                    break
            hits += reached
            mmem.append(s0, g, seg_G, s, state.success, seg_steps)
            since_fit += seg_steps
            if since_fit >= config.discovery_interval:
                since_fit = 0
                kstate = kmeans_fit(memory_points(memory, gset.grid_shape), kstate,
                                    config.kmeans_max_iters, seed=streams.kmeans)
                gset.set_centroids(kstate.centroids)
                indexer.refresh(gset, kstate)
                cache.refresh()
        art.env_steps += state.step_count
        art.records.append(EpisodeRecord(episode, ep_ret, state.step_count, state.success, eps1,
                                         eps2, len(gset), state.has_key, attempts, hits))
        controller.eps.step()
        meta.eps.step()
        if config.eval_interval and (episode + 1) % config.eval_interval == 0:
            art.kstate = kstate
            res = evaluate(art, config.eval_episodes, streams.eval_rng(episode + 1),
                           episode=episode + 1)
            art.evals.append(res)
            if progress:
                progress(res)
    art.kstate = kstate
    t_train = time.perf_counter()
    if config.final_eval_episodes:
        art.final_eval = evaluate(art, config.final_eval_episodes,
                                  streams.eval_rng(config.episodes + 1), episode=config.episodes)
    art.timings = {"pretrain_s": t_pre - t0, "discovery_s": t_disc - t_pre,
                   "train_s": t_train - t_disc, "eval_s": time.perf_counter() - t_train}
    return art


# ------------------------------------------------------------ baseline

def run_baseline(config: TrainConfig, *, progress=None) -> RunArtifacts:
    """Flat SARSA on the same network and the same episode budget."""
    t0 = time.perf_counter()
    streams = _Streams(config.seed)
    layout = build_layout(config)
    if not Variant(config.variant).four_room:
        raise ContractViolation("the flat baseline runs on the four-room tasks")
    baseline = SarsaBaseline(build_net(config, streams.init), _eps(config, 1), config.alpha1,
                             config.gamma)
    net = baseline.net
    walls = wall_mask(layout)
    cells = layout.free_cells
    rng = streams.baseline
    art = RunArtifacts(config, layout, baseline=baseline)
    actions = np.zeros(config.max_steps, dtype=np.int64)
    key, goal = layout.key_pos, layout.reward_pos
    completion = Variant(config.variant).completion_reward
    for episode in range(config.episodes):
        eps = baseline.eps.value
        start = cells[int(rng.integers(len(cells)))]
        u = rng.random(config.max_steps + 1)
        ra = rng.integers(0, net.n_actions, config.max_steps + 1)
        ret, steps, success, got_key = kernels.sarsa_episode(
            net.w1, net.w2, net.codes, baseline.rows, net.k, walls, start.x, start.y, key.x,
            key.y, goal.x, goal.y, completion, config.max_steps, eps, u, ra, config.gamma,
            config.alpha1, actions)
        art.env_steps += int(steps)
        art.records.append(EpisodeRecord(episode, float(ret), int(steps), bool(success), eps, 0.0,
                                         0, bool(got_key)))
        baseline.eps.step()
        if config.eval_interval and (episode + 1) % config.eval_interval == 0:
            res = evaluate(art, config.eval_episodes, streams.eval_rng(episode + 1),
                           episode=episode + 1)
            art.evals.append(res)
            if progress:
                progress(res)
    t_train = time.perf_counter()
    if config.final_eval_episodes:
        art.final_eval = evaluate(art, config.final_eval_episodes,
                                  streams.eval_rng(config.episodes + 1), episode=config.episodes)
    art.timings = {"train_s": t_train - t0, "eval_s": time.perf_counter() - t_train}
    return art


# ------------------------------------------------------------ evaluation

def hierarchical_rollout(art: RunArtifacts, state: EnvState, *, epsilon1: float = 0.0,
                         epsilon2: float = 0.0, rng=None, trace: list | None = None):
    """Run the two-level policy without learning until the episode ends.

    Returns ``(final_state, undiscounted_return, discounted_return)``.
    """
    config, net, gset = art.config, art.controller.net, art.gset
    indexer = StateIndexer(gset, art.kstate)
    cache = _SubgoalCache(net, gset, indexer)
    width = config.width
    values = art.meta.table.values
    ret, dret, disc = 0.0, 0.0, 1.0
    s = state.agent
    while not state.done:
        g = epsilon_greedy(values[indexer.table[s.y * width + s.x]][: len(gset)], epsilon2, rng)
        rows = cache.rows[g]
        for _ in range(config.subgoal_steps):
            a = _act(net, s.y * width + s.x, rows, epsilon1, rng)
            state, out = step(state, a)
            if trace is not None:
                trace.append((s, g, a, out.reward, out.next_obs))
            ret += out.reward
            dret += disc * out.reward
            disc *= config.gamma
            s = out.next_obs
            if cache.attained(g, s.y * width + s.x) or state.done:
                break
    return state, ret, dret


def flat_rollout(art: RunArtifacts, state: EnvState, *, epsilon: float = 0.0, rng=None):
    baseline = art.baseline
    ret, dret, disc = 0.0, 0.0, 1.0
    while not state.done:
        a = baseline.act(state.agent, rng, epsilon)
        state, out = step(state, a)
        ret += out.reward
        dret += disc * out.reward
        disc *= art.config.gamma
    return state, ret, dret


def evaluate(art: RunArtifacts, episodes: int, seed=0, *, episode: int = -1,
             rollout=None) -> EvalResult:
    """Greedy episodes from uniformly random starts; no learning, no memory writes.

    ``rollout(art, state, rng=...)`` replaces the artifact's own policy when given.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rollout is None:
        rollout = flat_rollout if art.kind == "baseline" else hierarchical_rollout
    succ = keys = 0
    rets = []
    for _ in range(episodes):
        state = reset(art.layout, rng, max_steps=art.config.max_steps)
        state, ret, _ = rollout(art, state, rng=rng)
        succ += state.success
        keys += state.has_key
        rets.append(ret)
    rets = np.asarray(rets) if rets else np.zeros(1)
    n = max(episodes, 1)
    return EvalResult(episode, succ / n, keys / n, float(rets.mean()), float(rets.max()),
                      episodes)


def cluster_value_diagnostic(art: RunArtifacts, samples_per_cluster: int = 50,
                             seed=0, *, rollout=None) -> dict:
    """Monte-Carlo state values of the greedy hierarchical policy, grouped by cluster.

    Every sampled cell (not holding an anomaly subgoal) starts a greedy episode
    without the key; its value is the discounted return. Reports per-cluster
    mean and standard deviation, and for each pair of clusters that share a
    border the gap between their means. ``rollout`` works as in :func:`evaluate`.
    """
    rollout = rollout or hierarchical_rollout
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layout, config = art.layout, art.config
    indexer = StateIndexer(art.gset, art.kstate)
    width = config.width
    anomaly_cells = {g.cell for g in art.gset.anomalies}
    by_cluster: dict[int, list[GridPos]] = {}
    for c in layout.free_cells:
        if c not in anomaly_cells:
            by_cluster.setdefault(int(indexer.cluster_of[c.y * width + c.x]), []).append(c)
    stats = {}
    for cl, cells in sorted(by_cluster.items()):
        take = min(samples_per_cluster, len(cells))
        picks = rng.choice(len(cells), size=take, replace=False)
        vals = []
        for i in picks:
            state = reset(layout, None, start=cells[int(i)], max_steps=config.max_steps)
            vals.append(rollout(art, state, rng=rng)[2])
        stats[cl] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": take,
                     "cells": len(cells)}
    adjacent = set()
    for c in layout.free_cells:
        a = int(indexer.cluster_of[c.y * width + c.x])
        for dx, dy in ((1, 0), (0, 1)):
            n = GridPos(c.x + dx, c.y + dy)
            if layout.is_open(n):
                b = int(indexer.cluster_of[n.y * width + n.x])
                if a != b:
                    adjacent.add((min(a, b), max(a, b)))
    gaps = {f"{a}-{b}": abs(stats[a]["mean"] - stats[b]["mean"])
            for a, b in sorted(adjacent) if a in stats and b in stats}
    return {"format_version": FORMAT_VERSION, "clusters": stats, "adjacent_gaps": gaps}


# ------------------------------------------------------------ artifacts

def save_artifacts(art: RunArtifacts, out) -> list[Path]:
    """Write config, layout, metrics and checkpoints of a run into ``out``; returns the files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    def put_json(name, payload):
        p = out / name
        p.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        files.append(p)

    put_json("config.json", art.config.to_dict())
    put_json("layout.json", art.layout.to_dict())
    write_metrics(art.records, out / "metrics.csv")
    files.append(out / "metrics.csv")
    if art.evals:
        write_evals(art.evals, out / "eval.csv")
        files.append(out / "eval.csv")
    if art.final_eval is not None:
        put_json("final_eval.json", {"format_version": FORMAT_VERSION, **asdict(art.final_eval)})
    if art.baseline is not None:
        art.baseline.net.save(out / "baseline.bin")
        files += [out / "baseline.bin", out / "baseline.bin.json"]
    if art.controller is not None:
        art.controller.net.save(out / "controller.bin")
        files += [out / "controller.bin", out / "controller.bin.json"]
    if art.meta is not None:
        art.meta.table.save(out / "meta.bin")
        files += [out / "meta.bin", out / "meta.bin.json"]
    if art.gset is not None:
        art.gset.save(out / "subgoals.json")
        files.append(out / "subgoals.json")
    return files


def kstate_from_subgoals(gset: SubgoalSet, k: int | None = None) -> KMeansState:
    """Rebuild the clustering state from the centroid subgoals of a saved set."""
    cents = sorted(gset.centroids, key=lambda g: g.cluster)
    if not cents:
        return KMeansState(k or 0)
    return KMeansState(len(cents), np.array([g.point for g in cents], dtype=np.float64))


def load_artifacts(path) -> RunArtifacts:
    """Inverse of :func:`save_artifacts` (policies and subgoals; metrics are re-read)."""
    path = Path(path)
    config = TrainConfig.from_dict(json.loads((path / "config.json").read_text()))
    layout = Layout.from_dict(json.loads((path / "layout.json").read_text()))
    art = RunArtifacts(config, layout)
    if (path / "metrics.csv").exists():
        art.records = read_metrics(path / "metrics.csv")
    if (path / "eval.csv").exists():
        art.evals = read_evals(path / "eval.csv")
    if (path / "final_eval.json").exists():
        fe = json.loads((path / "final_eval.json").read_text())
        fe.pop("format_version", None)
        art.final_eval = EvalResult(**fe)
    if (path / "baseline.bin").exists():
        art.baseline = SarsaBaseline(StateGoalNet.load(path / "baseline.bin"), _eps(config, 1),
                                     config.alpha1, config.gamma)
        return art
    if not (path / "controller.bin").exists():
        raise FileNotFoundError(f"{path}: no controller.bin or baseline.bin checkpoint")
    art.controller = ControllerAgent(StateGoalNet.load(path / "controller.bin"), _eps(config, 1),
                                     config.alpha1, config.gamma)
    art.meta = MetaControllerAgent(MetaQTable.load(path / "meta.bin"), _eps(config, 2),
                                   config.alpha2, config.gamma, config.meta_discount_mode)
    art.gset = SubgoalSet.load(path / "subgoals.json")
    art.kstate = kstate_from_subgoals(art.gset, config.k)
    return art
