"""Controller, meta-controller, intrinsic critic and the flat SARSA baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .approx import MetaQTable, StateGoalNet
from .discovery import KMeansState, StateIndexer, SubgoalSet
from .env import GridPos
from .errors import ContractViolation
from .memory import IntrinsicTransition, ReplayBuffer


@dataclass
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps`` calls to :meth:`step`."""
    start: float = 0.2
    end: float = 0.2
    decay_steps: int = 1
    count: int = 0

    def __post_init__(self):
        for name in ("start", "end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"epsilon {name}={v} outside [0, 1]")
        if self.end > self.start:
            raise ValueError("epsilon schedule must not increase")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")

    def value_at(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.end
        frac = max(step, 0) / self.decay_steps
        return self.start + (self.end - self.start) * frac

    @property
    def value(self) -> float:
        return self.value_at(self.count)

    def step(self) -> float:
        self.count += 1
        return self.value


def intrinsic_reward(s_next, attained: bool, r: float, terminal: bool = False) -> float:
    """+1 for reaching the subgoal, otherwise the external reward capped at -1."""
    return 1.0 if attained else min(r, -1.0)


def epsilon_greedy(values: Sequence[float], epsilon: float, seed) -> int:
    """Greedy index (ties to the lowest) with probability 1 - epsilon, else uniform."""
    vals = np.asarray(values)
    if vals.size == 0:
        raise ContractViolation("epsilon_greedy over an empty value list")
    if epsilon > 0.0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        if rng.random() < epsilon:
            return int(rng.integers(vals.size))
    return int(np.argmax(vals))


@dataclass
class ControllerAgent:
    net: StateGoalNet
    eps: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    alpha: float = 0.001
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha={self.alpha} must be positive")

    def act(self, s: GridPos, g, rng, epsilon: float | None = None, rows=None) -> int:
        eps = self.eps.value if epsilon is None else epsilon
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(self.net.n_actions))
        return int(np.argmax(self.net.q(s, g, rows)))

    def update_from_buffer(self, buffer: ReplayBuffer, size: int, rng) -> np.ndarray:
        """Sample ``size`` controller transitions, apply the TD updates in order, return the slots."""
        slots = buffer.sample_indices(size, rng)
        if len(slots) == 0:
            return np.empty(0)
        net = self.net
        kernels.td_slots(
            net.w1, net.w2, net.codes, net.grid_shape[0], buffer.raw("s"), buffer.raw("s_next"),
            buffer.raw("g_point"), buffer.raw("a"), buffer.raw("r_tilde"), buffer.raw("attained"),
            buffer.raw("terminal"), slots, self.gamma, self.alpha, net.k,
            net.goal_coder.centers, float(net.goal_coder.sigma), net.gate_threshold)
        return slots


def controller_td_update(agent: ControllerAgent, batch: Sequence[IntrinsicTransition]) -> np.ndarray:
    """Q-learning step for each entry in turn; attained or terminal entries do not bootstrap."""
    if not batch:
        return np.empty(0)
    net = agent.net
    w = net.grid_shape[0]
    s = np.array([t.s for t in batch], dtype=np.int64)
    sn = np.array([t.s_next for t in batch], dtype=np.int64)
    return kernels.td_batch(
        net.w1, net.w2, net.codes, s[:, 1] * w + s[:, 0], sn[:, 1] * w + sn[:, 0],
        np.array([t.g_point for t in batch], dtype=np.float64),
        np.array([t.a for t in batch], dtype=np.int64),
        np.array([t.r_tilde for t in batch], dtype=np.float64),
        np.array([not (t.attained or t.terminal) for t in batch]),
        agent.gamma, agent.alpha, net.k, net.goal_coder.centers,
        float(net.goal_coder.sigma), net.gate_threshold)


@dataclass
class MetaControllerAgent:
    table: MetaQTable = field(default_factory=MetaQTable)
    eps: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    alpha: float = 0.001
    gamma: float = 0.99
    discount_mode: str = "power"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma={self.gamma} outside [0, 1]")
        if self.discount_mode not in ("power", "plain"):
            raise ValueError(f"discount_mode={self.discount_mode!r} not in ('power', 'plain')")

    def update_from_buffer(self, buffer: ReplayBuffer, size: int, rng,
                           indexer: StateIndexer) -> np.ndarray:
        """Sample ``size`` meta transitions and apply the tabular TD updates in order."""
        slots = buffer.sample_indices(size, rng)
        if len(slots):
            kernels.meta_slots(
                self.table.values, indexer.table, indexer.gset.grid_shape[0], buffer.raw("s0"),
                buffer.raw("g"), buffer.raw("G"), buffer.raw("s_end"), buffer.raw("end_terminal"),
                buffer.raw("steps"), slots, self.gamma, self.discount_mode == "power", self.alpha)
        return slots


def meta_select_subgoal(agent: MetaControllerAgent, s: GridPos, gset: SubgoalSet,
                        kstate: KMeansState, seed, *, indexer: StateIndexer | None = None,
                        epsilon: float | None = None) -> int:
    """Epsilon-greedy subgoal choice from the table row of ``s``'s meta state."""
    if len(gset) == 0:
        raise ContractViolation("no subgoals to choose from")
    agent.table.grow(len(gset))
    indexer = indexer or StateIndexer(gset, kstate)
    row = agent.table.row(indexer(s))
    eps = agent.eps.value if epsilon is None else epsilon
    return epsilon_greedy(row[: len(gset)], eps, seed)


@dataclass
class SarsaBaseline:
    """Flat on-policy learner on the controller's network with a fixed goal token.

    The token opens the gate rows around the middle of the grid, so the
    network has exactly the controller's parameter count.
    """
    net: StateGoalNet
    eps: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    alpha: float = 0.001
    gamma: float = 0.99
    token: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        self.rows = self.net.gates(self.token)

    def q(self, s: GridPos) -> np.ndarray:
        return self.net.q(s, self.token, self.rows)

    def act(self, s: GridPos, rng, epsilon: float | None = None) -> int:
        eps = self.eps.value if epsilon is None else epsilon
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(self.net.n_actions))
        return int(np.argmax(self.q(s)))


def sarsa_update(baseline: SarsaBaseline, s: GridPos, a: int, r: float, s_next: GridPos,
                 a_next: int, terminal: bool, alpha: float | None = None,
                 gamma: float | None = None) -> float:
    """delta = r + gamma q(s', a') - q(s, a) (no bootstrap at terminal); returns delta."""
    net = baseline.net
    return kernels.sarsa(
        net.w1, net.w2, net.codes[net.cell_index(s)], net.codes[net.cell_index(s_next)],
        baseline.rows, int(a), int(a_next), float(r), bool(terminal),
        baseline.gamma if gamma is None else gamma, baseline.alpha if alpha is None else alpha,
        net.k)
