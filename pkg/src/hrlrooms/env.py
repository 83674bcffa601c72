"""Deterministic gridworlds: a single room with a moving goal, and four rooms
with a key and either a car or a lock.

Coordinates are ``(x, y)`` = (column, row), origin at the top-left corner.
North decreases ``y``. The outer boundary is implicit: moving off the grid is a
wall bump, same as moving into an interior wall cell.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation

FORMAT_VERSION = 1

KEY_REWARD = 10.0
LOCK_REWARD = 40.0
CAR_REWARD = 100.0
GOAL_REWARD = 1.0
BUMP_REWARD = -2.0
DEFAULT_MAX_STEPS = 200


class GridPos(NamedTuple):
    x: int
    y: int


class Action(IntEnum):
    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3


# (dx, dy) per action, indexed by Action value
ACTION_DELTAS = ((0, -1), (0, 1), (1, 0), (-1, 0))


class Variant(str, Enum):
    SINGLE_ROOM_DYNAMIC_GOAL = "single_room_dynamic_goal"
    FOUR_ROOM_KEY_CAR = "four_room_key_car"
    FOUR_ROOM_KEY_LOCK = "four_room_key_lock"

    @property
    def four_room(self) -> bool:
        return self is not Variant.SINGLE_ROOM_DYNAMIC_GOAL

    @property
    def completion_reward(self) -> float:
        return {
            Variant.SINGLE_ROOM_DYNAMIC_GOAL: GOAL_REWARD,
            Variant.FOUR_ROOM_KEY_CAR: CAR_REWARD,
            Variant.FOUR_ROOM_KEY_LOCK: LOCK_REWARD,
        }[self]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    # accept any 64-bit integer, including negatives
    return np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    walls: frozenset[GridPos]
    doorways: frozenset[GridPos]
    key_pos: GridPos | None
    reward_pos: GridPos
    variant: Variant
    placement: str = "hard"
    _free: tuple[GridPos, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        free = tuple(
            GridPos(x, y)
            for y in range(self.height)
            for x in range(self.width)
            if GridPos(x, y) not in self.walls
        )
        object.__setattr__(self, "_free", free)

    @property
    def free_cells(self) -> tuple[GridPos, ...]:
        """Non-wall cells in row-major order."""
        return self._free

    def in_bounds(self, pos: GridPos) -> bool:
        return 0 <= pos.x < self.width and 0 <= pos.y < self.height

    def is_open(self, pos: GridPos) -> bool:
        return self.in_bounds(pos) and pos not in self.walls

    def normalize(self, pos: GridPos) -> tuple[float, float]:
        """Map a cell to the unit square, corners to corners."""
        return (pos.x / max(self.width - 1, 1), pos.y / max(self.height - 1, 1))

    def rooms(self) -> list[list[GridPos]]:
        """Connected regions of open cells once doorways are closed off.

        Ordered by their top-left-most cell, so for the four-room layouts the
        order is top-left, top-right, bottom-left, bottom-right.
        """
        blocked = set(self.walls) | set(self.doorways)
        seen: set[GridPos] = set()
        rooms = []
        for cell in self._free:
            if cell in blocked or cell in seen:
                continue
            comp = []
            queue = deque([cell])
            seen.add(cell)
            while queue:
                c = queue.popleft()
                comp.append(c)
                for dx, dy in ACTION_DELTAS:
                    n = GridPos(c.x + dx, c.y + dy)
                    if self.in_bounds(n) and n not in blocked and n not in seen:
                        seen.add(n)
                        queue.append(n)
            rooms.append(sorted(comp, key=lambda p: (p.y, p.x)))
        return rooms

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "width": self.width,
            "height": self.height,
            "walls": sorted([list(p) for p in self.walls]),
            "doorways": sorted([list(p) for p in self.doorways]),
            "key_pos": None if self.key_pos is None else list(self.key_pos),
            "reward_pos": list(self.reward_pos),
            "variant": self.variant.value,
            "placement": self.placement,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Layout:
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported layout format_version {d['format_version']}")
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            walls=frozenset(GridPos(*p) for p in d["walls"]),
            doorways=frozenset(GridPos(*p) for p in d["doorways"]),
            key_pos=None if d["key_pos"] is None else GridPos(*d["key_pos"]),
            reward_pos=GridPos(*d["reward_pos"]),
            variant=Variant(d["variant"]),
            placement=d.get("placement", "hard"),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> Layout:
        p = Path(str(text_or_path))
        text = p.read_text() if p.suffix == ".json" and p.exists() else str(text_or_path)
        return cls.from_dict(json.loads(text))


def generate_layout(variant: Variant | str, seed: int, *, width: int | None = None,
                    height: int | None = None, placement: str = "hard") -> Layout:
    """Build a layout; identical arguments always give an identical layout.

    Four-room grids get one wall column and one wall row through the middle,
    each half of which carries a single doorway at a random offset. Key and
    reward cells are drawn uniformly from the open, non-doorway cells.
    ``placement="easy"`` pins the key to the top-left corner and the reward to
    the bottom-right one (four-room variants only).
    """
    variant = Variant(variant)
    if placement not in ("hard", "easy"):
        raise ValueError(f"placement must be 'hard' or 'easy', got {placement!r}")
    default = 20 if variant.four_room else 10
    width = default if width is None else int(width)
    height = default if height is None else int(height)
    rng = _rng(seed)

    walls: set[GridPos] = set()
    doorways: set[GridPos] = set()
    if variant.four_room:
        if width < 5 or height < 5:
            raise ValueError("four-room layouts need at least 5x5 cells")
        wx, wy = width // 2, height // 2
        walls |= {GridPos(wx, y) for y in range(height)}
        walls |= {GridPos(x, wy) for x in range(width)}
        segments = [
            [GridPos(wx, y) for y in range(0, wy)],
            [GridPos(wx, y) for y in range(wy + 1, height)],
            [GridPos(x, wy) for x in range(0, wx)],
            [GridPos(x, wy) for x in range(wx + 1, width)],
        ]
        for seg in segments:
            door = seg[int(rng.integers(len(seg)))]
            walls.discard(door)
            doorways.add(door)

    eligible = [
        GridPos(x, y)
        for y in range(height)
        for x in range(width)
        if GridPos(x, y) not in walls and GridPos(x, y) not in doorways
    ]
    if variant.four_room:
        if placement == "easy":
            key, reward = GridPos(0, 0), GridPos(width - 1, height - 1)
        else:
            i, j = rng.choice(len(eligible), size=2, replace=False)
            key, reward = eligible[int(i)], eligible[int(j)]
    else:
        key = None
        reward = eligible[int(rng.integers(len(eligible)))]
    return Layout(width, height, frozenset(walls), frozenset(doorways), key, reward,
                  variant, placement)


@dataclass(frozen=True, slots=True)
class EnvState:
    agent: GridPos
    has_key: bool
    layout: Layout
    step_count: int = 0
    done: bool = False
    success: bool = False
    max_steps: int = DEFAULT_MAX_STEPS


@dataclass(frozen=True, slots=True)
class StepOutcome:
    next_obs: GridPos
    reward: float
    terminal: bool


def reset(layout: Layout, seed, *, start: GridPos | None = None,
          max_steps: int = DEFAULT_MAX_STEPS) -> EnvState:
    """Place the agent on a uniformly random open cell (or on ``start``)."""
    if start is None:
        cells = layout.free_cells
        start = cells[int(_rng(seed).integers(len(cells)))]
    elif not layout.is_open(start):
        raise ContractViolation(f"start {tuple(start)} is not an open cell")
    start = GridPos(*start)
    # the moving-goal task ends immediately when the agent starts on the goal
    at_goal = (layout.variant is Variant.SINGLE_ROOM_DYNAMIC_GOAL
               and start == layout.reward_pos)
    return EnvState(start, False, layout, 0, at_goal, at_goal, max_steps)


def move(layout: Layout, pos: GridPos, action: int) -> GridPos | None:
    """Cell reached from ``pos`` by ``action``, or None when blocked."""
    dx, dy = ACTION_DELTAS[action]
    nxt = GridPos(pos.x + dx, pos.y + dy)
    if 0 <= nxt.x < layout.width and 0 <= nxt.y < layout.height and nxt not in layout.walls:
        return nxt
    return None


def step(state: EnvState, action: Action | int) -> tuple[EnvState, StepOutcome]:
    if state.done:
        raise ContractViolation("step() called on a terminal state")
    layout = state.layout
    nxt = move(layout, state.agent, int(action))
    has_key = state.has_key
    success = False
    if nxt is None:
        nxt, reward = state.agent, BUMP_REWARD
    else:
        reward = 0.0
        if layout.variant is Variant.SINGLE_ROOM_DYNAMIC_GOAL:
            if nxt == layout.reward_pos:
                reward, success = GOAL_REWARD, True
        elif nxt == layout.key_pos and not has_key:
            reward, has_key = KEY_REWARD, True
        elif nxt == layout.reward_pos and has_key:
            reward, success = layout.variant.completion_reward, True
    count = state.step_count + 1
    terminal = success or count >= state.max_steps
    new = EnvState(nxt, has_key, layout, count, terminal, success, state.max_steps)
    return new, StepOutcome(nxt, reward, terminal)


def observation(state: EnvState) -> GridPos:
    """What the agent sees: its own cell. Key possession stays hidden."""
    return state.agent


def dynamic_goal_env(seed, *, width: int = 10, height: int = 10, placement: str = "hard",
                     start: GridPos | None = None) -> tuple[Layout, GridPos]:
    """Single room with a per-episode goal cell.

    With ``placement="easy"`` the goal is a random open neighbour of ``start``.
    """
    if placement == "easy":
        if start is None:
            raise ContractViolation("easy placement needs the start cell")
        base = generate_layout(Variant.SINGLE_ROOM_DYNAMIC_GOAL, seed, width=width, height=height)
        nbrs = [n for a in Action if (n := move(base, GridPos(*start), a)) is not None]
        goal = nbrs[int(_rng(seed).integers(len(nbrs)))]
        layout = Layout(base.width, base.height, base.walls, base.doorways, None, goal,
                        base.variant, "easy")
        return layout, goal
    layout = generate_layout(Variant.SINGLE_ROOM_DYNAMIC_GOAL, seed, width=width, height=height)
    return layout, layout.reward_pos


def with_goal(layout: Layout, goal: GridPos) -> Layout:
    """Copy of a single-room layout with a different goal cell."""
    return Layout(layout.width, layout.height, layout.walls, layout.doorways, layout.key_pos,
                  GridPos(*goal), layout.variant, layout.placement)


def wall_mask(layout: Layout) -> np.ndarray:
    """Boolean (height, width) array, True on wall cells."""
    mask = np.zeros((layout.height, layout.width), dtype=np.bool_)
    for p in layout.walls:
        mask[p.y, p.x] = True
    return mask
