"""Bounded FIFO experience memories backed by column arrays.

The agent memory, controller memory and meta-controller memory all use
:class:`ReplayBuffer`; only the entry type differs. Entries go in and come out
as small dataclasses, while the training kernels read the underlying columns
directly through :meth:`ReplayBuffer.sample_indices` and :meth:`ReplayBuffer.column`.
"""
from __future__ import annotations

import json
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, ClassVar, Generic, Iterator, TypeVar

import numpy as np

from .env import GridPos

FORMAT_VERSION = 1


@dataclass(frozen=True, slots=True)
class Transition:
    s: GridPos
    a: int
    r: float
    s_next: GridPos
    terminal: bool

    COLUMNS: ClassVar[dict] = {
        "s": (np.int64, 2), "a": (np.int64, 0), "r": (np.float64, 0),
        "s_next": (np.int64, 2), "terminal": (np.bool_, 0),
    }

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError(f"non-finite reward {self.r}")


@dataclass(frozen=True, slots=True)
class IntrinsicTransition:
    """Controller experience. ``g_point`` is the goal location fed to the network."""
    s: GridPos
    g: int
    a: int
    r_tilde: float
    s_next: GridPos
    attained: bool
    g_point: tuple[float, float] = (0.0, 0.0)
    terminal: bool = False

    COLUMNS: ClassVar[dict] = {
        "s": (np.int64, 2), "g": (np.int64, 0), "a": (np.int64, 0),
        "r_tilde": (np.float64, 0), "s_next": (np.int64, 2), "attained": (np.bool_, 0),
        "g_point": (np.float64, 2), "terminal": (np.bool_, 0),
    }

    def __post_init__(self):
        if self.attained != (self.r_tilde == 1.0):
            raise ValueError("attained must hold exactly when r_tilde == +1")


@dataclass(frozen=True, slots=True)
class MetaTransition:
    """One controller episode seen from the meta-controller.

    ``G`` is the discounted external return of the segment and ``steps`` its
    length in primitive steps.
    """
    s0: GridPos
    g: int
    G: float
    s_end: GridPos
    end_terminal: bool
    steps: int = 1

    COLUMNS: ClassVar[dict] = {
        "s0": (np.int64, 2), "g": (np.int64, 0), "G": (np.float64, 0),
        "s_end": (np.int64, 2), "end_terminal": (np.bool_, 0), "steps": (np.int64, 0),
    }


ENTRY_TYPES = {t.__name__: t for t in (Transition, IntrinsicTransition, MetaTransition)}
_POS_FIELDS = {"s", "s_next", "s0", "s_end"}

E = TypeVar("E", Transition, IntrinsicTransition, MetaTransition)


class ReplayBuffer(Generic[E]):
    """Ring buffer of at most ``capacity`` entries; pushing past it drops the oldest."""

    def __init__(self, entry_type: type[E], capacity: int):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.entry_type = entry_type
        self.capacity = int(capacity)
        self._names = [f.name for f in fields(entry_type)]
        self._cols = {
            name: np.zeros((self.capacity, width) if width else self.capacity, dtype=dtype)
            for name, (dtype, width) in entry_type.COLUMNS.items()
        }
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __bool__(self) -> bool:
        return self._size > 0

    def _phys(self, i):
        return (self._start + i) % self.capacity

    def append(self, *values) -> None:
        """Push an entry given as positional field values (no object built)."""
        if self._size < self.capacity:
            slot = self._phys(self._size)
            self._size += 1
        else:
            slot = self._start
            self._start = (self._start + 1) % self.capacity
        cols = self._cols
        for name, v in zip(self._names, values):
            cols[name][slot] = v

    def push(self, entry: E) -> None:
        if not isinstance(entry, self.entry_type):
            raise TypeError(f"expected {self.entry_type.__name__}, got {type(entry).__name__}")
        self.append(*astuple(entry))

    def _entry(self, slot: int) -> E:
        vals = []
        for name in self._names:
            v = self._cols[name][slot]
            if name in _POS_FIELDS:
                v = GridPos(int(v[0]), int(v[1]))
            elif name == "g_point":
                v = (float(v[0]), float(v[1]))
            else:
                v = v.item()
            vals.append(v)
        return self.entry_type(*vals)

    def __getitem__(self, i: int) -> E:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        return self._entry(self._phys(i % self._size))

    def __iter__(self) -> Iterator[E]:
        for i in range(self._size):
            yield self._entry(self._phys(i))

    def order(self) -> np.ndarray:
        """Physical slots in insertion order."""
        return (self._start + np.arange(self._size)) % self.capacity

    def column(self, name: str, slots: np.ndarray | None = None) -> np.ndarray:
        """Copy of one column, in insertion order unless ``slots`` is given."""
        col = self._cols[name]
        return col[self.order() if slots is None else slots]

    def raw(self, name: str) -> np.ndarray:
        """The physical column array itself (no copy); index it with slots."""
        return self._cols[name]

    def sample_indices(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Physical slots of ``size`` uniform draws with replacement."""
        if self._size == 0:
            return np.empty(0, dtype=np.int64)
        return self._phys(rng.integers(0, self._size, size))

    def sample_minibatch(self, size: int, seed) -> list[E]:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return [self._entry(int(s)) for s in self.sample_indices(size, rng)]

    def _keep(self, keep: np.ndarray) -> int:
        order = self.order()
        survivors = order[keep]
        for name, col in self._cols.items():
            col[: len(survivors)] = col[survivors]
        removed = self._size - len(survivors)
        self._start, self._size = 0, len(survivors)
        return removed

    def remove_where(self, mask: np.ndarray) -> int:
        """Drop entries whose insertion-order position is True in ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self._size,):
            raise ValueError("mask length must equal the buffer size")
        if not mask.any():
            return 0
        return self._keep(~mask)

    def remove_if(self, predicate: Callable[[E], bool]) -> int:
        return self.remove_where(np.fromiter((bool(predicate(e)) for e in self), bool, self._size))

    def clear(self) -> None:
        self._start = self._size = 0

    def copy(self) -> ReplayBuffer[E]:
        other = ReplayBuffer(self.entry_type, self.capacity)
        for name, col in self._cols.items():
            other._cols[name][:] = col
        other._start, other._size = self._start, self._size
        return other

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"format_version": FORMAT_VERSION,
                                 "entry_type": self.entry_type.__name__,
                                 "capacity": self.capacity}) + "\n")
            cols = {name: self.column(name) for name in self._names}
            for i in range(self._size):
                row = {}
                for name in self._names:
                    v = cols[name][i]
                    row[name] = v.tolist() if isinstance(v, np.ndarray) else v.item()
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load_jsonl(cls, path, capacity: int | None = None) -> ReplayBuffer:
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported format_version {header.get('format_version')}")
            etype = ENTRY_TYPES[header["entry_type"]]
            rows = [json.loads(line) for line in fh if line.strip()]
        buf = cls(etype, capacity or max(header.get("capacity", len(rows)), len(rows), 1))
        names = [f.name for f in fields(etype)]
        for row in rows:
            buf.append(*(row[n] for n in names))
        return buf


def push(buffer: ReplayBuffer, entry) -> None:
    buffer.push(entry)


def sample_minibatch(buffer: ReplayBuffer, size: int, seed) -> list:
    """``size`` uniform draws with replacement; empty list for an empty buffer."""
    return buffer.sample_minibatch(size, seed)


def remove_if(buffer: ReplayBuffer, predicate) -> int:
    return buffer.remove_if(predicate)


def dump_jsonl(buffer: ReplayBuffer, path: str | Path) -> None:
    buffer.dump_jsonl(path)


def load_jsonl(path: str | Path, capacity: int | None = None) -> ReplayBuffer:
    return ReplayBuffer.load_jsonl(path, capacity)
