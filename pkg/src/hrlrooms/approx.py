"""Value-function approximators.

``StateGoalNet`` is the controller's q(s, g, a): Gaussian place codes for the
state and the goal, one block of hidden units per goal-gate row, k-winners-
take-all inside each block and a linear read-out. Only the rows whose goal
activation clears ``gate_threshold`` take part in a forward pass or an update.

``MetaQTable`` is the meta-controller's tabular Q(state index, subgoal index).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .env import GridPos
from .errors import ContractViolation
from .memory import MetaTransition, ReplayBuffer

FORMAT_VERSION = 1
NET_MAGIC = b"SGQN"
TABLE_MAGIC = b"MQTB"
_NET_HEADER = struct.Struct("<4sH11I3d")
_TABLE_HEADER = struct.Struct("<4sH2I")


@dataclass
class GaussianCoder:
    """Radial basis code over a regular ``nx`` x ``ny`` grid of centers in [0,1]^2.

    ``sigma`` defaults to half the spacing between neighbouring centers.
    """
    nx: int = 5
    ny: int = 5
    sigma: float | None = None
    centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("a coder needs at least 2 centers per axis")
        if self.sigma is None:
            self.sigma = 0.5 / (max(self.nx, self.ny) - 1)
        xs = np.linspace(0.0, 1.0, self.nx)
        ys = np.linspace(0.0, 1.0, self.ny)
        self.centers = np.array([(x, y) for y in ys for x in xs], dtype=np.float64)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def encode(self, point) -> np.ndarray:
        px, py = float(point[0]), float(point[1])
        return kernels.gaussian_code(px, py, self.centers, float(self.sigma))


def gaussian_encode(coder: GaussianCoder, pos) -> np.ndarray:
    """Activations exp(-|pos - c_i|^2 / (2 sigma^2)) for a point in the unit square."""
    px, py = float(pos[0]), float(pos[1])
    if not (0.0 <= px <= 1.0 and 0.0 <= py <= 1.0):
        raise ContractViolation(f"point {(px, py)} outside the unit square")
    return coder.encode((px, py))


def kwta(net_input: Sequence[float], k: int) -> np.ndarray:
    """Keep the k largest inputs; the rest get the suppression value."""
    net = np.asarray(net_input, dtype=np.float64)
    if k <= 0:
        raise ContractViolation(f"k must be positive, got {k}")
    if k > net.shape[-1]:
        raise ContractViolation(f"k={k} exceeds the {net.shape[-1]} inputs")
    won = kernels.kwta_mask(net, k)
    return np.where(won, net, kernels.SUPPRESSED)


class StateGoalNet:
    """Goal-gated, kWTA-sparsified q(s, g, a; w).

    Cells are mapped into the unit square using ``grid_shape = (width, height)``.
    Goals may be cells (``GridPos``) or points already in the unit square, which
    is how cluster centroids are passed in.
    """

    def __init__(self, grid_shape: tuple[int, int], *, state_coder: GaussianCoder | None = None,
                 goal_coder: GaussianCoder | None = None, n_hidden: int = 50, k: int = 5,
                 n_actions: int = 4, gate_threshold: float = 0.1, init_scale: float = 0.05,
                 seed=None):
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.state_coder = state_coder or GaussianCoder(5, 5)
        self.goal_coder = goal_coder or GaussianCoder(5, 5)
        if not 0 < k <= n_hidden:
            raise ContractViolation(f"k must be in [1, {n_hidden}], got {k}")
        self.k = int(k)
        self.gate_threshold = float(gate_threshold)
        rng = np.random.default_rng(seed)
        shape1 = (self.goal_coder.size, n_hidden, self.state_coder.size)
        shape2 = (self.goal_coder.size, n_actions, n_hidden)
        self.w1 = rng.uniform(-init_scale, init_scale, shape1)
        self.w2 = rng.uniform(-init_scale, init_scale, shape2)
        self._refresh_codes()

    def _refresh_codes(self):
        w, h = self.grid_shape
        self.codes = np.array([self.state_coder.encode(self.normalize(GridPos(x, y)))
                               for y in range(h) for x in range(w)])

    @property
    def n_rows(self) -> int:
        return self.w1.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_actions(self) -> int:
        return self.w2.shape[1]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.w2.size

    def normalize(self, pos: GridPos) -> tuple[float, float]:
        w, h = self.grid_shape
        return (pos[0] / max(w - 1, 1), pos[1] / max(h - 1, 1))

    def cell_index(self, pos: GridPos) -> int:
        return pos[1] * self.grid_shape[0] + pos[0]

    def goal_point(self, g) -> tuple[float, float]:
        if isinstance(g, GridPos):
            return self.normalize(g)
        return (float(g[0]), float(g[1]))

    def gates(self, g) -> np.ndarray:
        """Indices of the gate rows opened by goal ``g``."""
        gx, gy = self.goal_point(g)
        rows = kernels.gate_rows(gx, gy, self.goal_coder.centers, float(self.goal_coder.sigma),
                                 self.gate_threshold)
        if len(rows) == 0:
            raise ContractViolation(f"goal {(gx, gy)} opens no gate row")
        return rows

    def q(self, s: GridPos, g, rows: np.ndarray | None = None) -> np.ndarray:
        rows = self.gates(g) if rows is None else rows
        return kernels.q_values(self.w1, self.w2, self.codes[self.cell_index(s)], rows, self.k)

    def hidden(self, s: GridPos, g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, hidden activity per row, q) for one forward pass."""
        rows = self.gates(g)
        h = np.empty((len(rows), self.n_hidden))
        q = kernels.forward(self.w1, self.w2, self.codes[self.cell_index(s)], rows, self.k, h)
        return rows, h, q

    def clone(self) -> StateGoalNet:
        other = object.__new__(StateGoalNet)
        other.__dict__.update(self.__dict__)
        other.w1 = self.w1.copy()
        other.w2 = self.w2.copy()
        return other

    # -- checkpoints ------------------------------------------------------
    def save(self, path) -> dict:
        """Write the binary weight file plus a ``.json`` sidecar; returns the manifest."""
        path = Path(path)
        r, hid, d = self.w1.shape
        header = _NET_HEADER.pack(
            NET_MAGIC, FORMAT_VERSION, r, hid, d, self.n_actions, self.k,
            self.grid_shape[0], self.grid_shape[1], self.state_coder.nx, self.state_coder.ny,
            self.goal_coder.nx, self.goal_coder.ny, float(self.state_coder.sigma),
            float(self.goal_coder.sigma), self.gate_threshold)
        blob = header + self.w1.astype("<f8").tobytes(order="C") + self.w2.astype("<f8").tobytes(order="C")
        path.write_bytes(blob)
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "state_goal_net",
            "file": path.name,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "rows": r, "hidden": hid, "inputs": d, "actions": self.n_actions, "k": self.k,
            "grid_shape": list(self.grid_shape),
            "state_centers": [self.state_coder.nx, self.state_coder.ny],
            "goal_centers": [self.goal_coder.nx, self.goal_coder.ny],
            "state_sigma": self.state_coder.sigma, "goal_sigma": self.goal_coder.sigma,
            "gate_threshold": self.gate_threshold,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))
        return manifest

    @classmethod
    def load(cls, path) -> StateGoalNet:
        blob = Path(path).read_bytes()
        (magic, version, r, hid, d, n_act, k, gw, gh, snx, sny, gnx, gny,
         ssig, gsig, thr) = _NET_HEADER.unpack_from(blob)
        if magic != NET_MAGIC or version != FORMAT_VERSION:
            raise ValueError(f"{path}: not a version-{FORMAT_VERSION} state-goal checkpoint")
        net = cls((gw, gh), state_coder=GaussianCoder(snx, sny, ssig),
                  goal_coder=GaussianCoder(gnx, gny, gsig), n_hidden=hid, k=k,
                  n_actions=n_act, gate_threshold=thr, seed=0)
        off = _NET_HEADER.size
        n1, n2 = r * hid * d, r * n_act * hid
        net.w1 = np.frombuffer(blob, "<f8", n1, off).reshape(r, hid, d).astype(np.float64)
        net.w2 = np.frombuffer(blob, "<f8", n2, off + 8 * n1).reshape(r, n_act, hid).astype(np.float64)
        return net


def forward(net: StateGoalNet, s: GridPos, g_pos) -> np.ndarray:
    """q-values over the four actions for state ``s`` and goal ``g_pos``."""
    return net.q(s, g_pos)


def backprop_update(net: StateGoalNet, s: GridPos, g_pos, a: int, delta: float,
                    alpha: float) -> None:
    """Move q(s, g, a) along its gradient by ``alpha * delta``.

    Only rows opened by the goal and only action ``a``'s read-out change.
    """
    if delta == 0.0:
        return
    rows, h, _ = net.hidden(s, g_pos)
    kernels.backprop(net.w1, net.w2, net.codes[net.cell_index(s)], rows, h, int(a),
                     float(delta), float(alpha), net.k)


class MetaQTable:
    """Dense Q(state index, subgoal index), grown with zeros as subgoals appear."""

    def __init__(self, n: int = 0):
        self.values = np.zeros((n, n))

    @property
    def size(self) -> int:
        return self.values.shape[1]

    def grow(self, n: int) -> None:
        old = self.values.shape[0]
        if n > old:
            grown = np.zeros((n, n))
            grown[:old, :old] = self.values
            self.values = grown

    def _check(self, i: int, j: int):
        if not (0 <= i < self.values.shape[0] and 0 <= j < self.values.shape[1]):
            raise ContractViolation(f"index ({i}, {j}) outside table of shape {self.values.shape}")

    def get(self, i: int, j: int) -> float:
        self._check(i, j)
        return float(self.values[i, j])

    def set(self, i: int, j: int, v: float) -> None:
        self._check(i, j)
        self.values[i, j] = v

    def row(self, i: int) -> np.ndarray:
        self._check(i, 0)
        return self.values[i]

    def save(self, path) -> dict:
        path = Path(path)
        rows, cols = self.values.shape
        blob = _TABLE_HEADER.pack(TABLE_MAGIC, FORMAT_VERSION, rows, cols) + \
            self.values.astype("<f8").tobytes(order="C")
        path.write_bytes(blob)
        manifest = {"format_version": FORMAT_VERSION, "kind": "meta_q_table", "file": path.name,
                    "sha256": hashlib.sha256(blob).hexdigest(), "shape": [rows, cols]}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))
        return manifest

    @classmethod
    def load(cls, path) -> MetaQTable:
        blob = Path(path).read_bytes()
        magic, version, rows, cols = _TABLE_HEADER.unpack_from(blob)
        if magic != TABLE_MAGIC or version != FORMAT_VERSION:
            raise ValueError(f"{path}: not a version-{FORMAT_VERSION} meta table")
        t = cls(0)
        t.values = np.frombuffer(blob, "<f8", rows * cols, _TABLE_HEADER.size) \
            .reshape(rows, cols).astype(np.float64)
        return t


def meta_q_get(table: MetaQTable, state_index: int, subgoal_index: int) -> float:
    return table.get(state_index, subgoal_index)


def meta_q_set(table: MetaQTable, state_index: int, subgoal_index: int, value: float) -> None:
    table.set(state_index, subgoal_index, value)


def meta_discount(gamma: float, steps: int, mode: str = "power") -> float:
    """Bootstrap factor between two subgoal selections."""
    if mode == "power":
        return gamma ** steps
    if mode == "plain":
        return gamma
    raise ValueError(f"meta_discount_mode must be 'power' or 'plain', got {mode!r}")


def meta_q_update(table: MetaQTable, mt: MetaTransition, alpha2: float, gamma: float,
                  state_indexer: Callable[[GridPos], int], mode: str = "power") -> float:
    """One tabular TD step toward G (+ discounted best next value). Returns the TD error."""
    i = state_indexer(mt.s0)
    table._check(i, mt.g)
    target = mt.G
    if not mt.end_terminal:
        nxt = state_indexer(mt.s_end)
        target += meta_discount(gamma, mt.steps, mode) * float(table.row(nxt).max())
    err = target - table.values[i, mt.g]
    table.values[i, mt.g] += alpha2 * err
    return err


def meta_batch_update(table: MetaQTable, buffer: ReplayBuffer, slots: np.ndarray,
                      alpha2: float, gamma: float, index_cells: Callable[[np.ndarray], np.ndarray],
                      mode: str = "power") -> None:
    """Sequential TD updates for the sampled ``slots`` of a MetaTransition buffer.

    ``index_cells`` maps an (n, 2) array of cells to meta state indices.
    """
    if len(slots) == 0:
        return
    s_rows = index_cells(buffer.column("s0", slots))
    next_rows = index_cells(buffer.column("s_end", slots))
    steps = buffer.column("steps", slots)
    discounts = gamma ** steps.astype(np.float64) if mode == "power" else np.full(len(slots), gamma)
    kernels.meta_batch(table.values, s_rows, buffer.column("g", slots), buffer.column("G", slots),
                       next_rows, discounts, buffer.column("end_terminal", slots), float(alpha2))
