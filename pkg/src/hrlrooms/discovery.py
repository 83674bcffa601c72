"""Unsupervised subgoal discovery over the agent's experience memory.

Two sources of subgoals:

* anomalies: next-states of transitions with a rare large positive reward (and,
  optionally, of transitions whose state jumps far in one step);
* centroids: k-means over the next-states of the remaining transitions,
  warm-started from the previous centroids on every refit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import kernels
from .env import GridPos
from .errors import ContractViolation
from .memory import ReplayBuffer, Transition

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class SubgoalKind(str, Enum):
    ANOMALY = "anomaly"
    CENTROID = "centroid"


@dataclass(frozen=True)
class Subgoal:
    kind: SubgoalKind
    point: tuple[float, float]
    id: int
    cell: GridPos | None = None  # anomalies only
    cluster: int | None = None  # centroids only: k-means cluster index


@dataclass
class SubgoalSet:
    """Ordered subgoals; a subgoal's position in the list is its id.

    ``grid_shape`` (width, height) maps cells into the unit square, where
    ``merge_radius`` is measured (default: one cell width).
    """
    grid_shape: tuple[int, int]
    merge_radius: float | None = None
    subgoals: list[Subgoal] = field(default_factory=list)

    def __post_init__(self):
        if self.merge_radius is None:
            self.merge_radius = 1.0 / max(self.grid_shape[0] - 1, 1)

    def __len__(self) -> int:
        return len(self.subgoals)

    def __getitem__(self, i: int) -> Subgoal:
        return self.subgoals[i]

    def __iter__(self):
        return iter(self.subgoals)

    def normalize(self, cell) -> tuple[float, float]:
        w, h = self.grid_shape
        return (cell[0] / max(w - 1, 1), cell[1] / max(h - 1, 1))

    @property
    def anomalies(self) -> list[Subgoal]:
        return [g for g in self.subgoals if g.kind is SubgoalKind.ANOMALY]

    @property
    def centroids(self) -> list[Subgoal]:
        return [g for g in self.subgoals if g.kind is SubgoalKind.CENTROID]

    def near_anomaly(self, point) -> bool:
        # tolerance keeps neighbouring cells (exactly one radius apart) distinct
        r = self.merge_radius * (1.0 - 1e-9)
        return any((g.point[0] - point[0]) ** 2 + (g.point[1] - point[1]) ** 2 < r * r
                   for g in self.anomalies)

    def add_anomaly(self, cell: GridPos) -> int | None:
        """Append an anomaly subgoal unless one already sits within the merge radius."""
        point = self.normalize(cell)
        if self.near_anomaly(point):
            return None
        gid = len(self.subgoals)
        self.subgoals.append(Subgoal(SubgoalKind.ANOMALY, point, gid, cell=GridPos(*cell)))
        return gid

    def set_centroids(self, centroids: np.ndarray) -> None:
        """Overwrite centroid subgoals in place; new clusters are appended."""
        existing = {g.cluster: g.id for g in self.centroids}
        for c, (x, y) in enumerate(np.asarray(centroids, dtype=float)):
            point = (float(x), float(y))
            if c in existing:
                gid = existing[c]
                self.subgoals[gid] = Subgoal(SubgoalKind.CENTROID, point, gid, cluster=c)
            else:
                gid = len(self.subgoals)
                self.subgoals.append(Subgoal(SubgoalKind.CENTROID, point, gid, cluster=c))

    def points(self) -> np.ndarray:
        return np.array([g.point for g in self.subgoals], dtype=float).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "grid_shape": list(self.grid_shape),
            "merge_radius": self.merge_radius,
            "subgoals": [
                {"id": g.id, "kind": g.kind.value, "point": list(g.point),
                 **({"cell": list(g.cell)} if g.cell is not None else {}),
                 **({"cluster": g.cluster} if g.cluster is not None else {})}
                for g in self.subgoals
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SubgoalSet:
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported subgoal format_version {d.get('format_version')}")
        gset = cls(tuple(d["grid_shape"]), d["merge_radius"])
        for row in sorted(d["subgoals"], key=lambda r: r["id"]):
            gset.subgoals.append(Subgoal(
                SubgoalKind(row["kind"]), tuple(row["point"]), int(row["id"]),
                cell=GridPos(*row["cell"]) if "cell" in row else None,
                cluster=row.get("cluster")))
        return gset

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> SubgoalSet:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AnomalyDetector:
    positive_threshold: float = 1.0
    feature_distance_threshold: float | None = None
    grid_shape: tuple[int, int] = (20, 20)

    def is_anomalous(self, t: Transition) -> bool:
        if t.r >= self.positive_threshold:
            return True
        if self.feature_distance_threshold is not None:
            w, h = self.grid_shape
            dx = (t.s_next[0] - t.s[0]) / max(w - 1, 1)
            dy = (t.s_next[1] - t.s[1]) / max(h - 1, 1)
            return (dx * dx + dy * dy) ** 0.5 >= self.feature_distance_threshold
        return False

    def anomaly_mask(self, memory: ReplayBuffer) -> np.ndarray:
        """Vectorized :meth:`is_anomalous` over a Transition buffer, in insertion order."""
        mask = memory.column("r") >= self.positive_threshold
        if self.feature_distance_threshold is not None:
            w, h = self.grid_shape
            scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=float)
            d = (memory.column("s_next") - memory.column("s")) / scale
            mask |= np.sqrt((d ** 2).sum(axis=1)) >= self.feature_distance_threshold
        return mask


def detect_anomaly(detector: AnomalyDetector, t: Transition, gset: SubgoalSet | None = None) -> bool:
    """True when ``t`` is anomalous and its next-state is not already a subgoal.

    With ``gset`` given, the new anomaly is registered there (deduplicated
    within the merge radius); without it only the reward/feature test runs.
    """
    if not detector.is_anomalous(t):
        return False
    if gset is None:
        return True
    return gset.add_anomaly(t.s_next) is not None


@dataclass
class KMeansState:
    k: int
    centroids: np.ndarray | None = None
    counts: np.ndarray | None = None
    inertia: list[float] = field(default_factory=list)
    reseeds: int = 0

    @property
    def ready(self) -> bool:
        return self.centroids is not None


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[int(rng.integers(len(points)))]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(len(points)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(points) - 1)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans_fit(points, state: KMeansState, max_iters: int = 100, tol: float = 1e-6,
               seed=0) -> KMeansState:
    """Lloyd iterations from the previous centroids (k-means++ on the first fit).

    Returns a new state; on a cold start with fewer than k points the input
    state is returned unchanged (``ready`` stays False). A cluster that empties
    out is reseeded with the point farthest from its assigned centroid.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    k = state.k
    if state.centroids is None:
        if len(pts) < k:
            return state
        centroids = _kmeans_pp(pts, k, np.random.default_rng(seed))
    else:
        centroids = np.array(state.centroids, dtype=np.float64)
        if len(pts) == 0:
            return KMeansState(k, centroids, np.zeros(k, dtype=np.int64), [], state.reseeds)
    history: list[float] = []
    reseeds = state.reseeds
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(max_iters):
        labels, new, counts, inertia = kernels.lloyd_step(pts, centroids)
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-15:
            raise AssertionError(f"k-means objective rose from {history[-1]} to {inertia}")
        history.append(inertia)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            d2 = ((pts - new[labels]) ** 2).sum(axis=1)
            for c in empty:
                far = int(np.argmax(d2))
                log.info("k-means: reseeding empty cluster %d at point %d", c, far)
                new[c] = pts[far]
                d2[far] = -1.0
                reseeds += 1
            # the objective may rise after a reseed; restart the monotonicity check
            history.append(float("inf"))
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    labels = kernels.assign(pts, centroids)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return KMeansState(k, centroids, counts, [h for h in history if np.isfinite(h)], reseeds)


def assign_cluster(state: KMeansState, point) -> int:
    """Nearest centroid (Euclidean); ties go to the lowest index."""
    if state.centroids is None:
        raise ContractViolation("k-means centroids are not initialized")
    return int(kernels.nearest(float(point[0]), float(point[1]), state.centroids))


def memory_points(memory: ReplayBuffer, grid_shape) -> np.ndarray:
    """Next-state locations of a Transition buffer, in the unit square."""
    w, h = grid_shape
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=float)
    return memory.column("s_next").astype(np.float64) / scale


def discover(memory: ReplayBuffer, detector: AnomalyDetector, kstate: KMeansState,
             gset: SubgoalSet, *, max_iters: int = 100, tol: float = 1e-6, seed=0):
    """One pass of subgoal discovery; mutates ``memory`` and ``gset``.

    Anomalous next-states become anomaly subgoals and their transitions leave
    the memory; k-means is then refit on what remains and the centroid
    subgoals take the new centroids. Returns ``(gset, kstate, memory)``.
    """
    mask = detector.anomaly_mask(memory)
    if mask.any():
        for cell in memory.column("s_next")[mask]:
            gset.add_anomaly(GridPos(int(cell[0]), int(cell[1])))
        memory.remove_where(mask)
    kstate = kmeans_fit(memory_points(memory, gset.grid_shape), kstate, max_iters, tol, seed)
    if kstate.ready:
        gset.set_centroids(kstate.centroids)
    return gset, kstate, memory


class StateIndexer:
    """Maps cells to meta-controller state indices.

    A cell holding an anomaly subgoal maps to that subgoal; any other cell maps
    to the centroid subgoal of its cluster.
    """

    def __init__(self, gset: SubgoalSet, kstate: KMeansState):
        self.refresh(gset, kstate)

    def refresh(self, gset: SubgoalSet, kstate: KMeansState) -> None:
        self.gset, self.kstate = gset, kstate
        w, h = gset.grid_shape
        table = np.full(w * h, -1, dtype=np.int64)
        if kstate.ready:
            by_cluster = {g.cluster: g.id for g in gset.centroids}
            xs, ys = np.meshgrid(np.arange(w), np.arange(h))
            pts = np.stack([xs.ravel() / max(w - 1, 1), ys.ravel() / max(h - 1, 1)], axis=1)
            labels = kernels.assign(np.ascontiguousarray(pts), kstate.centroids)
            table[:] = [by_cluster[int(c)] for c in labels]
            self.cluster_of = labels
        else:
            self.cluster_of = np.full(w * h, -1, dtype=np.int64)
        for g in gset.anomalies:
            table[g.cell[1] * w + g.cell[0]] = g.id
        self.table = table

    def __call__(self, cell) -> int:
        i = int(self.table[cell[1] * self.gset.grid_shape[0] + cell[0]])
        if i < 0:
            raise ContractViolation(f"cell {tuple(cell)} has no meta state (no clusters yet)")
        return i

    def cells(self, cells: np.ndarray) -> np.ndarray:
        idx = self.table[cells[:, 1] * self.gset.grid_shape[0] + cells[:, 0]]
        if (idx < 0).any():
            raise ContractViolation("cells without a meta state (no clusters yet)")
        return idx


def subgoal_attained(gset: SubgoalSet, g: int, kstate: KMeansState, s_next) -> bool:
    """Anomalies need the exact cell; centroids need any cell of their cluster."""
    if not 0 <= g < len(gset):
        raise ContractViolation(f"subgoal index {g} out of range")
    sub = gset[g]
    if sub.kind is SubgoalKind.ANOMALY:
        return tuple(s_next) == tuple(sub.cell)
    return assign_cluster(kstate, gset.normalize(s_next)) == sub.cluster
