"""Sampled safe set: stored trajectories, costs-to-go, and the minimum-cost map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import InputError, SafeSetError

SNAP = 1e-9


def stage_costs(states, inputs, Q, R, target) -> np.ndarray:
    """Quadratic stage costs ``(x_t - x_F)^T Q (x_t - x_F) + u_t^T R u_t`` for t < T."""
    X = np.asarray(states, dtype=float)[:-1] - np.asarray(target, dtype=float)
    U = np.asarray(inputs, dtype=float).reshape(X.shape[0], -1)
    return np.einsum("ti,ij,tj->t", X, Q, X) + np.einsum("ti,ij,tj->t", U, R, U)


def cost_to_go(states, inputs, Q, R, target, tol: float = 1e-2) -> np.ndarray:
    """Suffix sums of stage costs; the last entry (at the target) is 0.

    Args:
        states: ``T + 1`` states ending within ``tol`` of ``target``.
        inputs: ``T`` inputs.
        Q: State weight.
        R: Input weight.
        target: The target state ``x_F``.
        tol: Terminal tolerance.

    Returns:
        Array of length ``T + 1``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.asarray(inputs, dtype=float)
    if inputs.size and inputs.reshape(len(inputs), -1).shape[0] != states.shape[0] - 1:
        raise InputError("need exactly one input per transition")
    if not inputs.size and states.shape[0] != 1:
        raise InputError("need exactly one input per transition")
    if np.linalg.norm(states[-1] - target) > tol:
        raise InputError("trajectory does not terminate at the target")
    if states.shape[0] == 1:
        return np.zeros(1)
    r = stage_costs(states, inputs, Q, R, target)
    return np.concatenate([np.cumsum(r[::-1])[::-1], [0.0]])


def snap_key(state) -> bytes:
    return np.round(np.asarray(state, dtype=float) / SNAP).astype(np.int64).tobytes()


@dataclass(frozen=True)
class SafePoint:
    iteration: int
    t: int
    state: np.ndarray
    cost_to_go: float
    input: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class StoredTrajectory:
    """Stored states ``x_t`` for ``t = first_t .. T`` plus the inputs applied there.

    ``inputs[i]`` drives ``states[i]`` to ``states[i + 1]``; the terminal
    state has no stored input (the continuation is to stay put with zero input).
    """

    iteration: int
    first_t: int
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True, eq=False)
class SampledSafeSet:
    """Copy-on-update collection of active stored trajectories."""

    trajectories: dict = field(default_factory=dict)
    pruned: tuple = ()

    @property
    def active(self) -> tuple:
        return tuple(sorted(self.trajectories))

    def __len__(self) -> int:
        return sum(len(tr) for tr in self.trajectories.values())

    def points(self) -> Iterator[SafePoint]:
        for j in self.active:
            tr = self.trajectories[j]
            for i in range(len(tr)):
                u = tr.inputs[i] if i < len(tr.inputs) else None
                yield SafePoint(j, tr.first_t + i, tr.states[i], float(tr.costs[i]), u)

    def states(self) -> np.ndarray:
        return np.vstack([self.trajectories[j].states for j in self.active])

    def successor(self, iteration: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Next stored state and the input leading to it (zero input at the end)."""
        tr = self.trajectories[iteration]
        i = t - tr.first_t
        if i < 0 or i >= len(tr):
            raise InputError(f"no stored point ({iteration}, {t})")
        if i + 1 < len(tr):
            return tr.states[i + 1], tr.inputs[i]
        return tr.states[i], np.zeros(tr.inputs.shape[1])

    def to_dict(self) -> dict:
        pts = []
        for p in self.points():
            pts.append({
                "iteration": p.iteration,
                "t": p.t,
                "state": p.state.tolist(),
                "cost_to_go": p.cost_to_go,
                "input": None if p.input is None else p.input.tolist(),
            })
        return {"points": pts, "active": list(self.active), "pruned": list(self.pruned)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SampledSafeSet":
        groups: dict[int, list] = {}
        for p in data["points"]:
            groups.setdefault(int(p["iteration"]), []).append(p)
        trajs = {}
        for j, pts in groups.items():
            pts.sort(key=lambda p: p["t"])
            states = np.array([p["state"] for p in pts], dtype=float)
            inputs = np.array([p["input"] for p in pts if p["input"] is not None], dtype=float)
            costs = np.array([p["cost_to_go"] for p in pts], dtype=float)
            trajs[j] = StoredTrajectory(j, int(pts[0]["t"]), states, inputs.reshape(len(inputs), -1), costs)
        if sorted(trajs) != sorted(data.get("active", trajs)):
            raise InputError("active list does not match stored points")
        return cls(trajs, tuple(data.get("pruned", ())))

    @classmethod
    def from_json(cls, text: str) -> "SampledSafeSet":
        return cls.from_dict(json.loads(text))


def append_trajectory(ss: SampledSafeSet, j: int, states, costs_to_go, inputs=None, first_t: int | None = None) -> SampledSafeSet:
    """Return a new safe set with trajectory ``j`` added.

    By default the initial state is stored only for ``j == 0``; later
    iterations store ``t = 1 .. T_j``.  ``states``/``costs_to_go`` and
    ``inputs`` always describe the full trajectory from ``t = 0``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    costs = np.asarray(costs_to_go, dtype=float).ravel()
    if states.shape[0] != costs.size:
        raise InputError("states and costs differ in length")
    if j in ss.trajectories or j in ss.pruned:
        raise InputError(f"trajectory {j} already inserted")
    if np.any(~np.isfinite(costs)) or np.any(costs < 0):
        raise InputError("costs-to-go must be finite and nonnegative")
    if inputs is None:
        inputs = np.zeros((states.shape[0] - 1, 0))
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2:
        inputs = inputs.reshape(states.shape[0] - 1, -1)
    if inputs.shape[0] != states.shape[0] - 1:
        raise InputError("need one input per transition")
    if first_t is None:
        first_t = 0 if j == 0 else 1
    first_t = min(first_t, states.shape[0] - 1)
    tr = StoredTrajectory(j, first_t, states[first_t:], inputs[first_t:], costs[first_t:])
    trajs = dict(ss.trajectories)
    trajs[j] = tr
    return SampledSafeSet(trajs, ss.pruned)


def prune(ss: SampledSafeSet, is_safe: Callable[[np.ndarray], bool]) -> SampledSafeSet:
    """Drop every trajectory that owns at least one state failing ``is_safe``."""
    keep, drop = {}, []
    for j in ss.active:
        tr = ss.trajectories[j]
        if all(is_safe(x) for x in tr.states):
            keep[j] = tr
        else:
            drop.append(j)
    if not keep:
        raise SafeSetError(f"pruning removed every stored trajectory ({drop})")
    if not drop:
        return ss
    return SampledSafeSet(keep, tuple(sorted(set(ss.pruned) | set(drop))))


@dataclass(frozen=True, eq=False)
class CostMap:
    """Minimum cost-to-go per distinct stored state, with the owning point."""

    states: np.ndarray
    costs: np.ndarray
    owners: tuple
    _index: dict = field(repr=False)

    def __len__(self) -> int:
        return self.costs.size

    def __contains__(self, state) -> bool:
        return snap_key(state) in self._index

    def __getitem__(self, state) -> float:
        i = self._index.get(snap_key(state))
        return float("inf") if i is None else float(self.costs[i])

    def owner(self, state) -> tuple[int, int]:
        return self.owners[self._index[snap_key(state)]]


def min_cost_map(ss: SampledSafeSet) -> CostMap:
    best: dict[bytes, tuple] = {}
    for p in ss.points():
        key = snap_key(p.state)
        cur = best.get(key)
        if cur is None or p.cost_to_go < cur[0]:
            best[key] = (p.cost_to_go, p.state, (p.iteration, p.t))
    keys = list(best)
    n = len(keys)
    states = np.array([best[k][1] for k in keys]).reshape(n, -1)
    costs = np.array([best[k][0] for k in keys], dtype=float)
    owners = tuple(best[k][2] for k in keys)
    return CostMap(states, costs, owners, {k: i for i, k in enumerate(keys)})
