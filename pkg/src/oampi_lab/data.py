"""Offline data: trajectory collection, dataset mixing and the empirical model."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from .mdp import TabularMdp, check_policy

CSV_HEADER = ("traj_id", "t", "state", "action", "reward", "next_state")


class EstimationError(ValueError):
    pass


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self):
        return len(self.states)

    def __iter__(self) -> Iterator[Step]:
        for s, a, r, s2 in zip(self.states, self.actions, self.rewards, self.next_states):
            yield Step(int(s), int(a), float(r), int(s2))


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @cached_property
    def flat(self) -> Trajectory:
        """All steps concatenated in trajectory order."""
        if not self.trajectories:
            empty_i = np.zeros(0, dtype=np.int64)
            return Trajectory(empty_i, empty_i, np.zeros(0), empty_i)
        return Trajectory(*(np.concatenate([getattr(t, f) for t in self.trajectories])
                            for f in ("states", "actions", "rewards", "next_states")))

    def steps(self) -> Iterator[Step]:
        for traj in self.trajectories:
            yield from traj


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row of ``cdf``."""
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def collect(mdp: TabularMdp, behavior: np.ndarray, n_trajectories: int, horizon: int,
            rng: np.random.Generator, provenance: str = "") -> Dataset:
    """Roll out ``behavior`` for ``horizon`` steps from ``n_trajectories`` initial states."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if n_trajectories < 0:
        raise ValueError("n_trajectories must be non-negative")
    pi = check_policy(behavior, mdp.n_states, mdp.n_actions)
    n = n_trajectories
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    nexts = np.empty((n, horizon), dtype=np.int64)
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)

    s = _sample_rows(np.tile(np.cumsum(mdp.initial_dist), (n, 1)), rng.random(n))
    for t in range(horizon):
        a = _sample_rows(pi_cdf[s], rng.random(n))
        r = mdp.reward_mean[s, a] + mdp.reward_std[s, a] * rng.standard_normal(n)
        s2 = _sample_rows(p_cdf[s, a], rng.random(n))
        states[:, t], actions[:, t], rewards[:, t], nexts[:, t] = s, a, r, s2
        s = s2
    trajs = tuple(Trajectory(states[i], actions[i], rewards[i], nexts[i]) for i in range(n))
    return Dataset(trajs, provenance)


def mix_datasets(a: Dataset, b: Dataset, p: float, size: int, rng: np.random.Generator,
                 replace: bool = True) -> Dataset:
    """Draw ``size`` trajectories, each from ``a`` with probability ``p`` and otherwise from ``b``.

    With ``replace`` each pick is a uniform draw from the chosen source. With
    ``replace=False`` slot ``i`` takes trajectory ``i`` of the chosen source,
    so no trajectory repeats and ``p`` of 0 or 1 returns a source unchanged;
    both sources then need at least ``size`` trajectories.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mixture probability must lie in [0, 1], got {p}")
    if p > 0 and len(a) == 0:
        raise ValueError("dataset a is empty but has nonzero selection probability")
    if p < 1 and len(b) == 0:
        raise ValueError("dataset b is empty but has nonzero selection probability")
    if not replace and ((p > 0 and len(a) < size) or (p < 1 and len(b) < size)):
        raise ValueError("aligned mixing needs at least `size` trajectories in each source")
    from_a = rng.random(size) < p
    picks = []
    for i, use_a in enumerate(from_a):
        src = a if use_a else b
        picks.append(src.trajectories[rng.integers(len(src)) if replace else i])
    label = f"mix(p={p:g}; a={a.provenance}; b={b.provenance})"
    return Dataset(tuple(picks), label)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Count-based estimates of rewards, transitions and behavior from a dataset."""

    count_sa: np.ndarray
    count_sas: np.ndarray
    reward_sum: np.ndarray
    reward_hat: np.ndarray
    transition_hat: np.ndarray
    behavior_hat: np.ndarray
    n_states: int
    n_actions: int

    @cached_property
    def transition_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.transition_hat.reshape(-1, self.n_states))

    @property
    def state_action_weights(self) -> np.ndarray:
        """Empirical ``(s, a)`` frequencies of the dataset."""
        return self.count_sa / self.count_sa.sum()

    @property
    def state_weights(self) -> np.ndarray:
        return self.state_action_weights.sum(axis=1)


def fit_empirical(dataset: Dataset, n_states: int, n_actions: int) -> EmpiricalModel:
    if dataset.n_steps == 0:
        raise EstimationError("cannot fit an empirical model to an empty dataset")
    f = dataset.flat
    S, A = n_states, n_actions
    if f.states.max() >= S or f.next_states.max() >= S or f.actions.max() >= A or min(
            f.states.min(), f.actions.min(), f.next_states.min()) < 0:
        raise EstimationError("dataset indices fall outside the MDP")

    count_sa = np.zeros((S, A), dtype=np.int64)
    np.add.at(count_sa, (f.states, f.actions), 1)
    count_sas = np.zeros((S, A, S), dtype=np.int64)
    np.add.at(count_sas, (f.states, f.actions, f.next_states), 1)
    reward_sum = np.zeros((S, A))
    np.add.at(reward_sum, (f.states, f.actions), f.rewards)

    visited = count_sa > 0
    reward_hat = np.where(visited, reward_sum / np.maximum(count_sa, 1), 0.0)

    transition_hat = count_sas / np.maximum(count_sa, 1)[:, :, None]
    self_loops = np.zeros((S, A, S))
    self_loops[np.arange(S), :, np.arange(S)] = 1.0
    transition_hat = np.where(visited[:, :, None], transition_hat, self_loops)

    count_s = count_sa.sum(axis=1, keepdims=True)
    behavior_hat = np.where(count_s > 0, count_sa / np.maximum(count_s, 1), 1.0 / A)

    for arr in (count_sa, count_sas, reward_sum, reward_hat, transition_hat, behavior_hat):
        arr.setflags(write=False)
    return EmpiricalModel(count_sa, count_sas, reward_sum, reward_hat, transition_hat, behavior_hat, S, A)


# ---------------------------------------------------------------------------
# CSV import / export


def write_dataset_csv(dataset: Dataset, path) -> None:
    """Write to a filesystem path or to an open text stream."""
    if hasattr(path, "write"):
        _write_records(dataset, path)
        return
    with open(path, "w", newline="") as fh:
        _write_records(dataset, fh)


def _write_records(dataset: Dataset, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, traj in enumerate(dataset.trajectories):
        for t, step in enumerate(traj):
            w.writerow((i, t, step.state, step.action, format(step.reward, ".17g"), step.next_state))


def read_dataset_csv(path, provenance: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows: dict[int, list[tuple[int, int, int, float, int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tid, t, s, a, r, s2 = row
                rows.setdefault(int(tid), []).append((int(t), int(s), int(a), float(r), int(s2)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record {row!r}") from exc
    trajs = []
    for tid in sorted(rows):
        steps = sorted(rows[tid])
        if [st[0] for st in steps] != list(range(len(steps))):
            raise ValueError(f"{path}: trajectory {tid} has missing or duplicate time steps")
        _, s, a, r, s2 = zip(*steps)
        trajs.append(Trajectory(np.array(s, dtype=np.int64), np.array(a, dtype=np.int64),
                                np.array(r, dtype=float), np.array(s2, dtype=np.int64)))
    return Dataset(tuple(trajs), provenance if provenance is not None else Path(path).name)


def child_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent stream for the experiment cell addressed by ``(seed, *path)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))
