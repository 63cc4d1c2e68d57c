"""Offline approximate modified policy iteration: one-step, multi-step and iterative."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, EmpiricalModel, child_rng, fit_empirical
from .evaluation import EvalConfig, evaluate_offline
from .improve import HYPERPARAMETER, ImprovementSpec, improve
from .mdp import TabularMdp, check_policy, j_value, mix_policies

VARIANTS = ("one_step", "multi_step", "iterative")
BEHAVIOR_SOURCES = ("oracle", "empirical")

DEFAULT_K = {"one_step": 1, "multi_step": 5, "iterative": 500}


@dataclass(frozen=True)
class OampiConfig:
    """One OAMPI instantiation.

    ``eval`` governs every evaluation after the first; ``initial_eval``
    governs the evaluation of the starting policy. By default the iterative
    variant evaluates the behavior to convergence before switching to single
    warm-started sweeps, so it starts from the same behavior Q estimate as
    the other variants. ``mixing_rate`` below 1 blends each improvement target
    into the previous iterate.
    """

    variant: str = "multi_step"
    k_iterations: int | None = None
    eval: EvalConfig | None = None
    improvement: ImprovementSpec = field(default_factory=ImprovementSpec)
    behavior_source: str = "oracle"
    seed: int = 0
    mixing_rate: float = 1.0
    initial_eval: EvalConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.behavior_source not in BEHAVIOR_SOURCES:
            raise ValueError(f"behavior_source must be one of {BEHAVIOR_SOURCES}")
        k = DEFAULT_K[self.variant] if self.k_iterations is None else int(self.k_iterations)
        if self.variant == "one_step":
            k = 1
        if k < 1:
            raise ValueError("k_iterations must be at least 1")
        object.__setattr__(self, "k_iterations", k)
        ev = self.eval
        if ev is None:
            ev = EvalConfig(n_sweeps=1, warm_start="previous_q") if self.variant == "iterative" else EvalConfig()
            object.__setattr__(self, "eval", ev)
        if self.variant == "iterative" and ev.warm_start != "previous_q":
            raise ValueError("the iterative variant requires warm_start='previous_q'")
        if self.initial_eval is None:
            first = replace(ev, n_sweeps=0, warm_start="reward_init") if self.variant == "iterative" else ev
            object.__setattr__(self, "initial_eval", first)
        if not 0.0 < self.mixing_rate <= 1.0:
            raise ValueError("mixing_rate must lie in (0, 1]")


@dataclass
class IterationRecord:
    """Iterate ``k``: the improved policy and the Q estimate it was improved from.

    The exact return of the policy is computed on first access.
    """

    k: int
    policy: np.ndarray
    q_hat: np.ndarray
    mdp: TabularMdp = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    @cached_property
    def j(self) -> float:
        return j_value(self.mdp, self.policy)


@dataclass
class RunResult:
    config: OampiConfig
    model: EmpiricalModel
    initial_policy: np.ndarray
    initial_j: float
    iterations: list[IterationRecord]
    wall_clock: float = 0.0

    def __len__(self):
        return len(self.iterations)

    @property
    def final_policy(self) -> np.ndarray:
        return self.iterations[-1].policy

    @property
    def final_j(self) -> float:
        return self.iterations[-1].j

    @property
    def policies(self) -> list[np.ndarray]:
        """``[pi_0, pi_1, ..., pi_K]``."""
        return [self.initial_policy] + [it.policy for it in self.iterations]

    @property
    def j_curve(self) -> list[float]:
        return [self.initial_j] + [it.j for it in self.iterations]


def run(mdp: TabularMdp, dataset: Dataset, config: OampiConfig, behavior: np.ndarray | None = None,
        model: EmpiricalModel | None = None) -> RunResult:
    """Alternate offline evaluation and improvement ``config.k_iterations`` times.

    ``behavior`` is the true data-collecting policy, required when
    ``config.behavior_source == 'oracle'``.
    """
    t0 = time.perf_counter()
    if model is None:
        model = fit_empirical(dataset, mdp.n_states, mdp.n_actions)
    if config.behavior_source == "oracle":
        if behavior is None:
            raise ValueError("behavior_source='oracle' needs the true behavior policy")
        beta = check_policy(behavior, mdp.n_states, mdp.n_actions).copy()
    else:
        beta = model.behavior_hat.copy()
    rng = child_rng(config.seed, 1)

    pi = beta
    q = None
    records = []
    for k in range(1, config.k_iterations + 1):
        ev = config.initial_eval if k == 1 else config.eval
        q = evaluate_offline(model, mdp, pi, ev, init=q)
        target = improve(config.improvement, q, beta, dataset, pi, rng=rng)
        if config.mixing_rate < 1.0:
            target = mix_policies(target, pi, config.mixing_rate)
        pi = target
        records.append(IterationRecord(k, pi, q, mdp))
    return RunResult(config, model, beta, j_value(mdp, beta), records, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Hyperparameter sweeps


@dataclass
class SweepCell:
    index: int
    hyperparam: float
    seed: int
    final_j: float
    result: RunResult | None = None


@dataclass
class SweepReport:
    grid: list
    seeds: list[int]
    cells: list[SweepCell]
    mean_j: dict
    std_j: dict
    best: object

    def cell(self, hyperparam, seed) -> SweepCell:
        for c in self.cells:
            if c.hyperparam == hyperparam and c.seed == seed:
                return c
        raise KeyError((hyperparam, seed))

    def j_at(self, hyperparam) -> list[float]:
        return [self.cell(hyperparam, s).final_j for s in self.seeds]


def worker_count() -> int:
    env = os.environ.get("LAB_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, cap)


DatasetSource = Dataset | Callable[[int, np.random.Generator], tuple[Dataset, np.ndarray | None]]


def sweep(mdp: TabularMdp, data: DatasetSource, base_config: OampiConfig, grid: Sequence, seeds: Sequence[int] | int,
          behavior: np.ndarray | None = None, keep_results: bool = False, threads: int | None = None) -> SweepReport:
    """Run every ``(hyperparameter, seed)`` cell and pick the grid value with the best mean final J.

    ``data`` is either a fixed dataset or a callable ``(seed, rng) ->
    (dataset, behavior)`` that builds a fresh dataset per seed from that
    seed's child stream.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must not be empty")
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    field_name = HYPERPARAMETER[base_config.improvement.operator]
    if field_name is None:
        raise ValueError(f"operator {base_config.improvement.operator!r} has no hyperparameter to sweep")

    datasets = {}
    for seed in seeds:
        if isinstance(data, Dataset):
            datasets[seed] = (data, behavior, fit_empirical(data, mdp.n_states, mdp.n_actions))
        else:
            ds, beh = data(seed, child_rng(seed, 0))
            datasets[seed] = (ds, beh if beh is not None else behavior, fit_empirical(ds, mdp.n_states, mdp.n_actions))

    jobs = [(i, h, s) for i, (h, s) in enumerate((h, s) for h in grid for s in seeds)]

    def run_cell(job):
        i, h, seed = job
        ds, beh, model = datasets[seed]
        value = int(h) if field_name == "m_samples" else float(h)
        cfg = replace(base_config, seed=seed, improvement=replace(base_config.improvement, **{field_name: value}))
        res = run(mdp, ds, cfg, behavior=beh, model=model)
        return SweepCell(i, h, seed, res.final_j, res if keep_results else None)

    n = min(threads or worker_count(), len(jobs))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            cells = list(pool.map(run_cell, jobs))
    else:
        cells = [run_cell(job) for job in jobs]
    cells.sort(key=lambda c: c.index)

    mean_j, std_j = {}, {}
    for h in grid:
        js = np.array([c.final_j for c in cells if c.hyperparam == h])
        mean_j[h] = float(js.mean())
        std_j[h] = float(js.std(ddof=1)) if len(js) > 1 else 0.0
    best = max(grid, key=lambda h: (mean_j[h], -grid.index(h)))
    return SweepReport(grid, seeds, cells, mean_j, std_j, best)
