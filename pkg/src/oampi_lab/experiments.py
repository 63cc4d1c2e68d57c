"""Execute validated experiment configs and render their artifacts.

Workers compute per-seed results in memory; every file is rendered to text
and written afterwards by a single writer, in sorted path order, so outputs
do not depend on thread scheduling.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, MixtureCfg, parse_config
from .data import Dataset, child_rng, collect, fit_empirical, mix_datasets, write_dataset_csv
from .diag import dataset_pairs, evaluation_mse, overestimation, policy_kl, refit_overestimation
from .evaluation import EvalConfig, epsilon_beta, evaluate_offline, q_tilde
from .improve import HYPERPARAMETER, ImprovementSpec
from .mdp import (
    GridSpec, TabularMdp, build_gridworld, discounted_visitation, down_left_policy, exact_q, j_value,
    mix_policies, optimal_policy, uniform_policy,
)
from .oampi import OampiConfig, RunResult, run, sweep, worker_count

PRESETS = ("fig4", "appendix_a", "mixture_sweep")

# Child stream indices under each seed.
STREAM_DATA, STREAM_RANDOM_DATA, STREAM_MIX, STREAM_CONTROL = 0, 2, 3, 5

RUNS_HEADER = ("preset", "seed", "variant", "hyperparam", "iteration", "J", "mse", "kl",
               "overestimation_mean", "config_hash")
TABLE_HEADER = ("state", "action", "value", "seed", "config_hash")
HIST_HEADER = ("preset", "seed", "variant", "hyperparam", "iteration", "source", "bin_left", "bin_right",
               "count", "config_hash")
MIXTURE_HEADER = ("preset", "seed", "p", "variant", "hyperparam", "J", "tuned", "config_hash")

LABORATORY_CHOICES = {
    "k_multi_step": "5 improvement steps, each evaluated to the configured tolerance or sweep count",
    "k_iterative": "500 improvement steps",
    "iterative_eval": "one synchronous Bellman sweep per step, warm-started from the previous Q; "
                      "the behavior itself is evaluated to convergence first",
    "v_hat": "exp-weighted baseline is the behavior-weighted mean of Q",
    "hyperparameter_selection": "exact J of the final policy averaged over seeds",
}


def fmt(x) -> str:
    """Shortest text that round-trips to the same float."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("oampi_lab").joinpath("presets", f"{name}.yaml").read_text()
    return parse_config(text, f"preset:{name}")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise KeyError(name)
    return resources.files("oampi_lab").joinpath("presets", f"{name}.yaml").read_text()


# ---------------------------------------------------------------------------
# Building blocks shared by both experiment kinds


def build_environment(cfg: ExperimentConfig) -> tuple[GridSpec, TabularMdp]:
    spec = GridSpec(cfg.environment.width, cfg.environment.height)
    return spec, build_gridworld(spec, cfg.environment.discount)


def build_behavior(cfg: ExperimentConfig, spec: GridSpec, mdp: TabularMdp) -> np.ndarray:
    b = cfg.behavior
    u = uniform_policy(mdp.n_states, mdp.n_actions)
    if b.base == "uniform":
        return u
    base = optimal_policy(mdp) if b.base == "optimal" else down_left_policy(spec, b.suboptimal_policy)
    return mix_policies(base, u, b.weight)


def oampi_config(cfg: ExperimentConfig, variant: str, seed: int, hyperparam=None) -> OampiConfig:
    alg = cfg.algorithm
    imp = alg.improvement.model_dump()
    if hyperparam is not None:
        name = HYPERPARAMETER[imp["operator"]]
        imp[name] = int(hyperparam) if name == "m_samples" else float(hyperparam)
    ev = alg.iterative_eval if variant == "iterative" else alg.eval
    k = {"one_step": 1, "multi_step": alg.k_multi_step, "iterative": alg.k_iterative}[variant]
    return OampiConfig(variant=variant, k_iterations=k, eval=EvalConfig(**ev.model_dump()),
                       improvement=ImprovementSpec(**imp), behavior_source=alg.behavior_source, seed=seed,
                       mixing_rate=alg.mixing_rate)


def _hyperparams(cfg: ExperimentConfig) -> list:
    if cfg.sweep is not None:
        return list(cfg.sweep.grid)
    spec = ImprovementSpec(**cfg.algorithm.improvement.model_dump())
    return [spec.hyperparameter]


def _run_dir(variant: str, hyperparam) -> str:
    return variant if hyperparam is None else f"{variant}_{fmt(hyperparam)}"


# ---------------------------------------------------------------------------
# "runs" experiments: fixed dataset per seed, full per-iterate diagnostics


@dataclass
class IterateDiag:
    k: int
    j: float
    mse: float
    kl: float
    over_mean: float
    q_hat: np.ndarray
    q_true: np.ndarray
    q_tilde: np.ndarray
    hist: tuple
    control_mean: float | None = None
    control_hist: tuple | None = None


@dataclass
class VariantRun:
    variant: str
    hyperparam: object
    result: RunResult
    iterates: list[IterateDiag]


@dataclass
class SeedOutcome:
    seed: int
    dataset: Dataset
    behavior: np.ndarray
    runs: list[VariantRun] = field(default_factory=list)


def diagnose(mdp: TabularMdp, result: RunResult, beta: np.ndarray, weights: str = "dataset",
             control_model=None) -> list[IterateDiag]:
    """Per-iterate diagnostics for ``pi_0 .. pi_K``.

    ``Q_hat`` of ``pi_k`` is the estimate the run improved from at step
    ``k+1``; the last iterate is evaluated once more with the run's own
    evaluation settings, warm-started where the schedule says so.
    """
    model = result.model
    q_hats = [it.q_hat for it in result.iterations]
    last = result.iterations[-1]
    q_hats.append(evaluate_offline(model, mdp, last.policy, result.config.eval, init=last.q_hat))
    if weights == "visitation":
        sa_w = discounted_visitation(mdp, beta)[:, None] * beta
    else:
        sa_w = model.state_action_weights
    s_w = sa_w.sum(axis=1)
    pairs = dataset_pairs(model)
    control_pairs = dataset_pairs(control_model) if control_model is not None else None
    control_eval = EvalConfig(transition_source=result.config.eval.transition_source, tol=1e-12)

    out = []
    for k, (pi, q_hat) in enumerate(zip(result.policies, q_hats)):
        q_true = exact_q(mdp, pi, 1e-12)
        qt = q_tilde(mdp, pi, epsilon_beta(model, mdp, pi, q_hat), 1e-12)
        over = overestimation(q_hat, q_true, pairs)
        d = IterateDiag(k, j_value(mdp, pi), evaluation_mse(q_hat, q_true, sa_w), policy_kl(pi, beta, s_w),
                        over.mean, q_hat, q_true, qt, (over.counts, over.edges))
        if control_model is not None:
            ctl = refit_overestimation(mdp, pi, control_model, control_pairs, control_eval)
            d.control_mean, d.control_hist = ctl.mean, (ctl.counts, ctl.edges)
        out.append(d)
    return out


def _runs_seed(cfg: ExperimentConfig, spec: GridSpec, mdp: TabularMdp, beta: np.ndarray, seed: int) -> SeedOutcome:
    ds = collect(mdp, beta, cfg.data.n_trajectories, cfg.data.horizon, child_rng(seed, STREAM_DATA),
                 provenance=f"{cfg.name}/seed{seed}")
    model = fit_empirical(ds, mdp.n_states, mdp.n_actions)
    control = None
    if cfg.diagnostics.refit_control:
        fresh = collect(mdp, beta, cfg.data.n_trajectories, cfg.data.horizon, child_rng(seed, STREAM_CONTROL))
        control = fit_empirical(fresh, mdp.n_states, mdp.n_actions)
    outcome = SeedOutcome(seed, ds, beta)
    for variant in cfg.algorithm.variants:
        for h in _hyperparams(cfg):
            res = run(mdp, ds, oampi_config(cfg, variant, seed, h), behavior=beta, model=model)
            used_beta = res.initial_policy
            diags = diagnose(mdp, res, used_beta, cfg.diagnostics.weights, control)
            outcome.runs.append(VariantRun(variant, h, res, diags))
    return outcome


def _map_seeds(fn, seeds, threads):
    n = min(threads or worker_count(), len(seeds))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    config_hash: str
    seeds: list[int]
    files: dict[str, str]
    summary: dict
    outcomes: list = field(default_factory=list)
    mixture: object = None


def _table_rows(table: np.ndarray, seed: int, h: str):
    S, A = table.shape
    return ((s, a, float(table[s, a]), seed, h) for s in range(S) for a in range(A))


def _runs_summary(outcomes: list[SeedOutcome]) -> dict:
    summary = {}
    first = outcomes[0]
    for idx, vr in enumerate(first.runs):
        curves = np.array([[d.j for d in o.runs[idx].iterates] for o in outcomes])
        K = curves.shape[1] - 1
        key = _run_dir(vr.variant, vr.hyperparam)
        entry = {"mean_j": [float(x) for x in curves.mean(axis=0)]}
        if K >= 1:
            best = np.argmax(curves[:, 1:], axis=1) + 1
            entry["best_iterate_fraction"] = {str(k): float(np.mean(best == k)) for k in range(1, K + 1)}
            entry["fraction_last_above_first"] = float(np.mean(curves[:, K] > curves[:, 1]))
        summary[key] = entry
    return summary


def _render_runs(cfg: ExperimentConfig, h: str, outcomes: list[SeedOutcome]) -> dict[str, str]:
    files = {}
    runs_rows, hist_rows = [], []
    for o in outcomes:
        files[f"seed_{o.seed}/dataset.csv"] = _dataset_text(o.dataset)
        for vr in o.runs:
            hp = "" if vr.hyperparam is None else vr.hyperparam
            sub = f"seed_{o.seed}/{_run_dir(vr.variant, vr.hyperparam)}"
            for d in vr.iterates:
                runs_rows.append((cfg.name, o.seed, vr.variant, hp, d.k, d.j, d.mse, d.kl, d.over_mean, h))
                for source, hist in (("training", d.hist), ("control", d.control_hist)):
                    if hist is None:
                        continue
                    counts, edges = hist
                    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                        hist_rows.append((cfg.name, o.seed, vr.variant, hp, d.k, source, float(lo), float(hi),
                                          int(c), h))
                if cfg.output.tables:
                    files[f"{sub}/q_{d.k}.csv"] = _csv_text(TABLE_HEADER, _table_rows(d.q_true, o.seed, h))
                    files[f"{sub}/qtilde_{d.k}.csv"] = _csv_text(TABLE_HEADER, _table_rows(d.q_tilde, o.seed, h))
                    pi = vr.result.policies[d.k]
                    files[f"{sub}/policy_{d.k}.csv"] = _csv_text(TABLE_HEADER, _table_rows(pi, o.seed, h))
    files["runs.csv"] = _csv_text(RUNS_HEADER, runs_rows)
    files["overestimation.csv"] = _csv_text(HIST_HEADER, hist_rows)
    return files


def _dataset_text(ds: Dataset) -> str:
    buf = io.StringIO()
    write_dataset_csv(ds, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Mixture sweeps


@dataclass
class MixtureReport:
    p_grid: list[float]
    variants: list[str]
    seeds: list[int]
    j: dict            # (p, variant, hyperparam, seed) -> final J
    best: dict         # (p, variant) -> tuned hyperparam
    mean_tuned: dict   # (p, variant) -> mean J at the tuned hyperparam
    crossover: float | None
    datasets: dict     # (seed, p) -> Dataset

    def tuned_j(self, p, variant) -> list[float]:
        h = self.best[(p, variant)]
        return [self.j[(p, variant, h, s)] for s in self.seeds]


def crossover_point(p_grid, mean_tuned) -> float | None:
    """Smallest p at which one-step's tuned mean J first matches iterative's."""
    for p in sorted(p_grid):
        if mean_tuned[(p, "one_step")] >= mean_tuned[(p, "iterative")]:
            return p
    return None


def _mixture(cfg: ExperimentConfig, spec: GridSpec, mdp: TabularMdp, beta: np.ndarray, seeds: list[int],
             threads: int | None) -> MixtureReport:
    mix = cfg.mixture or MixtureCfg()
    size = mix.size or cfg.data.n_trajectories
    u = uniform_policy(mdp.n_states, mdp.n_actions)
    sources = {}
    for seed in seeds:
        a = collect(mdp, beta, cfg.data.n_trajectories, cfg.data.horizon, child_rng(seed, STREAM_DATA),
                    provenance=f"{cfg.name}/seed{seed}/behavior")
        b = collect(mdp, u, cfg.data.n_trajectories, cfg.data.horizon, child_rng(seed, STREAM_RANDOM_DATA),
                    provenance=f"{cfg.name}/seed{seed}/uniform")
        sources[seed] = (a, b)
    datasets = {}
    for seed in seeds:
        a, b = sources[seed]
        for i, p in enumerate(mix.p_grid):
            datasets[(seed, p)] = mix_datasets(a, b, p, size, child_rng(seed, STREAM_MIX, i),
                                               replace=mix.with_replacement)

    j, best, mean_tuned = {}, {}, {}
    for p in mix.p_grid:
        for variant in cfg.algorithm.variants:
            base = oampi_config(cfg, variant, 0)
            rep = sweep(mdp, lambda seed, _rng, p=p: (datasets[(seed, p)], None), base, cfg.sweep.grid, seeds,
                        threads=threads)
            for c in rep.cells:
                j[(p, variant, c.hyperparam, c.seed)] = c.final_j
            best[(p, variant)] = rep.best
            mean_tuned[(p, variant)] = rep.mean_j[rep.best]
    variants = list(cfg.algorithm.variants)
    cross = crossover_point(mix.p_grid, mean_tuned) if {"one_step", "iterative"} <= set(variants) else None
    return MixtureReport(list(mix.p_grid), variants, seeds, j, best, mean_tuned, cross, datasets)


def _render_mixture(cfg: ExperimentConfig, h: str, rep: MixtureReport) -> dict[str, str]:
    rows = []
    for seed in rep.seeds:
        for p in rep.p_grid:
            for variant in rep.variants:
                for hp in cfg.sweep.grid:
                    rows.append((cfg.name, seed, p, variant, hp, rep.j[(p, variant, hp, seed)],
                                 int(hp == rep.best[(p, variant)]), h))
    files = {"mixture.csv": _csv_text(MIXTURE_HEADER, rows)}
    for (seed, p), ds in rep.datasets.items():
        files[f"seed_{seed}/dataset_p{fmt(p)}.csv"] = _dataset_text(ds)
    return files


def _mixture_summary(rep: MixtureReport) -> dict:
    out = {"crossover_p": rep.crossover, "tuned": {}}
    for p in rep.p_grid:
        out["tuned"][fmt(p)] = {v: {"hyperparam": rep.best[(p, v)], "mean_j": rep.mean_tuned[(p, v)]}
                                for v in rep.variants}
    return out


# ---------------------------------------------------------------------------
# Entry points


def execute(cfg: ExperimentConfig, seeds: list[int] | None = None, threads: int | None = None) -> ExperimentResult:
    """Run ``cfg`` and render its artifacts in memory (nothing touches disk)."""
    seeds = list(seeds if seeds is not None else (cfg.seeds or [0]))
    cfg = cfg.model_copy(update={"seeds": seeds})
    h = cfg.config_hash()
    spec, mdp = build_environment(cfg)
    beta = build_behavior(cfg, spec, mdp)

    if cfg.experiment == "runs":
        outcomes = _map_seeds(lambda s: _runs_seed(cfg, spec, mdp, beta, s), seeds, threads)
        files = _render_runs(cfg, h, outcomes)
        summary = _runs_summary(outcomes)
        result = ExperimentResult(cfg, h, seeds, files, summary, outcomes=outcomes)
    else:
        rep = _mixture(cfg, spec, mdp, beta, seeds, threads)
        result = ExperimentResult(cfg, h, seeds, _render_mixture(cfg, h, rep), _mixture_summary(rep), mixture=rep)
    result.files["manifest.json"] = _manifest(result)
    return result


def _manifest(result: ExperimentResult) -> str:
    cfg = result.config
    doc = {
        "name": cfg.name,
        "experiment": cfg.experiment,
        "config_hash": result.config_hash,
        "seeds": result.seeds,
        "config": cfg.model_dump(mode="json", exclude={"output"}),
        "laboratory_choices": LABORATORY_CHOICES,
        "files": {path: hashlib.sha256(text.encode()).hexdigest() for path, text in sorted(result.files.items())},
        "summary": result.summary,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_artifacts(result: ExperimentResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    written = []
    for rel in sorted(result.files):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.files[rel], newline="")
        written.append(path)
    return written


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None, threads=None) -> ExperimentResult:
    result = execute(cfg, seeds, threads)
    write_artifacts(result, out_dir if out_dir is not None else cfg.output.dir)
    return result


def preset_fig4(seeds=range(20), out_dir=None) -> ExperimentResult:
    return _preset("fig4", seeds, out_dir)


def preset_appendix_a(seeds=range(20), out_dir=None) -> ExperimentResult:
    return _preset("appendix_a", seeds, out_dir)


def preset_mixture_sweep(seeds=range(10), out_dir=None) -> ExperimentResult:
    return _preset("mixture_sweep", seeds, out_dir)


def _preset(name, seeds, out_dir):
    cfg = load_preset(name)
    seeds = list(seeds)
    return run_experiment(cfg, out_dir, seeds) if out_dir is not None else execute(cfg, seeds)
