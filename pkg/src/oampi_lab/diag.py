"""Diagnostics: evaluation error, distribution shift, overestimation and improvement-lemma checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr

from .data import EmpiricalModel
from .evaluation import EvalConfig, evaluate_offline
from .mdp import TabularMdp, discounted_visitation, exact_q, j_value, state_values

HIST_BINS = 64


@dataclass
class OverestimationSummary:
    diffs: np.ndarray
    mean: float
    std: float
    counts: np.ndarray
    edges: np.ndarray


@dataclass
class DiagReport:
    mse: float
    kl_to_behavior: float
    overestimation: OverestimationSummary
    lemma_checks: list[tuple[float, float]] = field(default_factory=list)


def evaluation_mse(q_hat: np.ndarray, q_true: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean of ``(q_hat - q_true)^2`` over state-action pairs."""
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be a probability table")
    return float(np.sum(w * (q_hat - q_true) ** 2))


def policy_kl(pi: np.ndarray, beta: np.ndarray, state_weights: np.ndarray) -> float:
    """``E_{s ~ w} KL(pi(.|s) || beta(.|s))``."""
    per_state = rel_entr(pi, beta).sum(axis=1)
    return float(np.asarray(state_weights) @ per_state)


def dataset_pairs(model: EmpiricalModel) -> tuple[np.ndarray, np.ndarray]:
    """Every visited ``(s, a)`` pair repeated by its visit count."""
    s, a = np.nonzero(model.count_sa)
    reps = model.count_sa[s, a]
    return np.repeat(s, reps), np.repeat(a, reps)


def overestimation(q_hat: np.ndarray, q_true: np.ndarray, pairs) -> OverestimationSummary:
    s, a = pairs
    s, a = np.asarray(s), np.asarray(a)
    if s.size == 0:
        raise ValueError("need at least one state-action pair")
    diffs = q_hat[s, a] - q_true[s, a]
    counts, edges = np.histogram(diffs, bins=HIST_BINS)
    return OverestimationSummary(diffs, float(diffs.mean()), float(diffs.std()), counts, edges)


def performance_difference(mdp: TabularMdp, pi: np.ndarray, beta: np.ndarray, tol: float = 1e-12):
    """Both sides of the performance difference lemma, from exact quantities."""
    lhs = j_value(mdp, pi) - j_value(mdp, beta)
    q_beta = exact_q(mdp, beta, tol)
    adv = state_values(q_beta, pi) - state_values(q_beta, beta)
    rhs = discounted_visitation(mdp, pi) @ adv / (1.0 - mdp.discount)
    return float(lhs), float(rhs)


def total_variation(pi: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(pi - beta).sum(axis=1)


def conservative_bound(mdp: TabularMdp, pi: np.ndarray, beta: np.ndarray, tol: float = 1e-12):
    """Actual improvement of ``pi`` over ``beta`` and the conservative lower bound on it."""
    g = mdp.discount
    improvement = j_value(mdp, pi) - j_value(mdp, beta)
    q_beta = exact_q(mdp, beta, tol)
    adv = state_values(q_beta, pi) - state_values(q_beta, beta)
    penalty = 2.0 * g * np.max(np.abs(adv)) / (1.0 - g) * total_variation(pi, beta)
    bound = discounted_visitation(mdp, beta) @ (adv - penalty) / (1.0 - g)
    return float(improvement), float(bound)


def refit_overestimation(mdp: TabularMdp, policy: np.ndarray, model: EmpiricalModel, pairs,
                         config: EvalConfig | None = None) -> OverestimationSummary:
    """Overestimation of ``policy``'s Q when evaluated on ``model`` to convergence."""
    config = config or EvalConfig(tol=1e-12)
    q_hat = evaluate_offline(model, mdp, policy, config)
    return overestimation(q_hat, exact_q(mdp, policy, 1e-12), pairs)


def diag_report(mdp: TabularMdp, model: EmpiricalModel, q_hat: np.ndarray, policy_evaluated: np.ndarray,
                policy_next: np.ndarray, beta: np.ndarray, use_visitation: bool = False) -> DiagReport:
    """Per-iteration diagnostics.

    ``q_hat`` estimates the value of ``policy_evaluated``; ``policy_next`` is
    the policy improved from it. Weights default to the dataset's empirical
    frequencies; ``use_visitation`` switches to the exact behavior occupancy.
    """
    q_true = exact_q(mdp, policy_evaluated, 1e-12)
    if use_visitation:
        d = discounted_visitation(mdp, beta)
        sa_w = d[:, None] * beta
    else:
        sa_w = model.state_action_weights
    s_w = sa_w.sum(axis=1)
    return DiagReport(
        mse=evaluation_mse(q_hat, q_true, sa_w),
        kl_to_behavior=policy_kl(policy_next, beta, s_w),
        overestimation=overestimation(q_hat, q_true, dataset_pairs(model)),
        lemma_checks=[performance_difference(mdp, policy_next, beta), conservative_bound(mdp, policy_next, beta)],
    )
