"""Policy improvement operators.

Each operator maps a Q estimate (plus the behavior estimate, the dataset or
the previous iterate, as needed) to a new tabular policy, and has one knob
controlling how far the result may move from the behavior.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset

OPERATORS = ("behavior_clone", "easy_bcq", "reverse_kl", "exp_weighted")
BCQ_ANCHORS = ("previous", "behavior")

# Which ImprovementSpec field each operator's sweep grid varies.
HYPERPARAMETER = {"behavior_clone": None, "easy_bcq": "m_samples", "reverse_kl": "alpha", "exp_weighted": "tau"}


@dataclass(frozen=True)
class ImprovementSpec:
    operator: str = "reverse_kl"
    alpha: float = 0.1
    m_samples: int = 5
    tau: float = 1.0
    weight_clip: float = 100.0
    bcq_anchor: str = "previous"
    bcq_exact: bool = True
    bcq_draws: int = 10_000

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown improvement operator {self.operator!r}; expected one of {OPERATORS}")
        if self.operator == "reverse_kl" and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.operator == "easy_bcq" and (int(self.m_samples) != self.m_samples or self.m_samples < 1):
            raise ValueError("m_samples must be an integer >= 1")
        if self.operator == "exp_weighted" and not (self.tau > 0 and self.weight_clip > 0):
            raise ValueError("tau and weight_clip must be positive")
        if self.bcq_anchor not in BCQ_ANCHORS:
            raise ValueError(f"bcq_anchor must be one of {BCQ_ANCHORS}")

    @property
    def hyperparameter(self):
        name = HYPERPARAMETER[self.operator]
        return None if name is None else getattr(self, name)


def behavior_clone(behavior_hat: np.ndarray) -> np.ndarray:
    return np.array(behavior_hat, dtype=float)


def _priority_order(q_row: np.ndarray) -> np.ndarray:
    """Actions from lowest to highest priority (higher q wins, then lower index)."""
    idx = np.arange(len(q_row))
    return np.lexsort((-idx, q_row))


def easy_bcq(q: np.ndarray, prev_policy: np.ndarray, m: int, rng: np.random.Generator | None = None,
             exact: bool = True, n_draws: int = 10_000) -> np.ndarray:
    """Distribution of "sample ``m`` actions from ``prev_policy``, keep the best by ``q``".

    In exact mode the action probabilities come from order statistics: if
    ``L`` is the mass of actions ranked below ``a``, then ``a`` is chosen with
    probability ``(L + p_a)^m - L^m``. Sampling mode estimates the same table
    from ``n_draws`` simulated selections per state.
    """
    m = int(m)
    if m < 1:
        raise ValueError("m must be at least 1")
    prev = np.asarray(prev_policy, dtype=float)
    q = np.asarray(q, dtype=float)
    if not exact:
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        return _easy_bcq_sampled(q, prev, m, rng, n_draws)
    if m == 1:
        return prev.copy()
    out = np.empty_like(prev)
    for s in range(prev.shape[0]):
        order = _priority_order(q[s])
        mass = prev[s, order]
        upper = np.cumsum(mass)
        lower = upper - mass
        probs = upper ** m - lower ** m
        out[s, order] = probs
    return out / out.sum(axis=1, keepdims=True)


def _easy_bcq_sampled(q, prev, m, rng, n_draws):
    S, A = prev.shape
    out = np.zeros((S, A))
    for s in range(S):
        rank = np.empty(A, dtype=int)
        rank[_priority_order(q[s])] = np.arange(A)
        draws = rng.choice(A, size=(n_draws, m), p=prev[s])
        best_rank = rank[draws].max(axis=1)
        winners = np.argsort(rank)[best_rank]
        out[s] = np.bincount(winners, minlength=A) / n_draws
    return out


def reverse_kl(q: np.ndarray, behavior: np.ndarray, alpha: float) -> np.ndarray:
    """Per-state maximizer of ``E_pi[q] - alpha * KL(pi || behavior)``: ``pi ∝ behavior * exp(q / alpha)``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    beta = np.asarray(behavior, dtype=float)
    q = np.asarray(q, dtype=float)
    support = beta > 0
    top = np.where(support, q, -np.inf).max(axis=1, keepdims=True)
    logits = np.where(support, (q - top) / alpha, -np.inf)
    unnorm = beta * np.exp(logits)
    return unnorm / unnorm.sum(axis=1, keepdims=True)


def exp_weighted(q: np.ndarray, dataset: Dataset, behavior: np.ndarray, tau: float, clip: float = 100.0) -> np.ndarray:
    """Weighted maximum likelihood on dataset actions with clipped exponentiated advantages.

    The baseline is the behavior value ``V(s) = sum_a behavior(a|s) q(s, a)``.
    States absent from the dataset get the uniform policy.
    """
    if not (tau > 0 and clip > 0):
        raise ValueError("tau and clip must be positive")
    q = np.asarray(q, dtype=float)
    S, A = q.shape
    v = np.einsum("sa,sa->s", np.asarray(behavior, dtype=float), q)
    f = dataset.flat
    adv = q[f.states, f.actions] - v[f.states]
    weights = np.minimum(np.exp(tau * adv), clip)
    totals = np.zeros((S, A))
    np.add.at(totals, (f.states, f.actions), weights)
    row = totals.sum(axis=1, keepdims=True)
    return np.where(row > 0, totals / np.where(row > 0, row, 1.0), 1.0 / A)


def improve(spec: ImprovementSpec, q: np.ndarray, behavior_hat: np.ndarray, dataset: Dataset,
            prev_policy: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch to the operator named by ``spec``."""
    if spec.operator == "behavior_clone":
        return behavior_clone(behavior_hat)
    if spec.operator == "easy_bcq":
        anchor = prev_policy if spec.bcq_anchor == "previous" else behavior_hat
        return easy_bcq(q, anchor, spec.m_samples, rng=rng, exact=spec.bcq_exact, n_draws=spec.bcq_draws)
    if spec.operator == "reverse_kl":
        return reverse_kl(q, behavior_hat, spec.alpha)
    return exp_weighted(q, dataset, behavior_hat, spec.tau, spec.weight_clip)
