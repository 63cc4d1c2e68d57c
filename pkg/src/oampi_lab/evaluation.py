"""Offline policy evaluation on the empirical model and Bellman-error bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmpiricalModel
from .mdp import TabularMdp, check_policy, evaluate_q, state_values

TRANSITION_SOURCES = ("oracle", "empirical")
WARM_STARTS = ("previous_q", "reward_init")


@dataclass(frozen=True)
class EvalConfig:
    """Knobs of the evaluation operator.

    ``n_sweeps == 0`` iterates to a sup-norm residual of ``tol``. ``discount``
    is only needed when no true MDP is supplied (empirical transitions).
    """

    transition_source: str = "oracle"
    n_sweeps: int = 0
    tol: float = 1e-10
    warm_start: str = "reward_init"
    discount: float | None = None

    def __post_init__(self):
        if self.transition_source not in TRANSITION_SOURCES:
            raise ValueError(f"transition_source must be one of {TRANSITION_SOURCES}")
        if self.warm_start not in WARM_STARTS:
            raise ValueError(f"warm_start must be one of {WARM_STARTS}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.n_sweeps < 0:
            raise ValueError("n_sweeps must be non-negative")


def _backup_model(model: EmpiricalModel, mdp: TabularMdp | None, config: EvalConfig):
    if config.transition_source == "oracle":
        if mdp is None:
            raise ValueError("oracle transitions require the true MDP")
        transitions = mdp.transition_matrix
    else:
        transitions = model.transition_matrix
    discount = config.discount if config.discount is not None else (mdp.discount if mdp is not None else None)
    if discount is None:
        raise ValueError("a discount is required: pass the MDP or set EvalConfig.discount")
    return model.reward_hat, transitions, discount


def evaluate_offline(model: EmpiricalModel, mdp: TabularMdp | None, policy: np.ndarray, config: EvalConfig,
                     init: np.ndarray | None = None) -> np.ndarray:
    """Fitted Q evaluation realized as exact backups in the empirical MDP."""
    pi = check_policy(policy, model.n_states, model.n_actions)
    reward, transitions, discount = _backup_model(model, mdp, config)
    if config.warm_start == "previous_q":
        if init is None:
            raise ValueError("warm_start='previous_q' needs an initial Q table")
        start = init
    else:
        start = reward
    return evaluate_q(reward, transitions, pi, discount, tol=config.tol, n_sweeps=config.n_sweeps, init=start)


def epsilon_beta(model: EmpiricalModel, mdp: TabularMdp, policy: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """Bellman error of ``q_hat`` under the true reward and transitions.

    ``model`` is accepted for symmetry with the evaluation call; the error is
    measured against the oracle only.
    """
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    return q_hat - mdp.reward_mean - mdp.discount * mdp.expected_next(state_values(q_hat, pi))


def q_tilde(mdp: TabularMdp, policy: np.ndarray, eps: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Discounted accumulation of the errors ``eps`` along trajectories of ``policy``."""
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    return evaluate_q(np.asarray(eps, dtype=float), mdp.transition_matrix, pi, mdp.discount, tol=tol)


def bellman_residual(q: np.ndarray, policy: np.ndarray, model_or_mdp: EmpiricalModel | TabularMdp,
                     config: EvalConfig | None = None, mdp: TabularMdp | None = None) -> float:
    """Sup-norm change of one evaluation backup applied to ``q``.

    A ``TabularMdp`` uses its true rewards and transitions; an
    ``EmpiricalModel`` uses ``reward_hat`` with the transitions picked by
    ``config``.
    """
    if isinstance(model_or_mdp, TabularMdp):
        reward, transitions, discount = model_or_mdp.reward_mean, model_or_mdp.transition_matrix, model_or_mdp.discount
    else:
        reward, transitions, discount = _backup_model(model_or_mdp, mdp, config or EvalConfig())
    S, A = reward.shape
    backed = reward + discount * (transitions @ state_values(q, policy)).reshape(S, A)
    return float(np.max(np.abs(backed - q)))
