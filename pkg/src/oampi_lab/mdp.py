"""Finite discounted MDPs, gridworld constructors and exact dynamic programming.

Policies are ``(n_states, n_actions)`` arrays of action probabilities and Q
tables are ``(n_states, n_actions)`` arrays of values. Everything in this
module uses the true model and serves as the reference that offline estimates
are compared against.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}

SUBOPTIMAL_MODES = ("half_down_half_left", "all_down", "all_left")

_ROW_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Ground-truth finite MDP.

    ``transition`` has shape ``(S, A, S)``. ``reward_std`` is the standard
    deviation of zero-mean Gaussian noise added to ``reward_mean`` when rewards
    are sampled; an all-zero table means noise-free rewards.
    """

    transition: np.ndarray
    reward_mean: np.ndarray
    initial_dist: np.ndarray
    discount: float
    reward_std: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward_mean, dtype=float)
        rho = np.array(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] == 0 or P.shape[1] == 0:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ValueError(f"reward_mean must have shape {(S, A)}, got {r.shape}")
        if rho.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {rho.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > _ROW_ATOL:
            raise ValueError("every transition row must be a probability vector")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > _ROW_ATOL:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward_mean must be finite")
        std = np.zeros((S, A)) if self.reward_std is None else np.array(self.reward_std, dtype=float)
        if std.shape != (S, A) or np.any(std < 0):
            raise ValueError("reward_std must be a non-negative (S, A) table")
        for name, arr in (("transition", P), ("reward_mean", r), ("initial_dist", rho), ("reward_std", std)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def transition_matrix(self) -> sp.csr_matrix:
        """Transitions as a sparse ``(S*A, S)`` matrix."""
        return sp.csr_matrix(self.transition.reshape(-1, self.n_states))

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """``E[v(s') | s, a]`` as an ``(S, A)`` table."""
        return (self.transition_matrix @ v).reshape(self.n_states, self.n_actions)


def check_policy(policy: np.ndarray, n_states: int | None = None, n_actions: int | None = None) -> np.ndarray:
    """Validate a policy table and return it as a float array."""
    pi = np.asarray(policy, dtype=float)
    if pi.ndim != 2:
        raise ValueError(f"policy must be a 2-d table, got shape {pi.shape}")
    if n_states is not None and n_actions is not None and pi.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP {(n_states, n_actions)}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > _ROW_ATOL:
        raise ValueError("policy rows must be probability vectors")
    return pi


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def deterministic_policy(actions: np.ndarray, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def mix_policies(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    """Rowwise mixture ``w * a + (1 - w) * b``."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {w}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"policy shapes differ: {a.shape} vs {b.shape}")
    if w == 0.0:
        return b.copy()
    if w == 1.0:
        return a.copy()
    mixed = w * a + (1.0 - w) * b
    return mixed / mixed.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Gridworld


@dataclass(frozen=True)
class GridSpec:
    """Deterministic gridworld layout.

    Cells are ``(x, y)`` with ``x`` growing to the right and ``y`` growing
    upwards, so ``(0, 0)`` is the bottom-left corner. State index is
    ``y * width + x``. When ``good_state`` or ``noisy_cells`` are left unset
    they default to the top-right corner and the left and bottom walls.
    """

    width: int = 15
    height: int = 15
    good_state: tuple[int, int] | None = None
    noisy_cells: frozenset[tuple[int, int]] | None = None
    good_reward: float = 1.0
    noise_mean: float = -0.5
    noise_std: float = 1.0

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise ValueError(f"grid dimensions must be positive integers, got {self.width}x{self.height}")
        good = self.good_state if self.good_state is not None else (self.width - 1, self.height - 1)
        good = (int(good[0]), int(good[1]))
        if self.noisy_cells is None:
            noisy = frozenset(
                (x, y) for x in range(self.width) for y in range(self.height) if x == 0 or y == 0
            ) - {good}
        else:
            noisy = frozenset((int(x), int(y)) for x, y in self.noisy_cells)
        for cell in {good} | noisy:
            if not self.contains(cell):
                raise ValueError(f"cell {cell} lies outside the {self.width}x{self.height} grid")
        if good in noisy:
            raise ValueError("noisy_cells must not contain the good state")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "good_state", good)
        object.__setattr__(self, "noisy_cells", noisy)

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def contains(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def state(self, x: int, y: int) -> int:
        return y * self.width + x

    def cell(self, s: int) -> tuple[int, int]:
        return s % self.width, s // self.width

    def step(self, s: int, a: int) -> int:
        x, y = self.cell(s)
        dx, dy = _MOVES[a]
        nx = min(max(x + dx, 0), self.width - 1)
        ny = min(max(y + dy, 0), self.height - 1)
        return self.state(nx, ny)


def build_gridworld(spec: GridSpec, discount: float = 0.9) -> TabularMdp:
    S, A = spec.n_states, len(_MOVES)
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            P[s, a, spec.step(s, a)] = 1.0
    r = np.zeros((S, A))
    std = np.zeros((S, A))
    for cell in spec.noisy_cells:
        r[spec.state(*cell)] = spec.noise_mean
        std[spec.state(*cell)] = spec.noise_std
    r[spec.state(*spec.good_state)] = spec.good_reward
    return TabularMdp(P, r, np.full(S, 1.0 / S), discount, reward_std=std)


def down_left_policy(spec: GridSpec, mode: str = "half_down_half_left") -> np.ndarray:
    """The maximally suboptimal gridworld policy that heads down and left."""
    if mode not in SUBOPTIMAL_MODES:
        raise ValueError(f"unknown suboptimal policy mode {mode!r}; expected one of {SUBOPTIMAL_MODES}")
    row = np.zeros(len(_MOVES))
    if mode == "half_down_half_left":
        row[[DOWN, LEFT]] = 0.5
    elif mode == "all_down":
        row[DOWN] = 1.0
    else:
        row[LEFT] = 1.0
    return np.tile(row, (spec.n_states, 1))


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, discount: float = 0.9,
               reward_std: float = 0.0) -> TabularMdp:
    """Dense random MDP with Dirichlet rows and uniform rewards in [-1, 1]."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMdp(P, r, rho, discount, reward_std=np.full((n_states, n_actions), reward_std))


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


# ---------------------------------------------------------------------------
# Exact dynamic programming


def evaluate_q(reward: np.ndarray, transitions: sp.spmatrix, policy: np.ndarray, discount: float,
               tol: float = 1e-10, n_sweeps: int = 0, init: np.ndarray | None = None) -> np.ndarray:
    """Iterate the policy evaluation backup ``Q <- r + discount * P (pi . Q)``.

    With ``n_sweeps > 0`` exactly that many synchronous backups are applied;
    with ``n_sweeps == 0`` backups continue until the sup-norm change of one
    backup is at most ``tol``. ``transitions`` is a sparse ``(S*A, S)`` matrix.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A = reward.shape
    q = np.array(reward if init is None else init, dtype=float)
    if q.shape != (S, A):
        raise ValueError(f"initial Q has shape {q.shape}, expected {(S, A)}")

    def backup(q):
        v = np.einsum("sa,sa->s", policy, q)
        return reward + discount * (transitions @ v).reshape(S, A)

    if n_sweeps > 0:
        for _ in range(n_sweeps):
            q = backup(q)
        return q
    while True:
        new = backup(q)
        if np.max(np.abs(new - q)) <= tol:
            return new
        q = new


def exact_q(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    return evaluate_q(mdp.reward_mean, mdp.transition_matrix, pi, mdp.discount, tol=tol)


def state_values(q: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return np.einsum("sa,sa->s", policy, q)


def policy_transition(mdp: TabularMdp, policy: np.ndarray) -> sp.csr_matrix:
    """State-to-state transition matrix under ``policy``."""
    S, A = mdp.n_states, mdp.n_actions
    rows = sp.csr_matrix((np.ravel(policy), np.arange(S * A), np.arange(0, S * A + 1, A)), shape=(S, S * A))
    return (rows @ mdp.transition_matrix).tocsr()


def policy_values(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """``V^pi`` by a sparse direct solve of ``(I - gamma P_pi) V = r_pi``."""
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    lhs = sp.identity(mdp.n_states, format="csr") - mdp.discount * policy_transition(mdp, pi)
    return np.atleast_1d(spla.spsolve(lhs.tocsc(), state_values(mdp.reward_mean, pi)))


def j_value(mdp: TabularMdp, policy: np.ndarray) -> float:
    """Expected discounted return from the initial distribution."""
    return float(mdp.initial_dist @ policy_values(mdp, policy))


def discounted_visitation(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Normalized discounted state occupancy ``(1 - gamma) sum_t gamma^t P(s_t = s)``.

    Solved directly from the flow equation ``d = (1 - gamma) rho + gamma P_pi^T d``.
    """
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    g = mdp.discount
    lhs = sp.identity(mdp.n_states, format="csr") - g * policy_transition(mdp, pi).T
    d = np.atleast_1d(spla.spsolve(lhs.tocsc(), (1.0 - g) * mdp.initial_dist))
    d = np.clip(d, 0.0, None)
    total = d.sum()
    if abs(total - 1.0) > max(tol, 1e-8):
        raise ArithmeticError(f"visitation does not normalize (sum={total})")
    return d / total


def greedy(q: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Greedy action per state; near-ties go to the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def optimal_q(mdp: TabularMdp, tol: float = 1e-10) -> np.ndarray:
    q = mdp.reward_mean.copy()
    while True:
        new = mdp.reward_mean + mdp.discount * mdp.expected_next(q.max(axis=1))
        if np.max(np.abs(new - q)) <= tol:
            return new
        q = new


def optimal_policy(mdp: TabularMdp, tol: float = 1e-10) -> np.ndarray:
    """Deterministic greedy policy from value iteration."""
    q = optimal_q(mdp, tol)
    return deterministic_policy(greedy(q, tie_tol=max(10 * tol, 1e-9)), mdp.n_actions)
