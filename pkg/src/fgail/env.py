"""Desk-scale control tasks, tabular value iteration, rollouts and demo files.

Two built-in environments:

* ``gridworld``: 5x5 grid, deterministic moves, start in the top-left
  corner, absorbing goal in the bottom-right. Acting in the goal pays 1 and
  ends the episode. Observations are one-hot cell indicators.
* ``cartpole_lite``: the textbook cart-pole (Euler integration, 0.02 s
  steps), 2 actions, +1 per step, 200-step horizon.

Episode returns are scored with ``env.return_discount``: the gridworld
uses its discount factor, so an optimal rollout scores exactly V*(start);
cart-pole counts steps survived.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Finite MDP. ``terminal[s]`` means acting in ``s`` ends the episode."""

    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial: np.ndarray  # (S,)
    gamma: float
    horizon: int
    terminal: np.ndarray = None  # (S,) bool

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        rho = np.asarray(self.initial, dtype=float)
        S, A, S2 = P.shape
        if S2 != S or R.shape != (S, A) or rho.shape != (S,):
            raise ConfigurationError("inconsistent MDP array shapes")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-9, rtol=0):
            raise ConfigurationError("transition rows must be distributions")
        if abs(rho.sum() - 1.0) > 1e-9:
            raise ConfigurationError("initial distribution must sum to 1")
        if not np.all(np.isfinite(R)):
            raise ConfigurationError("rewards must be finite")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        term = np.zeros(S, bool) if self.terminal is None else np.asarray(self.terminal, bool)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial", rho)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]


def value_iteration_expert(spec: MdpSpec, tolerance=1e-10, max_iterations=100_000):
    """Greedy expert and V* by value iteration.

    Returns ``(policy, V)`` with ``policy`` an (S, A) table of one-hot rows
    (ties go to the lowest action index).
    """
    if tolerance <= 0:
        raise ConfigurationError("tolerance must be positive")
    P, R = spec.transition, spec.reward
    cont = spec.gamma * (~spec.terminal).astype(float)
    V = np.zeros(spec.n_states)
    for _ in range(max_iterations):
        Q = R + cont[:, None] * (P @ V)
        V_new = Q.max(axis=1)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual < tolerance:
            break
    Q = R + cont[:, None] * (P @ V)
    policy = np.zeros_like(R)
    policy[np.arange(spec.n_states), np.argmax(Q, axis=1)] = 1.0
    return policy, V


def finite_horizon_return(spec: MdpSpec, policies, discount=None):
    """Exact expected return of stochastic policy tables over ``spec.horizon`` steps.

    ``policies`` is (S, A) or a stack (N, S, A); the result is per policy.
    """
    pol = np.asarray(policies, dtype=float)
    single = pol.ndim == 2
    if single:
        pol = pol[None]
    disc = spec.gamma if discount is None else discount
    r_pi = np.einsum("nsa,sa->ns", pol, spec.reward)
    P_pi = np.einsum("nsa,sat->nst", pol, spec.transition)
    alive = (~spec.terminal).astype(float)
    V = np.zeros(pol.shape[:2])
    for _ in range(spec.horizon):
        V = r_pi + disc * alive * np.einsum("nst,nt->ns", P_pi, V)
    out = V @ spec.initial
    return float(out[0]) if single else out


# environments -----------------------------------------------------------


class GridWorld:
    env_id = "gridworld"
    ACTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left
    ACTION_NAMES = ("up", "right", "down", "left")

    def __init__(self, size=5, start=(0, 0), goal=None, gamma=0.99, horizon=50):
        self.size = size
        self.start = tuple(start)
        self.goal = (size - 1, size - 1) if goal is None else tuple(goal)
        self.gamma = gamma
        self.horizon = horizon
        self.return_discount = gamma
        self.absorbing_terminal = True  # the goal is absorbing; episodes just stop there
        self.n_actions = 4
        self.obs_dim = size * size
        self.state_dim = 2
        self.mdp = self._build_mdp()

    def index(self, cell):
        return int(cell[0]) * self.size + int(cell[1])

    def cell(self, index):
        return divmod(int(index), self.size)

    def _move(self, cell, action):
        dr, dc = self.ACTIONS[action]
        r = min(max(cell[0] + dr, 0), self.size - 1)
        c = min(max(cell[1] + dc, 0), self.size - 1)
        return r, c

    def _build_mdp(self):
        S, A = self.size * self.size, self.n_actions
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        terminal = np.zeros(S, bool)
        g = self.index(self.goal)
        for s in range(S):
            for a in range(A):
                if s == g:
                    P[s, a, s] = 1.0
                    R[s, a] = 1.0
                else:
                    P[s, a, self.index(self._move(self.cell(s), a))] = 1.0
        terminal[g] = True
        rho = np.zeros(S)
        rho[self.index(self.start)] = 1.0
        return MdpSpec(P, R, rho, self.gamma, self.horizon, terminal)

    def reset(self, rng):
        return np.array(self.start, dtype=float)

    def step(self, state, action, rng):
        """Returns ``(next_state, reward, done)``; ``rng`` is unused (deterministic moves)."""
        action = _check_action(action, self.n_actions)
        cell = (int(state[0]), int(state[1]))
        if cell == self.goal:
            return np.array(cell, dtype=float), 1.0, True
        return np.array(self._move(cell, action), dtype=float), 0.0, False

    def features(self, states):
        states = np.asarray(states, dtype=float).reshape(-1, 2)
        idx = states[:, 0].astype(int) * self.size + states[:, 1].astype(int)
        out = np.zeros((len(idx), self.obs_dim))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def policy_table(self, probs_fn):
        """Tabulate a feature->probabilities policy over every cell."""
        cells = np.array([self.cell(s) for s in range(self.obs_dim)], dtype=float)
        return probs_fn(self.features(cells))


class CartPoleLite:
    env_id = "cartpole_lite"
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def __init__(self, gamma=0.99, horizon=200):
        self.gamma = gamma
        self.horizon = horizon
        self.return_discount = 1.0
        self.absorbing_terminal = False  # falling over is failure, not an absorbing goal
        self.n_actions = 2
        self.obs_dim = 4
        self.state_dim = 4

    def reset(self, rng):
        return rng.uniform(-0.05, 0.05, size=4)

    def step(self, state, action, rng):
        action = _check_action(action, self.n_actions)
        x, x_dot, theta, theta_dot = (float(v) for v in state)
        force = self.force_mag if action == 1 else -self.force_mag
        total_mass = self.masspole + self.masscart
        polemass_length = self.masspole * self.length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        done = abs(x) > self.x_limit or abs(theta) > self.theta_limit
        return np.array([x, x_dot, theta, theta_dot]), 1.0, bool(done)

    def features(self, states):
        return np.asarray(states, dtype=float).reshape(-1, 4)


ENVIRONMENTS = {"gridworld": GridWorld, "cartpole_lite": CartPoleLite}


def make_env(env_id, **kwargs):
    try:
        return ENVIRONMENTS[env_id](**kwargs)
    except KeyError:
        raise ConfigurationError(
            f"unknown env_id {env_id!r}; expected one of {sorted(ENVIRONMENTS)}"
        ) from None


def _check_action(action, n_actions):
    a = int(action)
    if a != action or not 0 <= a < n_actions:
        raise ConfigurationError(f"invalid action {action!r} for {n_actions} actions")
    return a


# trajectories -----------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    next_states: np.ndarray  # (T, state_dim)
    dones: np.ndarray  # (T,) bool, only ever true at the last step
    seed: int = 0
    env_id: str = ""

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.env_id == other.env_id
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("states", "actions", "rewards", "next_states", "dones")
            )
        )

    def discounted_return(self, discount):
        return float(np.sum(self.rewards * discount ** np.arange(len(self))))


@dataclass
class DemoSet:
    trajectories: list
    env_id: str
    source_policy_id: str = "expert"

    def __post_init__(self):
        for t in self.trajectories:
            if t.env_id and t.env_id != self.env_id:
                raise ConfigurationError(
                    f"trajectory from {t.env_id!r} in a {self.env_id!r} demo set"
                )

    def pairs(self):
        states = np.concatenate([t.states for t in self.trajectories])
        actions = np.concatenate([t.actions for t in self.trajectories])
        return states, actions


def _sample_action(probs, rng):
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def rollout(env, policy: Callable, rng, max_steps=None, seed=0) -> Trajectory:
    """One episode. ``policy`` maps a (1, obs_dim) feature row to action probabilities."""
    max_steps = env.horizon if max_steps is None else max_steps
    states, actions, rewards, nexts, dones = [], [], [], [], []
    s = env.reset(rng)
    for _ in range(max_steps):
        probs = np.asarray(policy(env.features(s)), dtype=float).reshape(-1)
        a = _sample_action(probs, rng)
        s2, r, done = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        nexts.append(s2)
        dones.append(done)
        s = s2
        if done:
            break
    return Trajectory(
        np.array(states, dtype=float),
        np.array(actions, dtype=int),
        np.array(rewards, dtype=float),
        np.array(nexts, dtype=float),
        np.array(dones, dtype=bool),
        seed,
        env.env_id,
    )


def trajectory_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def sample_trajectories(env, policy, count, seed, max_steps=None):
    """``count`` episodes; trajectory ``i`` uses its own generator seeded by (seed, i)."""
    if count < 1:
        raise ConfigurationError("count must be at least 1")
    return [
        rollout(env, policy, trajectory_rng(seed, i), max_steps, seed=seed * 1_000_003 + i)
        for i in range(count)
    ]


def sample_pairs(env, policy, min_pairs, seed):
    """Whole episodes until at least ``min_pairs`` state-action pairs are collected."""
    trajs, total, i = [], 0, 0
    while total < min_pairs:
        t = rollout(env, policy, trajectory_rng(seed, i), seed=seed * 1_000_003 + i)
        trajs.append(t)
        total += len(t)
        i += 1
    return trajs


def normalized_return(raw, expert_mean, random_mean):
    if expert_mean == random_mean:
        raise ConfigurationError("expert and random returns coincide; cannot normalise")
    return (raw - random_mean) / (expert_mean - random_mean)


def evaluate_policy(env, policy, episodes=50, seed=0):
    """Mean and standard deviation of the scored return over ``episodes`` rollouts."""
    trajs = sample_trajectories(env, policy, episodes, seed)
    returns = np.array([t.discounted_return(env.return_discount) for t in trajs])
    return float(returns.mean()), float(returns.std())


def uniform_policy(n_actions):
    probs = np.full(n_actions, 1.0 / n_actions)
    return lambda feats: probs


def table_policy(env, table):
    """Policy from an (S, A) table for the gridworld (features are one-hot)."""
    table = np.asarray(table, dtype=float)
    return lambda feats: table[int(np.argmax(feats[0]))]


# demo files -------------------------------------------------------------


def _traj_to_json(t: Trajectory):
    transitions = [
        {
            "s": t.states[i].tolist(),
            "a": int(t.actions[i]),
            "r": float(t.rewards[i]),
            "done": bool(t.dones[i]),
            "s_next": t.next_states[i].tolist(),
        }
        for i in range(len(t))
    ]
    return {"env_id": t.env_id, "seed": int(t.seed), "transitions": transitions}


def _traj_from_json(doc) -> Trajectory:
    tr = doc["transitions"]
    states = np.array([x["s"] for x in tr], dtype=float)
    nexts = []
    for i, x in enumerate(tr):
        if "s_next" in x:
            nexts.append(x["s_next"])
        elif i + 1 < len(tr):
            nexts.append(tr[i + 1]["s"])
        else:
            nexts.append(x["s"])
    return Trajectory(
        states.reshape(len(tr), -1),
        np.array([x["a"] for x in tr], dtype=int),
        np.array([x["r"] for x in tr], dtype=float),
        np.array(nexts, dtype=float).reshape(len(tr), -1),
        np.array([x["done"] for x in tr], dtype=bool),
        int(doc["seed"]),
        doc["env_id"],
    )


def write_demos(path, trajectories):
    """JSON lines, one trajectory per line."""
    with open(path, "w") as fh:
        for t in trajectories:
            fh.write(json.dumps(_traj_to_json(t)) + "\n")


def read_demos(path, env_id=None) -> DemoSet:
    trajs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                trajs.append(_traj_from_json(json.loads(line)))
    if not trajs:
        raise ConfigurationError(f"{path} holds no trajectories")
    found = trajs[0].env_id
    if env_id is not None and found != env_id:
        raise ConfigurationError(f"demo file is for {found!r}, config asks for {env_id!r}")
    return DemoSet(trajs, found)
