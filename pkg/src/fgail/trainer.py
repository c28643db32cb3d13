"""Alg. 1 end to end, the fixed-divergence baselines, behaviour cloning and
plain TRPO on true rewards (used to train the cart-pole expert).

One fgail epoch:

1. sample whole learner episodes until ``pairs_per_epoch`` pairs are
   collected (line 2);
2. draw equal-size batches from the learner pairs and the demos (line 3);
3. one joint Adam ascent step on (omega, phi) from a single backward
   pass, then clip phi's inner weights at zero (line 4);
4. estimate the minimum gap over the observed input range and shift b_s
   (line 5);
5. one TRPO step on the per-step reward f*(T(s,a)) - c log pi(a|s) with
   GAE advantages, followed by a value-net refit (line 6).

``gail`` and ``rkl_vim`` run the same loop with the closed-form JS* / RKL
conjugate held fixed and no shift.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .conjugate import (
    FicnnParams,
    eval_fstar,
    ficnn_graph,
    init_ficnn,
    project_nonneg,
    project_slopes,
    zero_gap,
)
from .diffcore import AdamState, adam_step
from .divergence import DivergenceSpec, closed_form, learned
from .env import DemoSet, Trajectory, sample_pairs, uniform_policy, evaluate_policy
from .errors import ConfigurationError, NumericError
from .nets import (
    MlpParams,
    log_prob_and_entropy,
    log_prob_graph,
    mlp_apply,
    mlp_jvp,
    mlp_vjp,
    mlp_graph,
    policy_distribution,
    policy_net,
    reward_graph,
    reward_inputs,
    reward_net,
    softmax,
    value_net,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fgail", "gail", "rkl_vim", "bc")
BASELINE_SPECS = {"gail": "JS_star", "rkl_vim": "RKL"}


# configuration ----------------------------------------------------------


def _from_dict(cls, data):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected an object for {cls.__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None:
            kwargs[key] = _from_dict(sub, value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def state(self, n):
        if not self.learning_rate > 0:
            raise ConfigurationError("Adam learning rate must be positive")
        return AdamState.zeros(n, self.learning_rate, self.beta1, self.beta2, self.epsilon)


@dataclass(frozen=True)
class TrpoConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_steps: int = 10
    value_epochs: int = 5
    value_batch: int = 64
    value_learning_rate: float = 1e-3


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95


@dataclass(frozen=True)
class GapConfig:
    step_size: float = 0.05
    iterations: int = 200
    initial_u: float = 0.0
    grid_points: int = 512
    range_margin: float = 0.5  # bounds = observed u range widened by this fraction per side
    min_width: float = 1.0
    tolerance: float = 1e-6
    max_rounds: int = 10
    project_slopes: bool = True  # keep f*'(lo) <= 1 <= f*'(hi) so the minimiser is interior


@dataclass(frozen=True)
class FicnnConfig:
    layer_count: int = 4
    nodes_per_layer: int = 100
    init_scale: float = 0.1
    output_activation: str = "identity"


@dataclass(frozen=True)
class BcConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 10
    train_fraction: float = 0.7


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "fgail"
    epochs: int = 300
    pairs_per_epoch: int = 200
    discriminator_steps: int = 1
    adam_reward: AdamConfig = field(default_factory=AdamConfig)
    adam_ficnn: AdamConfig = field(default_factory=AdamConfig)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    gae: GaeConfig = field(default_factory=GaeConfig)
    gap: GapConfig = field(default_factory=GapConfig)
    ficnn: FicnnConfig = field(default_factory=FicnnConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    entropy_coeff: float = 1e-3
    policy_hidden: tuple = (100, 100)
    reward_hidden: tuple = (100, 100, 100)
    reward_activations: tuple = ("tanh", "tanh", "identity")
    stats_window: int = 5
    reward_bound: float | None = 2.0  # fgail: T = c*tanh(v/c); None = linear output
    absorbing: bool | None = None  # pad terminated episodes to the horizon; None = env default
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.pairs_per_epoch < 1:
            raise ConfigurationError("pairs_per_epoch must be at least 1")
        if self.discriminator_steps < 1:
            raise ConfigurationError("discriminator_steps must be at least 1")
        if not self.trpo.max_kl > 0:
            raise ConfigurationError("max_kl must be positive")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self.gae, name) <= 1.0:
                raise ConfigurationError(f"gae.{name} must lie in [0, 1]")
        if self.entropy_coeff < 0:
            raise ConfigurationError("entropy_coeff must be non-negative")

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data)

    def to_dict(self):
        return dataclasses.asdict(self)


_NESTED = {
    ("TrainConfig", "adam_reward"): AdamConfig,
    ("TrainConfig", "adam_ficnn"): AdamConfig,
    ("TrainConfig", "trpo"): TrpoConfig,
    ("TrainConfig", "gae"): GaeConfig,
    ("TrainConfig", "gap"): GapConfig,
    ("TrainConfig", "ficnn"): FicnnConfig,
    ("TrainConfig", "bc"): BcConfig,
}


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    objective_value: float
    mean_env_return: float
    normalized_return: float
    gap_delta: float
    entropy: float
    trpo_accepted: bool = True
    mean_kl: float = 0.0

    def __post_init__(self):
        for f in ("objective_value", "mean_env_return", "normalized_return", "gap_delta", "entropy"):
            if not math.isfinite(getattr(self, f)):
                raise NumericError(f"epoch {self.epoch}: non-finite {f}")


# seeds ------------------------------------------------------------------


def derived_seed(*parts) -> int:
    """A 32-bit seed derived deterministically from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _rng(*parts):
    return np.random.default_rng([int(p) for p in parts])


# batches ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PairBatch:
    inputs: np.ndarray  # reward-net inputs: features ++ one-hot action
    states: np.ndarray  # raw env states (used for feature extraction)
    actions: np.ndarray

    def __len__(self):
        return len(self.actions)


def make_batch(env, states, actions) -> PairBatch:
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=int)
    feats = env.features(states)
    return PairBatch(reward_inputs(feats, actions, env.n_actions), states, actions)


def padding_length(traj: Trajectory, horizon):
    """Absorbing steps needed to extend an episode that terminated early to the horizon."""
    return max(horizon - len(traj), 0) if len(traj) and traj.dones[-1] else 0


def trajectory_pairs(trajs, horizon=None):
    """All state-action pairs; with ``horizon`` set, terminated episodes are
    padded with their final pair repeated in the absorbing terminal state."""
    states, actions = [], []
    for t in trajs:
        states.append(t.states)
        actions.append(t.actions)
        m = padding_length(t, horizon) if horizon else 0
        if m:
            states.append(np.repeat(t.next_states[-1:], m, axis=0))
            actions.append(np.repeat(t.actions[-1:], m))
    return np.concatenate(states), np.concatenate(actions)


def draw_batches(env, learner_trajs, demos: DemoSet, rng, size=None, horizon=None):
    """Equal-size learner and demo batches (Alg. 1 line 3).

    The learner batch is drawn without replacement from this epoch's pairs;
    the demo batch has the same size and is drawn with replacement only when
    the demo set holds fewer pairs.
    """
    ls, la = trajectory_pairs(learner_trajs, horizon)
    es, ea = trajectory_pairs(demos.trajectories, horizon)
    n = len(la) if size is None else min(size, len(la))
    li = rng.permutation(len(la))[:n]
    ei = rng.choice(len(ea), size=n, replace=len(ea) < n)
    return make_batch(env, es[ei], ea[ei]), make_batch(env, ls[li], la[li])


# the discriminator ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Discriminator:
    """T_omega plus either a learnable conjugate or a fixed closed-form spec."""

    reward: MlpParams
    spec: DivergenceSpec
    ficnn: FicnnParams | None = None
    bounds: tuple | None = None  # domain on which the zero gap is certified

    @property
    def learnable(self):
        return self.ficnn is not None

    def fstar_np(self, u):
        u = np.asarray(u, dtype=float)
        if self.learnable:
            return eval_fstar(self.ficnn, u)
        self.spec.check_domain(u)
        return self.spec.fstar(u)

    def u_values(self, batch: PairBatch):
        raw = mlp_apply(self.reward, batch.inputs)
        u = self.spec.final_activation(dc.Tensor(raw)).data[:, 0]
        if not self.learnable:
            self.spec.check_domain(u)
        return u

    def policy_rewards(self, batch: PairBatch):
        return np.asarray(self.fstar_np(self.u_values(batch)), dtype=float)


def objective_graph(tensor_sets, inputs, disc: Discriminator):
    """Tensor value of Ê_DE[T] − Ê_Di[f*(T)]."""
    expert, learner = inputs
    w = tensor_sets[0]
    acts = disc.reward.activations
    uE = reward_graph(w, expert.inputs, acts, disc.spec)
    uI = reward_graph(w, learner.inputs, acts, disc.spec)
    if disc.learnable:
        fI = ficnn_graph(tensor_sets[1], uI, disc.ficnn.layer_count, disc.ficnn.output_activation)
    else:
        fI = disc.spec.conjugate(uI)
    return uE.mean() - fI.mean()


def objective_value(disc: Discriminator, expert: PairBatch, learner: PairBatch) -> float:
    """Ê_DE[T] − Ê_Di[f*(T)] evaluated in plain numpy."""
    uE = disc.u_values(expert)
    fI = disc.fstar_np(disc.u_values(learner))
    return float(np.mean(uE) - np.mean(fI))


@dataclass
class DiscriminatorOptim:
    reward: AdamState
    ficnn: AdamState | None = None


def discriminator_step(disc: Discriminator, expert: PairBatch, learner: PairBatch,
                       optim: DiscriminatorOptim, epoch=None):
    """One joint Adam ascent step on (omega, phi); phi is then clipped to the FICNN cone."""
    if len(expert) != len(learner):
        raise ConfigurationError("demo and learner batches must have the same size")
    params = [disc.reward.vector] + ([disc.ficnn.vector] if disc.learnable else [])
    try:
        value, grads = dc.value_and_grads(
            lambda ts, inp: objective_graph(ts, inp, disc), params, (expert, learner)
        )
    except NumericError as exc:
        where = f" at epoch {epoch}" if epoch is not None else ""
        raise NumericError(f"discriminator step{where}: {exc}", segment=exc.segment) from exc
    new_w, optim.reward = adam_step(disc.reward.vector, grads[0], optim.reward, "ascend")
    reward = disc.reward.with_vector(new_w)
    ficnn = disc.ficnn
    if disc.learnable:
        new_phi, optim.ficnn = adam_step(disc.ficnn.vector, grads[1], optim.ficnn, "ascend")
        ficnn = project_nonneg(disc.ficnn.with_vector(new_phi))
    return dataclasses.replace(disc, reward=reward, ficnn=ficnn), value


def gap_bounds(u, gap: GapConfig, reward_bound=None):
    """Domain on which the zero gap is enforced.

    With a bounded reward signal this is the whole range ``[-c, c]`` of
    ``T``; otherwise the observed range widened by ``range_margin`` per side.
    """
    if reward_bound is not None:
        return -float(reward_bound), float(reward_bound)
    lo, hi = float(np.min(u)), float(np.max(u))
    width = max(hi - lo, gap.min_width)
    mid = 0.5 * (lo + hi)
    lo, hi = mid - 0.5 * width, mid + 0.5 * width
    return lo - gap.range_margin * width, hi + gap.range_margin * width


def zero_gap_step(ficnn: FicnnParams, bounds, gap: GapConfig = GapConfig()):
    """Alg. 1 line 5: estimate the minimum gap on ``bounds`` and shift it away.

    A shift by delta moves the certified domain by delta/2 (Proposition 1).
    To keep the certificate on ``bounds`` itself, estimate-and-shift repeats
    until the gap on ``bounds`` is within ``gap.tolerance`` (the first shift
    does nearly all of the work).

    Returns ``(shifted_params, first_estimate, bounds)``; the estimate's
    ``delta`` is the total shift applied.
    """
    total, first = 0.0, None
    for _ in range(gap.max_rounds):
        if gap.project_slopes:
            ficnn = project_slopes(ficnn, bounds)
        ficnn, est, _ = zero_gap(ficnn, bounds, gap.step_size, gap.iterations, gap.initial_u,
                                 gap.grid_points)
        first = first or est
        total += est.delta
        if abs(est.delta) <= gap.tolerance:
            break
    return ficnn, dataclasses.replace(first, delta=total), tuple(bounds)


# GAE, TRPO and the value fit --------------------------------------------


def gae_advantages(rewards, values, gamma, lam, last_value=0.0):
    """A_t = Σ_l (γλ)^l δ_{t+l} with δ_t = r_t + γ V(s_{t+1}) − V(s_t).

    ``last_value`` is V of the state after the final step: 0 for a terminal
    step, the value estimate for a trajectory cut off by the horizon.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ConfigurationError("per-step rewards must match the trajectory length")
    nxt = np.append(values[1:], last_value)
    deltas = rewards + gamma * nxt - values
    adv = np.zeros_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_returns(rewards, gamma, last_value=0.0):
    out = np.zeros(len(rewards))
    acc = last_value
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass(frozen=True)
class TrpoResult:
    policy: MlpParams
    accepted: bool
    mean_kl: float
    surrogate_gain: float
    message: str = ""


def _categorical_kl(p_old, p_new):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_old > 0, p_old * (np.log(p_old) - np.log(np.clip(p_new, 1e-300, None))), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def _conjugate_gradient(Avp, b, iters, tol=1e-10):
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ap = Avp(p)
        pAp = p @ Ap
        if not pAp > 0:
            return None
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def trpo_step(policy: MlpParams, feats, actions, advantages, config: TrpoConfig,
              normalize=True) -> TrpoResult:
    """Natural-gradient step on the importance-weighted surrogate under a KL trust region."""
    feats = np.asarray(feats, dtype=float)
    actions = np.asarray(actions, dtype=int)
    adv = np.asarray(advantages, dtype=float)
    if normalize and adv.size > 1 and adv.std() > 1e-8:
        adv = (adv - adv.mean()) / adv.std()
    n = len(actions)
    logits_old = mlp_apply(policy, feats)
    p_old = softmax(logits_old)
    logp_old = np.log(np.clip(p_old[np.arange(n), actions], 1e-300, None))

    def surrogate(pol):
        p = policy_distribution(pol, feats)
        ratio = np.exp(np.log(np.clip(p[np.arange(n), actions], 1e-300, None)) - logp_old)
        return float(np.mean(ratio * adv)), p

    ts = policy.vector.tensors()
    obj = (log_prob_graph(ts, feats, actions, policy.activations) * adv).mean()
    obj.backward()
    g = policy.vector.flatten_grads({k: t.grad for k, t in ts.items()})
    if not np.any(g):
        return TrpoResult(policy, False, 0.0, 0.0, "zero policy gradient")

    def fvp(v):
        _, jv = mlp_jvp(policy, feats, v)
        w = p_old * jv - p_old * np.sum(p_old * jv, axis=1, keepdims=True)
        return mlp_vjp(policy, feats, w / n) + config.cg_damping * v

    x = _conjugate_gradient(fvp, g, config.cg_iters)
    if x is None or not np.all(np.isfinite(x)):
        log.warning("TRPO: conjugate gradient failed; skipping policy update")
        return TrpoResult(policy, False, 0.0, 0.0, "conjugate gradient failed")
    shs = 0.5 * x @ fvp(x)
    if not shs > 0:
        log.warning("TRPO: non-positive curvature; skipping policy update")
        return TrpoResult(policy, False, 0.0, 0.0, "non-positive curvature")
    full_step = x * math.sqrt(config.max_kl / shs)
    base, _ = surrogate(policy)
    frac = 1.0
    for _ in range(config.backtrack_steps):
        cand = policy.with_values(policy.vector.values + frac * full_step)
        try:
            value, p_new = surrogate(cand)
        except NumericError:
            frac *= 0.5
            continue
        kl = _categorical_kl(p_old, p_new)
        if value > base and kl <= config.max_kl:
            return TrpoResult(cand, True, kl, value - base)
        frac *= 0.5
    return TrpoResult(policy, False, 0.0, 0.0, "line search found no improvement")


def fit_value(value: MlpParams, state: AdamState, feats, targets, config: TrpoConfig, rng):
    """A few epochs of minibatch Adam on the mean-squared error."""
    feats = np.asarray(feats, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1, 1)
    n = len(targets)

    def loss(ts, inp):
        x, y = inp
        d = mlp_graph(ts[0], x, value.activations) - y
        return (d * d).mean()

    for _ in range(config.value_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.value_batch):
            idx = order[start : start + config.value_batch]
            _, (g,) = dc.value_and_grads(loss, [value.vector], (feats[idx], targets[idx]))
            vec, state = adam_step(value.vector, g, state, "descend")
            value = value.with_vector(vec)
    return value, state


@dataclass
class PolicyLearner:
    """Policy, value net and the value optimiser state."""

    policy: MlpParams
    value: MlpParams
    value_optim: AdamState

    @classmethod
    def create(cls, rng, obs_dim, n_actions, hidden, value_lr):
        pol = policy_net(rng, obs_dim, n_actions, hidden)
        val = value_net(rng, obs_dim, hidden)
        return cls(pol, val, AdamState.zeros(len(val.vector), value_lr))

    def act_fn(self):
        pol = self.policy
        return lambda feats: policy_distribution(pol, feats)[0]


def policy_update(learner: PolicyLearner, env, trajs, per_step_rewards, config: TrainConfig, rng,
                  terminal_values=None):
    """GAE + TRPO + value refit on a list of trajectories.

    ``terminal_values[i]`` replaces V = 0 after a terminal step of trajectory
    ``i`` (the discounted value of its absorbing padding).
    """
    feats_list, acts, advs, rets = [], [], [], []
    gamma, lam = config.gae.gamma, config.gae.lam
    for i, (t, r) in enumerate(zip(trajs, per_step_rewards)):
        f = env.features(t.states)
        v = mlp_apply(learner.value, f)[:, 0]
        if t.dones[-1]:
            last = 0.0 if terminal_values is None else float(terminal_values[i])
        else:  # cut off by the horizon: bootstrap from the value estimate
            last = float(mlp_apply(learner.value, env.features(t.next_states[-1:]))[0, 0])
        advs.append(gae_advantages(r, v, gamma, lam, last))
        rets.append(discounted_returns(r, gamma, last))
        feats_list.append(f)
        acts.append(t.actions)
    feats = np.concatenate(feats_list)
    actions = np.concatenate(acts)
    result = trpo_step(learner.policy, feats, actions, np.concatenate(advs), config.trpo)
    value, vstate = fit_value(
        learner.value, learner.value_optim, feats, np.concatenate(rets), config.trpo, rng
    )
    return PolicyLearner(result.policy, value, vstate), result


def entropy_rewards(policy, env, traj, coeff):
    if coeff == 0:
        return np.zeros(len(traj))
    logp, _ = log_prob_and_entropy(policy, env.features(traj.states), traj.actions)
    return -coeff * logp


def mean_entropy(policy, feats):
    _, ent = log_prob_and_entropy(policy, feats, np.zeros(len(feats), dtype=int))
    return float(np.mean(ent))


# training ---------------------------------------------------------------


@dataclass
class TrainResult:
    policy: MlpParams
    value: MlpParams | None
    discriminator: Discriminator | None
    reports: list
    final_u: np.ndarray | None = None  # learner-pair u values from the final stats window
    error: Exception | None = None


def learned_spec(reward_bound=None):
    """Spec for fgail's T_omega: linear output, or ``c*tanh(v/c)`` with ``c = reward_bound``.

    The FICNN itself is attached to the :class:`Discriminator`, so the
    conjugate field here is never evaluated.
    """
    spec = closed_form("KL")
    if reward_bound is None:
        act = dc.identity
    else:
        c = float(reward_bound)
        if not c > 0:
            raise ConfigurationError("reward_bound must be positive")
        act = lambda v: dc.tanh(v * (1.0 / c)) * c  # noqa: E731
    return dataclasses.replace(spec, name="learned", final_activation=act)


def _score(env, trajs):
    return float(np.mean([t.discounted_return(env.return_discount) for t in trajs]))


def reference_returns(env, expert_policy, episodes=50, seed=0):
    """(expert_mean, random_mean) scored over ``episodes`` rollouts each."""
    expert_mean, _ = evaluate_policy(env, expert_policy, episodes, derived_seed(seed, 7))
    random_mean, _ = evaluate_policy(env, uniform_policy(env.n_actions), episodes, derived_seed(seed, 8))
    return expert_mean, random_mean


def train(config: TrainConfig, env, demos: DemoSet | None, reference=None,
          callback: Callable | None = None) -> TrainResult:
    """Run Alg. 1 (or a baseline) for ``config.epochs`` epochs.

    ``reference`` is ``(expert_mean, random_mean)`` for normalising returns.
    ``callback(epoch, disc, expert_batch, learner_batch, report)`` is called
    after every epoch. If an epoch fails, the error is stored on the result
    together with the reports gathered so far.
    """
    if config.algorithm == "bc":
        policy = train_bc(demos, config, env)
        return TrainResult(policy, None, None, [])
    if demos is None or not demos.trajectories:
        raise ConfigurationError("imitation training needs a non-empty demo set")
    if demos.env_id != env.env_id:
        raise ConfigurationError(f"demos are for {demos.env_id!r}, env is {env.env_id!r}")
    if reference is None:
        reference = (_score(env, demos.trajectories), None)
    expert_mean, random_mean = reference
    if random_mean is None:
        random_mean, _ = evaluate_policy(env, uniform_policy(env.n_actions), 50, derived_seed(config.seed, 8))

    seed = config.seed
    absorbing = getattr(env, "absorbing_terminal", False) if config.absorbing is None else config.absorbing
    horizon = env.horizon if absorbing else None
    init_rng = _rng(seed, 0)
    learner = PolicyLearner.create(
        init_rng, env.obs_dim, env.n_actions, config.policy_hidden, config.trpo.value_learning_rate
    )
    in_dim = env.obs_dim + env.n_actions
    reward = reward_net(init_rng, in_dim, config.reward_hidden, config.reward_activations)
    if config.algorithm == "fgail":
        fc = config.ficnn
        ficnn = init_ficnn(init_rng, fc.layer_count, fc.nodes_per_layer, fc.init_scale,
                           fc.output_activation)
        disc = Discriminator(reward, learned_spec(config.reward_bound), ficnn)
        optim = DiscriminatorOptim(config.adam_reward.state(len(reward.vector)),
                                   config.adam_ficnn.state(len(ficnn.vector)))
    else:
        disc = Discriminator(reward, closed_form(BASELINE_SPECS[config.algorithm]))
        optim = DiscriminatorOptim(config.adam_reward.state(len(reward.vector)))

    reports, window_u = [], []
    result = TrainResult(learner.policy, learner.value, disc, reports)
    for epoch in range(config.epochs):
        try:
            trajs = sample_pairs(env, learner.act_fn(), config.pairs_per_epoch,
                                 derived_seed(seed, 1, epoch))
            batch_rng = _rng(seed, 2, epoch)
            expert_b, learner_b = draw_batches(env, trajs, demos, batch_rng,
                                               config.pairs_per_epoch, horizon)

            if disc.learnable and epoch == 0:
                # start from a valid divergence (Alg. 1 input: shifted phi_0)
                bounds = gap_bounds(np.concatenate([disc.u_values(expert_b),
                                                    disc.u_values(learner_b)]), config.gap, config.reward_bound)
                ficnn, _, certified = zero_gap_step(disc.ficnn, bounds, config.gap)
                disc = dataclasses.replace(disc, ficnn=ficnn, bounds=certified)

            for _ in range(config.discriminator_steps):
                disc, _ = discriminator_step(disc, expert_b, learner_b, optim, epoch)

            gap_delta = 0.0
            if disc.learnable:
                u_all = np.concatenate([disc.u_values(expert_b), disc.u_values(learner_b)])
                bounds = gap_bounds(u_all, config.gap, config.reward_bound)
                ficnn, est, certified = zero_gap_step(disc.ficnn, bounds, config.gap)
                disc = dataclasses.replace(disc, ficnn=ficnn, bounds=certified)
                gap_delta = est.delta

            objective = objective_value(disc, expert_b, learner_b)

            rewards, terminal_values = imitation_rewards(disc, env, learner.policy, trajs,
                                                         config, horizon)
            learner, trpo = policy_update(learner, env, trajs, rewards, config,
                                          _rng(seed, 3, epoch), terminal_values)

            raw = _score(env, trajs)
            all_feats = np.concatenate([env.features(t.states) for t in trajs])
            report = EpochReport(
                epoch, objective, raw, _normalize(raw, expert_mean, random_mean), gap_delta,
                mean_entropy(learner.policy, all_feats), trpo.accepted, trpo.mean_kl,
            )
        except (NumericError, ConfigurationError) as exc:
            log.error("training aborted at epoch %d: %s", epoch, exc)
            result.error = exc
            break
        reports.append(report)
        if epoch >= config.epochs - config.stats_window:
            window_u.append(learner_b)
        log.info("epoch %d objective %.4f return %.3f normalized %.3f gap %.2e",
                 epoch, objective, raw, report.normalized_return, gap_delta)
        if callback is not None:
            callback(epoch, disc, expert_b, learner_b, report)

    result.policy, result.value, result.discriminator = learner.policy, learner.value, disc
    if window_u:
        result.final_u = np.concatenate([disc.u_values(b) for b in window_u])
    return result


def imitation_rewards(disc, env, policy, trajs, config, horizon=None):
    """Per-step rewards f*(T(s,a)) - c log pi(a|s) and absorbing terminal values."""
    lengths = np.cumsum([len(t) for t in trajs])[:-1]
    states = np.concatenate([t.states for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    fstar = disc.policy_rewards(make_batch(env, states, actions))
    if config.entropy_coeff:
        logp, _ = log_prob_and_entropy(policy, env.features(states), actions)
        fstar = fstar - config.entropy_coeff * logp
    rewards = np.split(fstar, lengths)
    gamma = config.gae.gamma
    pads = [padding_length(t, horizon) if horizon else 0 for t in trajs]
    terminal_values = np.zeros(len(trajs))
    idx = [i for i, m in enumerate(pads) if m]
    if idx:
        last_s = np.concatenate([trajs[i].next_states[-1:] for i in idx])
        last_a = np.array([trajs[i].actions[-1] for i in idx])
        pad_r = disc.policy_rewards(make_batch(env, last_s, last_a))
        for j, i in enumerate(idx):
            m = pads[i]
            terminal_values[i] = pad_r[j] * ((1 - gamma**m) / (1 - gamma) if gamma < 1 else m)
    return rewards, terminal_values


def _normalize(raw, expert_mean, random_mean):
    if expert_mean == random_mean:
        return 0.0
    return (raw - random_mean) / (expert_mean - random_mean)


# behaviour cloning ------------------------------------------------------


def bc_split(demos: DemoSet, config: BcConfig, seed):
    """70/30 split by trajectory; falls back to a pair-level split with one trajectory."""
    trajs = demos.trajectories
    rng = _rng(seed, 4)
    if len(trajs) >= 2:
        order = rng.permutation(len(trajs))
        n_train = min(max(1, int(round(config.train_fraction * len(trajs)))), len(trajs) - 1)
        train_t = [trajs[i] for i in sorted(order[:n_train])]
        val_t = [trajs[i] for i in sorted(order[n_train:])]
        s_tr = np.concatenate([t.states for t in train_t])
        a_tr = np.concatenate([t.actions for t in train_t])
        s_va = np.concatenate([t.states for t in val_t])
        a_va = np.concatenate([t.actions for t in val_t])
        return (s_tr, a_tr), (s_va, a_va), (len(train_t), len(val_t))
    s, a = demos.pairs()
    if len(a) < 2:
        raise ConfigurationError("behaviour cloning needs at least two state-action pairs")
    order = rng.permutation(len(a))
    n_train = min(max(1, int(round(config.train_fraction * len(a)))), len(a) - 1)
    tr, va = order[:n_train], order[n_train:]
    return (s[tr], a[tr]), (s[va], a[va]), (1, 0)


def train_bc(demos: DemoSet | None, config: TrainConfig, env) -> MlpParams:
    """Maximum likelihood on the training split, early-stopped on validation loss."""
    if demos is None or not demos.trajectories or sum(len(t) for t in demos.trajectories) == 0:
        raise ConfigurationError("behaviour cloning needs a non-empty demo set")
    bc = config.bc
    (s_tr, a_tr), (s_va, a_va), _ = bc_split(demos, bc, config.seed)
    if len(np.unique(a_tr)) == 1:
        log.warning("behaviour cloning: training data holds a single action class")
    x_tr, x_va = env.features(s_tr), env.features(s_va)
    policy = policy_net(_rng(config.seed, 0), env.obs_dim, env.n_actions, config.policy_hidden)
    state = AdamState.zeros(len(policy.vector), bc.learning_rate)
    rng = _rng(config.seed, 5)

    def nll(ts, inp):
        x, a = inp
        return -log_prob_graph(ts[0], x, a, policy.activations).mean()

    def val_loss(pol):
        logp, _ = log_prob_and_entropy(pol, x_va, a_va)
        return float(-np.mean(logp))

    best, best_loss, bad = policy, val_loss(policy), 0
    for _ in range(bc.max_epochs):
        order = rng.permutation(len(a_tr))
        for start in range(0, len(a_tr), bc.batch_size):
            idx = order[start : start + bc.batch_size]
            _, (g,) = dc.value_and_grads(nll, [policy.vector], (x_tr[idx], a_tr[idx]))
            vec, state = adam_step(policy.vector, g, state, "descend")
            policy = policy.with_vector(vec)
        loss = val_loss(policy)
        if loss < best_loss - 1e-12:
            best, best_loss, bad = policy, loss, 0
        else:
            bad += 1
            if bad >= bc.patience:
                break
    return best


def bc_validation_accuracy(policy, demos, config: TrainConfig, env):
    _, (s_va, a_va), _ = bc_split(demos, config.bc, config.seed)
    probs = policy_distribution(policy, env.features(s_va))
    return float(np.mean(np.argmax(probs, axis=1) == a_va))


# reinforcement learning on the true reward --------------------------------


def train_rl(env, config: TrainConfig, target=None, callback=None):
    """TRPO on the environment reward (the cart-pole expert protocol).

    Stops early once the mean scored return over an epoch reaches ``target``
    for three epochs in a row. Returns ``(policy, value, returns_per_epoch)``.
    """
    seed = config.seed
    learner = PolicyLearner.create(
        _rng(seed, 0), env.obs_dim, env.n_actions, config.policy_hidden,
        config.trpo.value_learning_rate,
    )
    history, streak = [], 0
    for epoch in range(config.epochs):
        trajs = sample_pairs(env, learner.act_fn(), config.pairs_per_epoch,
                             derived_seed(seed, 1, epoch))
        rewards = [t.rewards + entropy_rewards(learner.policy, env, t, config.entropy_coeff)
                   for t in trajs]
        learner, _ = policy_update(learner, env, trajs, rewards, config, _rng(seed, 3, epoch))
        score = _score(env, trajs)
        history.append(score)
        log.info("rl epoch %d return %.2f", epoch, score)
        if callback is not None:
            callback(epoch, score)
        streak = streak + 1 if target is not None and score >= target else 0
        if streak >= 3:
            break
    return learner.policy, learner.value, history


def policy_fn(policy: MlpParams):
    return lambda feats: policy_distribution(policy, feats)[0]


# variational divergence estimation ------------------------------------------


@dataclass
class VariationalFit:
    """A trained T (and, for ``learned``, f*) for the variational lower bound."""

    discriminator: Discriminator
    history: list

    @property
    def spec(self) -> DivergenceSpec:
        d = self.discriminator
        return dataclasses.replace(learned(d.ficnn), final_activation=d.spec.final_activation) \
            if d.learnable else d.spec

    def estimate(self, samples_p, samples_q) -> float:
        """mean_P T − mean_Q f*(T) on (typically held-out) samples."""
        return objective_value(self.discriminator, _sample_batch(samples_p),
                               _sample_batch(samples_q))

    def standard_error(self, samples_p, samples_q) -> float:
        d = self.discriminator
        uP = d.u_values(_sample_batch(samples_p))
        fQ = d.fstar_np(d.u_values(_sample_batch(samples_q)))
        return float(math.sqrt(uP.var(ddof=1) / uP.size + fQ.var(ddof=1) / fQ.size))


def _sample_batch(x) -> PairBatch:
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    return PairBatch(x, x, np.zeros(len(x), dtype=int))


def fit_variational(samples_p, samples_q, name, seed=0, steps=2000, hidden=(32, 32),
                    learning_rate=1e-3, batch_size=512, ficnn: FicnnConfig = FicnnConfig(),
                    gap: GapConfig = GapConfig(), reward_bound=2.0, shift_every=10):
    """Maximise mean_P T − mean_Q f*(T) by minibatch Adam.

    ``name`` is a closed-form spec (KL, RKL, JS_star) or ``learned``, which
    trains T and the FICNN conjugate jointly with a zero-gap shift every
    ``shift_every`` steps and once more at the end.
    """
    xp, xq = _sample_batch(samples_p), _sample_batch(samples_q)
    if len(xp) == 0 or len(xq) == 0:
        raise ConfigurationError("both sample sets must be non-empty")
    if steps < 1:
        raise ConfigurationError("steps must be at least 1")
    rng = _rng(seed, 30)
    dim = xp.inputs.shape[1]
    acts = ("tanh",) * len(hidden)
    reward = reward_net(rng, dim, tuple(hidden), acts)
    adam = AdamConfig(learning_rate)
    if name == "learned":
        f = init_ficnn(rng, ficnn.layer_count, ficnn.nodes_per_layer, ficnn.init_scale,
                       ficnn.output_activation)
        disc = Discriminator(reward, learned_spec(reward_bound), f)
        optim = DiscriminatorOptim(adam.state(len(reward.vector)), adam.state(len(f.vector)))
    else:
        disc = Discriminator(reward, closed_form(name))
        optim = DiscriminatorOptim(adam.state(len(reward.vector)))

    def shift(d):
        u = np.concatenate([d.u_values(xp), d.u_values(xq)])
        bounds = gap_bounds(u, gap, reward_bound)
        f, _, certified = zero_gap_step(d.ficnn, bounds, gap)
        return dataclasses.replace(d, ficnn=f, bounds=certified)

    if disc.learnable:
        disc = shift(disc)
    history = []
    n = min(batch_size, len(xp), len(xq))
    for step in range(steps):
        ip = rng.choice(len(xp), size=n, replace=False)
        iq = rng.choice(len(xq), size=n, replace=False)
        bp = PairBatch(xp.inputs[ip], xp.states[ip], xp.actions[ip])
        bq = PairBatch(xq.inputs[iq], xq.states[iq], xq.actions[iq])
        disc, value = discriminator_step(disc, bp, bq, optim, step)
        if disc.learnable and ((step + 1) % shift_every == 0 or step == steps - 1):
            disc = shift(disc)
        history.append(value)
    return VariationalFit(disc, history)
