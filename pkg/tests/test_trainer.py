import dataclasses
import math

import numpy as np
import pytest

from fgail import diffcore as dc
from fgail.conjugate import convexity_probe, estimate_min_gap, eval_fstar, init_ficnn, project_slopes
from fgail.divergence import closed_form
from fgail.env import (
    DemoSet,
    GridWorld,
    sample_trajectories,
    table_policy,
    uniform_policy,
    value_iteration_expert,
)
from fgail.errors import ConfigurationError
from fgail.nets import init_mlp, mlp_apply, policy_distribution, reward_net
from fgail.trainer import (
    AdamConfig,
    Discriminator,
    DiscriminatorOptim,
    GapConfig,
    TrainConfig,
    TrpoConfig,
    _categorical_kl,
    bc_split,
    bc_validation_accuracy,
    discriminator_step,
    draw_batches,
    fit_variational,
    gae_advantages,
    learned_spec,
    make_batch,
    objective_graph,
    objective_value,
    policy_fn,
    reference_returns,
    train,
    train_bc,
    train_rl,
    trpo_step,
    zero_gap_step,
)

GRID = GridWorld()
EXPERT_TABLE, _ = value_iteration_expert(GRID.mdp)
EXPERT = table_policy(GRID, EXPERT_TABLE)


def demos(count=10, seed=1000):
    return DemoSet(sample_trajectories(GRID, EXPERT, count, seed), "gridworld")


def batches(seed, n=64):
    r = np.random.default_rng(seed)
    learner = sample_trajectories(GRID, uniform_policy(4), 20, seed)
    return draw_batches(GRID, learner, demos(), r, n, GRID.horizon)


# config -------------------------------------------------------------------


def test_config_round_trip_and_validation():
    cfg = TrainConfig.from_dict({"algorithm": "gail", "trpo": {"max_kl": 0.02},
                                 "policy_hidden": [10, 10]})
    assert cfg.trpo.max_kl == 0.02 and cfg.policy_hidden == (10, 10)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"epochs": 0}, {"trpo": {"max_kl": 0}}, {"gae": {"gamma": 1.5}},
                {"algorithm": "airl"}, {"no_such_field": 1}):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(bad)


# discriminator ------------------------------------------------------------


def fgail_disc(seed):
    r = np.random.default_rng(seed)
    return Discriminator(reward_net(r, GRID.obs_dim + 4), learned_spec(2.0), init_ficnn(r, 4, 100))


def test_discriminator_ascent_property():
    passes = 0
    for seed in range(10):
        disc = fgail_disc(seed)
        e, l = batches(seed)
        cfg = AdamConfig(1e-4)
        optim = DiscriminatorOptim(cfg.state(len(disc.reward.vector)), cfg.state(len(disc.ficnn.vector)))
        before = objective_value(disc, e, l)
        disc2, _ = discriminator_step(disc, e, l, optim)
        passes += objective_value(disc2, e, l) >= before
        assert all(np.all(w >= 0) for w in disc2.ficnn.inner_weights)
    assert passes >= 9


def test_equal_batches_constant_T_gradient_direction():
    r = np.random.default_rng(0)
    c = 0.3
    net = init_mlp(r, [GRID.obs_dim + 4, 8, 1], ("tanh",))
    W = net.vector["W1"] * 0.0
    net = net.with_vector(net.vector.replace(W1=W, b1=np.array([c])))  # T = c everywhere
    disc = Discriminator(net, closed_form("KL"))
    e, _ = batches(1)
    _, (g,) = dc.value_and_grads(lambda ts, inp: objective_graph(ts, inp, disc), [net.vector], (e, e))
    from fgail.nets import reward_graph
    _, (gT,) = dc.value_and_grads(
        lambda ts, inp: reward_graph(ts[0], inp.inputs, net.activations, disc.spec).mean(),
        [net.vector], e)
    assert np.allclose(g, (1 - math.exp(c - 1)) * gT, atol=1e-12)


def test_discriminator_batch_sizes_must_match():
    disc = fgail_disc(0)
    e, l = batches(0)
    optim = DiscriminatorOptim(AdamConfig().state(len(disc.reward.vector)),
                               AdamConfig().state(len(disc.ficnn.vector)))
    with pytest.raises(ConfigurationError):
        discriminator_step(disc, e, make_batch(GRID, l.states[:-1], l.actions[:-1]), optim)


def test_zero_gap_step_examples():
    f = init_ficnn(np.random.default_rng(3), 4, 100)
    bounds = (-2.0, 2.0)
    g, est, b = zero_gap_step(f, bounds)
    assert b == bounds
    assert abs(estimate_min_gap(g, bounds=bounds, grid_points=512).delta) <= 1e-3
    h, est2, _ = zero_gap_step(g, bounds)
    assert abs(est2.delta) <= 1e-3
    assert abs(h.shared_bias - g.shared_bias) <= 5e-4
    u = np.linspace(*bounds, 10_000)
    assert np.min(eval_fstar(h, u) - u) >= -1e-3
    # without the slope projection the plain Alg. 2 shift is used
    plain, _, _ = zero_gap_step(f, bounds, GapConfig(project_slopes=False))
    assert convexity_probe(plain) <= 1e-6


# GAE and TRPO ---------------------------------------------------------------


def test_gae_examples():
    assert gae_advantages([1.0], [0.0], 0.99, 0.95)[0] == pytest.approx(1.0)
    assert gae_advantages([1.0, 1.0], [0.0, 0.0], 0.99, 0.95)[0] == pytest.approx(1.9405)
    assert np.all(gae_advantages(np.zeros(5), np.zeros(5), 0.99, 0.95) == 0)
    with pytest.raises(ConfigurationError):
        gae_advantages([1.0, 2.0], [0.0], 0.99, 0.95)


def test_gae_matches_direct_sum(rng):
    r, v = rng.normal(size=7), rng.normal(size=7)
    g, lam, last = 0.9, 0.8, 0.4
    nxt = np.append(v[1:], last)
    delta = r + g * nxt - v
    direct = [sum((g * lam) ** l * delta[t + l] for l in range(7 - t)) for t in range(7)]
    assert np.allclose(gae_advantages(r, v, g, lam, last), direct)


def test_trpo_zero_advantages_no_op(rng):
    pol = init_mlp(rng, [GRID.obs_dim, 16, 16, 4], ("tanh", "tanh"))
    feats = GRID.features(rng.integers(0, 5, size=(30, 2)))
    res = trpo_step(pol, feats, rng.integers(0, 4, 30), np.zeros(30), TrpoConfig())
    assert not res.accepted and np.array_equal(res.policy.vector.values, pol.vector.values)


def test_trpo_trust_region(rng):
    pol = init_mlp(rng, [GRID.obs_dim, 16, 16, 4], ("tanh", "tanh"))
    feats = GRID.features(rng.integers(0, 5, size=(200, 2)))
    actions = rng.integers(0, 4, 200)
    adv = rng.normal(size=200) + (actions == 1)
    res = trpo_step(pol, feats, actions, adv, TrpoConfig(max_kl=0.01))
    assert res.accepted and res.surrogate_gain > 0
    kl = _categorical_kl(policy_distribution(pol, feats), policy_distribution(res.policy, feats))
    assert kl <= 0.01 + 1e-6


@pytest.mark.slow
def test_trpo_solves_gridworld_on_true_reward():
    cfg = TrainConfig(epochs=100, pairs_per_epoch=200, seed=0)
    expert_mean, random_mean = reference_returns(GRID, EXPERT, 50, 0)
    policy, _, _ = train_rl(GRID, cfg, target=0.95 * expert_mean)
    from fgail.env import evaluate_policy, normalized_return
    mean, _ = evaluate_policy(GRID, policy_fn(policy), 50, seed=5)
    assert normalized_return(mean, expert_mean, random_mean) >= 0.9


# training loop --------------------------------------------------------------


def small(**kw):
    base = dict(epochs=3, pairs_per_epoch=100, policy_hidden=(16, 16), reward_hidden=(16, 16, 16),
                ficnn={"layer_count": 2, "nodes_per_layer": 16}, seed=4)
    base.update(kw)
    return TrainConfig.from_dict(base)


def test_train_invariants_each_epoch():
    seen = []

    def cb(epoch, disc, e, l, report):
        assert report.objective_value == pytest.approx(objective_value(disc, e, l), abs=1e-9)
        assert convexity_probe(disc.ficnn, disc.bounds, samples=2000) <= 1e-6
        assert abs(estimate_min_gap(disc.ficnn, bounds=disc.bounds, grid_points=512).delta) <= 1e-3
        if report.trpo_accepted:
            assert report.mean_kl <= 0.01 + 1e-6
        seen.append(epoch)

    res = train(small(), GRID, demos(), callback=cb)
    assert res.error is None and seen == [0, 1, 2]
    assert res.final_u is not None and res.final_u.size >= 100


def test_train_deterministic():
    a = train(small(epochs=2), GRID, demos())
    b = train(small(epochs=2), GRID, demos())
    assert a.reports == b.reports
    assert np.array_equal(a.final_u, b.final_u)


@pytest.mark.parametrize("alg,spec", [("gail", "JS_star"), ("rkl_vim", "RKL")])
def test_baselines_use_fixed_conjugates(alg, spec):
    res = train(small(algorithm=alg, epochs=1), GRID, demos())
    assert res.discriminator.ficnn is None and res.discriminator.spec.name == spec
    assert res.error is None


def test_identity_sanity_objective_stays_small():
    """Demos drawn from the (nearly frozen) learner itself: the P = Q supremum is 0."""
    cfg = small(epochs=5, trpo={"max_kl": 1e-12}, pairs_per_epoch=200)
    from fgail.trainer import PolicyLearner, _rng
    learner = PolicyLearner.create(_rng(cfg.seed, 0), GRID.obs_dim, 4, cfg.policy_hidden, 1e-3)
    own = DemoSet(sample_trajectories(GRID, learner.act_fn(), 40, seed=77), "gridworld")
    res = train(cfg, GRID, own)
    assert max(r.objective_value for r in res.reports) <= 0.05


def test_train_requires_demos():
    with pytest.raises(ConfigurationError):
        train(small(), GRID, DemoSet([], "gridworld"))


# behaviour cloning --------------------------------------------------------


def test_bc_split_70_30():
    _, _, counts = bc_split(demos(10), TrainConfig().bc, 0)
    assert counts == (7, 3)


def test_bc_validation_accuracy_on_deterministic_expert():
    cfg = TrainConfig(algorithm="bc", policy_hidden=(32, 32))
    d = demos(10)
    policy = train_bc(d, cfg, GRID)
    assert bc_validation_accuracy(policy, d, cfg, GRID) >= 0.95


def test_bc_empty_demos():
    with pytest.raises(ConfigurationError):
        train_bc(DemoSet([], "gridworld"), TrainConfig(algorithm="bc"), GRID)


# variational fitting --------------------------------------------------------


def test_fit_variational_equal_samples_learned():
    x = np.random.default_rng(0).normal(size=2000)
    fit = fit_variational(x, x, "learned", seed=0, steps=200,
                          ficnn=dataclasses.replace(TrainConfig().ficnn, layer_count=2,
                                                    nodes_per_layer=25))
    assert fit.estimate(x, x) <= 1e-9
