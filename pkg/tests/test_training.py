"""Strategy update steps: advantage assembly, surrogate gradients, the
trust-region contract, guided coupling, and exact bound checks."""

import numpy as np
import pytest

from gflow import autodiff as ad
from gflow.envs import ExplicitDag, HyperGrid, SequenceEnv, random_graded_dag
from gflow.errors import ConfigError
from gflow.exact import (
    advantages,
    backward_log_table,
    edge_logs_backward,
    enumerate_paths,
    exact_logit_gradient,
    flow_from_rewards,
    forward_values,
    path_log_prob,
    visit_probabilities,
)
from gflow.guides import HyperGridGuide, SequenceGuide, TableGuide
from gflow.objectives import step_batch
from gflow.policy import BackwardPolicy, UniformBackward, make_suite
from gflow.sampling import Trajectory, sample_forward
from gflow.training import (
    STRATEGIES,
    Trainer,
    TrainerConfig,
    TrustRegionConfig,
    actor_critic_step,
    backward_advantages,
    check_theorem_bounds,
    conjugate_gradient,
    forward_advantages,
    guided_coupled_step,
    surrogate_gradient,
    surrogate_loss,
    trpo_step,
)


def make_optimizers(suite, lr=0.01, lr_logz=0.1):
    return {name: ad.Adam(params, lr_logz if name == "log_z" else lr)
            for name, params in suite.param_groups().items()}


def fixture_suite(env, logz_shift=0.0):
    """Tabular suite on the ground-truth flow with the value function that
    zeroes every advantage: V(s) = log Z* - log F(s)."""
    enum = env.enumeration()
    fwd_log, _, log_z_star, log_flow = flow_from_rewards(enum)
    suite = make_suite(env, np.random.default_rng(0), tabular=True,
                       need_value_f=True, init_scale=0.0)
    suite.forward.model.table.data[...] = fwd_log
    suite.log_z.value.data[0] = log_z_star + logz_shift
    suite.value_f.model.table.data[:, 0] = log_z_star - log_flow
    return suite


def path_trajectory(env, states, slots):
    t = len(slots)
    bslots = [env.backward_slot(states[j], slots[j]) for j in range(t - 1)]
    return Trajectory(list(states), list(slots), np.full(t, np.nan),
                      np.full(t, np.nan), bslots, env.log_reward(states[-2]))


def traj_log_ratio(suite, t):
    return (suite.log_z.item() + t.log_pf.sum()
            - (t.log_pb[:-1].sum() if t.length > 1 else 0.0) - t.log_reward)


# -- conjugate gradients -------------------------------------------------------


def test_conjugate_gradient_matches_dense_solve():
    rng = np.random.default_rng(0)
    b_mat = rng.normal(0, 1, (6, 6))
    a = b_mat @ b_mat.T + 0.5 * np.eye(6)
    rhs = rng.normal(0, 1, 6)
    x = conjugate_gradient(lambda v: a @ v, rhs, iters=50, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(a, rhs), atol=1e-8)


def test_conjugate_gradient_zero_rhs():
    np.testing.assert_array_equal(
        conjugate_gradient(lambda v: 2.0 * v, np.zeros(4)), np.zeros(4))


# -- advantage assembly --------------------------------------------------------


def test_root_value_estimate_is_balance_ratio():
    # The lambda=1 root estimate telescopes to the trajectory balance
    # log-ratio whatever the baseline, so it is identical with and without
    # a value function.
    env = HyperGrid(2, 3)
    rng = np.random.default_rng(1)
    with_v = make_suite(env, rng, tabular=True, need_value_f=True, init_scale=0.4)
    without = make_suite(env, rng, tabular=True, init_scale=0.0)
    without.forward.model.table.data[...] = with_v.forward.model.table.data
    without.log_z.value.data[...] = with_v.log_z.value.data

    trajs = sample_forward(env, with_v.forward, with_v.backward, 16,
                           np.random.default_rng(2))
    sb = step_batch(trajs)
    _, _, root_a = forward_advantages(sb, with_v, lam=0.3)
    _, _, root_b = forward_advantages(sb, without, lam=0.3)
    want = np.array([traj_log_ratio(with_v, t) for t in trajs])
    np.testing.assert_allclose(root_a, want, atol=1e-10)
    np.testing.assert_allclose(root_b, want, atol=1e-10)


def test_fixture_zeroes_every_advantage():
    env = HyperGrid(2, 3)
    suite = fixture_suite(env)
    trajs = sample_forward(env, suite.forward, suite.backward, 32,
                           np.random.default_rng(3))
    sb = step_batch(trajs)
    for lam in (0.0, 0.5, 1.0):
        adv, targets, root_v1 = forward_advantages(sb, suite, lam)
        np.testing.assert_allclose(adv, 0.0, atol=1e-12)
        np.testing.assert_allclose(root_v1, 0.0, atol=1e-12)
        # Targets reproduce the current values, so regression is a no-op too.
        np.testing.assert_allclose(targets, suite.value_f.values_numpy(sb.states),
                                   atol=1e-12)


def test_zero_advantage_batch_leaves_suite_unchanged():
    env = HyperGrid(2, 3)
    suite = fixture_suite(env)
    trajs = sample_forward(env, suite.forward, suite.backward, 32,
                           np.random.default_rng(4))
    before = suite.snapshot()
    stats = actor_critic_step(suite, trajs, make_optimizers(suite), lam=0.99)
    after = suite.snapshot()
    for name in before:
        np.testing.assert_allclose(after[name], before[name], atol=1e-9)
    assert stats["loss"] <= 1e-20


def test_logz_descends_toward_partition():
    env = HyperGrid(2, 3)
    suite = fixture_suite(env, logz_shift=0.5)
    trajs = sample_forward(env, suite.forward, suite.backward, 16,
                           np.random.default_rng(5))
    before = suite.log_z.item()
    stats = actor_critic_step(suite, trajs, make_optimizers(suite, lr_logz=0.1))
    # Every balance ratio is +0.5, so the loss is 0.25 and log Z moves down.
    assert stats["loss"] == pytest.approx(0.25, abs=1e-12)
    assert suite.log_z.item() < before
    assert suite.log_z.item() == pytest.approx(before - 0.1, abs=1e-6)


def test_backward_advantages_alignment():
    env = SequenceEnv(3, 2, np.arange(1.0, 9.0))
    rng = np.random.default_rng(6)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       need_value_f=True, need_value_b=True, init_scale=0.3)
    trajs = sample_forward(env, suite.forward, suite.backward, 6,
                           np.random.default_rng(7))
    sb = step_batch(trajs)
    interior = ~sb.terminal
    lpf = suite.forward.log_probs_numpy(sb.states)[np.arange(sb.n_steps), sb.slots]
    ref = lpf[interior]
    lam = 0.7
    adv, targets = backward_advantages(sb, suite, ref, lam)

    from gflow.objectives import backward_step_rewards, gae_advantages
    rewards = backward_step_rewards(sb, suite, ref)
    values = suite.value_b.values_numpy(sb.in_states)
    lo = 0
    for n in sb.lengths - 1:
        hi = lo + n
        a, _, _ = gae_advantages(rewards[lo:hi][::-1], values[lo:hi][::-1], lam)
        t1 = gae_advantages(rewards[lo:hi][::-1], values[lo:hi][::-1], 1.0)[1]
        np.testing.assert_allclose(adv[lo:hi], a[::-1], atol=1e-12)
        np.testing.assert_allclose(targets[lo:hi], t1[::-1], atol=1e-12)
        lo = hi


def test_surrogate_loss_value():
    env = HyperGrid(1, 2)
    suite = make_suite(env, np.random.default_rng(8), tabular=True, init_scale=0.0)
    tape = ad.Tape()
    # Uniform two-action state: log pi = log 1/2 for both entries.
    loss = surrogate_loss(tape, suite.forward, [(0,), (0,)], np.array([0, 1]),
                          np.array([2.0, -1.0]), 2)
    assert float(loss.data) == pytest.approx(0.5 * (2.0 - 1.0) * np.log(0.5))


# -- exact surrogate gradient --------------------------------------------------


def exact_forward_gradient(env, suite):
    """Ground-truth d J_F / d logits via visit * pi * advantage."""
    enum = env.enumeration()
    fwd = suite.forward.log_probs_numpy(enum.states, enum.action_masks())
    bwd = backward_log_table(enum, suite.backward)
    ref = edge_logs_backward(enum, bwd)
    v, q = forward_values(enum, fwd, ref, suite.log_z.item())
    adv = advantages(v, q, enum.action_masks())
    return exact_logit_gradient(visit_probabilities(enum, fwd), fwd, adv).ravel()


def all_path_batch(env, suite):
    enum = env.enumeration()
    fwd = suite.forward.log_probs_numpy(enum.states, enum.action_masks())
    trajs, weights = [], []
    for states, slots in enumerate_paths(env):
        trajs.append(path_trajectory(env, states, slots))
        weights.append(np.exp(path_log_prob(enum, fwd, states, slots)))
    return trajs, np.asarray(weights)


def test_expected_surrogate_gradient_is_exact_on_bandit():
    env = ExplicitDag({"r": ["x1", "x2"]}, {"x1": 1.0, "x2": 3.0})
    rng = np.random.default_rng(9)
    suite = make_suite(env, rng, tabular=True, need_value_f=True, init_scale=0.6)
    trajs, weights = all_path_batch(env, suite)
    got = surrogate_gradient(suite, trajs, lam=1.0, weights=weights)
    np.testing.assert_allclose(got, exact_forward_gradient(env, suite), atol=1e-9)


def test_expected_surrogate_gradient_is_exact_with_any_baseline():
    # Lambda=1 advantage estimates keep the expected gradient exact no
    # matter what the value function returns.
    env = HyperGrid(1, 3)
    rng = np.random.default_rng(10)
    want = None
    for trial in range(3):
        suite = make_suite(env, rng, tabular=True, need_value_f=True,
                           init_scale=0.5)
        if want is None:
            base = suite
            want = exact_forward_gradient(env, base)
        else:
            base.value_f.model.table.data[:, 0] = rng.normal(0, 3, env.n_states())
        trajs, weights = all_path_batch(env, base)
        got = surrogate_gradient(base, trajs, lam=1.0, weights=weights)
        np.testing.assert_allclose(got, want, atol=1e-9)


# -- trust region --------------------------------------------------------------


def test_trpo_accepted_steps_respect_kl_budget():
    env = HyperGrid(2, 3)
    rng = np.random.default_rng(11)
    suite = make_suite(env, rng, tabular=True, need_value_f=True, init_scale=0.5)
    opts = make_optimizers(suite)
    n_accepted = 0
    for _ in range(6):
        batch = sample_forward(env, suite.forward, suite.backward, 64, rng)
        before = ad.flatten(suite.forward.params()).copy()
        stats = trpo_step(suite, batch, opts)
        after = ad.flatten(suite.forward.params())
        if stats["accepted"]:
            n_accepted += 1
            assert stats["kl"] <= 0.01 + 1e-8
            assert 0.0 < stats["step_scale"] <= 1.0
            assert not np.array_equal(before, after)
        else:
            np.testing.assert_array_equal(before, after)
    assert n_accepted > 0


def test_trpo_zero_budget_is_rejected_no_op():
    env = HyperGrid(2, 3)
    rng = np.random.default_rng(12)
    suite = make_suite(env, rng, tabular=True, need_value_f=True, init_scale=0.5)
    batch = sample_forward(env, suite.forward, suite.backward, 32, rng)
    before = ad.flatten(suite.forward.params()).copy()
    stats = trpo_step(suite, batch, make_optimizers(suite),
                      cfg=TrustRegionConfig(zeta=0.0))
    assert stats["accepted"] is False
    assert stats["step_scale"] == 0.0
    np.testing.assert_array_equal(before, ad.flatten(suite.forward.params()))


def test_trpo_zero_gradient_is_no_op():
    # Single-action chain: log pi = 0 everywhere, so the surrogate gradient
    # vanishes identically and the policy step is skipped.
    env = ExplicitDag({"r": ["a"], "a": ["x"]}, {"x": 2.0})
    rng = np.random.default_rng(13)
    suite = make_suite(env, rng, tabular=True, need_value_f=True, init_scale=0.5)
    batch = sample_forward(env, suite.forward, suite.backward, 8, rng)
    before = ad.flatten(suite.forward.params()).copy()
    logz_before = suite.log_z.item()
    stats = trpo_step(suite, batch, make_optimizers(suite))
    assert stats["accepted"] is False
    np.testing.assert_array_equal(before, ad.flatten(suite.forward.params()))
    # log Z and the value function still update.
    assert suite.log_z.item() != logz_before


# -- guided coupling -----------------------------------------------------------


def test_coupled_training_pulls_backward_to_guide():
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(14)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       need_value_f=True, need_value_b=True, init_scale=0.5)
    guide = TableGuide.random(env, np.random.default_rng(42))
    opts = {}
    for name, params in suite.param_groups().items():
        lr = 0.1 if name == "log_z" else (0.05 if "policy" in name else 0.02)
        opts[name] = ad.Adam(params, lr)
    enum = env.enumeration()
    masks = enum.parent_masks()
    rows = [i for i in range(enum.n) if masks[i].any()]

    def max_prob_gap():
        states = [enum.states[i] for i in rows]
        pb = np.exp(suite.backward.log_probs_numpy(states))
        pg = np.exp(guide.backward_kernel()[rows])
        pg[~masks[rows]] = 0.0
        return float(np.abs(pb - pg).max())

    start = max_prob_gap()
    for _ in range(150):
        batch = sample_forward(env, suite.forward, suite.backward, 64, rng)
        guided_coupled_step(suite, batch, opts, guide, lam=1.0, rng=rng)
    end = max_prob_gap()
    assert start > 0.2
    assert end < 0.05


def test_learned_backward_update_requires_rng():
    env = SequenceEnv(2, 2, np.ones(4))
    suite = make_suite(env, np.random.default_rng(15), tabular=True,
                       learned_backward=True, need_value_f=True,
                       need_value_b=True, init_scale=0.1)
    batch = sample_forward(env, suite.forward, suite.backward, 4,
                           np.random.default_rng(16))
    with pytest.raises(ConfigError):
        actor_critic_step(suite, batch, make_optimizers(suite), rng=None)


# -- bound checks --------------------------------------------------------------


def random_instance(seed, with_alt=False):
    rng = np.random.default_rng(seed)
    env = random_graded_dag(rng)
    enum = env.enumeration()
    from gflow.policy import masked_log_softmax_np
    fwd = masked_log_softmax_np(rng.normal(0, 1, (enum.n, env.n_action_slots)),
                                enum.action_masks())
    masks = enum.parent_masks()
    rows = [i for i in range(enum.n) if i != enum.root_index]
    bwd = np.full((enum.n, env.n_backward_slots), -np.inf)
    bwd[rows] = masked_log_softmax_np(
        rng.normal(0, 1, (len(rows), env.n_backward_slots)), masks[rows])
    guide = TableGuide.random(env, rng)
    log_z = float(np.log(enum.partition()) + rng.normal(0, 0.5))
    alt = None
    if with_alt:
        alt = masked_log_softmax_np(rng.normal(0, 1, (enum.n, env.n_action_slots)),
                                    enum.action_masks())
    return env, fwd, bwd, guide, log_z, alt


def test_theorem_bounds_trivial_cases():
    env, fwd, bwd, _, log_z, _ = random_instance(17)
    # Guide equal to the backward policy: zero guided rewards, zero slack.
    report = check_theorem_bounds(env, fwd, bwd, log_z, bwd, forward_alt=fwd)
    t1 = report["theorem1"]
    assert t1["holds"]
    assert t1["r_max"] == 0.0
    assert abs(t1["j_b_g"]) <= 1e-10
    assert t1["lhs"] == pytest.approx(t1["rhs"], abs=1e-10)
    # Unchanged policy: both sides of the improvement bound collapse to 0.
    t2 = report["theorem2"]
    assert t2["holds"]
    assert abs(t2["lhs"]) <= 1e-10
    assert t2["zeta"] <= 1e-12
    assert abs(t2["expected_advantage"]) <= 1e-10


def test_theorem_bounds_random_instances():
    for seed in range(10):
        env, fwd, bwd, guide, log_z, alt = random_instance(100 + seed, with_alt=True)
        report = check_theorem_bounds(env, fwd, bwd, log_z, guide, forward_alt=alt)
        assert report["theorem1"]["holds"], (seed, report["theorem1"])
        assert report["theorem2"]["holds"], (seed, report["theorem2"])


def test_theorem_bounds_accept_policy_objects():
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(18)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       init_scale=0.4)
    guide = TableGuide.random(env, rng)
    r_obj = check_theorem_bounds(env, suite.forward, suite.backward,
                                 suite.log_z.item(), guide)
    enum = env.enumeration()
    fwd = suite.forward.log_probs_numpy(enum.states, enum.action_masks())
    bwd = backward_log_table(enum, suite.backward)
    r_tab = check_theorem_bounds(env, fwd, bwd, suite.log_z.item(),
                                 guide.backward_kernel())
    for key, val in r_obj["theorem1"].items():
        assert val == pytest.approx(r_tab["theorem1"][key])


# -- trainer wiring ------------------------------------------------------------


EXPECT_COMPONENTS = {
    # strategy: (learned backward, value_f, value_b, flow)
    "DB-U": (False, False, False, True),
    "DB-B": (True, False, False, True),
    "TB-U": (False, False, False, False),
    "TB-B": (True, False, False, False),
    "TB-Sub": (False, False, False, True),
    "RL-U": (False, True, False, False),
    "RL-B": (True, True, True, False),
    "RL-T": (False, True, False, False),
    "RL-G": (True, True, True, False),
}


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_trainer_components_and_steps(strategy):
    if strategy == "TB-Sub":
        env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    else:
        env = HyperGrid(2, 3)
    cfg = TrainerConfig(strategy=strategy, batch_size=8, tabular=True)
    trainer = Trainer(env, cfg, np.random.default_rng(19))

    learned_b, need_vf, need_vb, need_flow = EXPECT_COMPONENTS[strategy]
    assert isinstance(trainer.suite.backward,
                      BackwardPolicy if learned_b else UniformBackward)
    assert (trainer.suite.value_f is not None) == need_vf
    assert (trainer.suite.value_b is not None) == need_vb
    assert (trainer.suite.state_flow is not None) == need_flow
    assert ("policy_b" in trainer.optimizers) == learned_b
    assert (trainer.mixture is not None) == strategy.startswith(("TB", "DB"))
    assert (trainer.trust is not None) == (strategy == "RL-T")
    if strategy == "RL-G":
        assert isinstance(trainer.guide, HyperGridGuide)

    rng = np.random.default_rng(20)
    for _ in range(2):
        stats = trainer.step(rng)
        assert np.isfinite(stats["loss"])
        assert len(stats["batch"]) == 8
    assert trainer.iteration == 2


def test_trainer_guide_on_sequences():
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    cfg = TrainerConfig(strategy="RL-G", batch_size=8, tabular=True)
    trainer = Trainer(env, cfg, np.random.default_rng(21))
    assert isinstance(trainer.guide, SequenceGuide)
    trainer.step(np.random.default_rng(22))
    assert len(trainer.guide.buffer) == 8


def test_trainer_config_errors():
    env = HyperGrid(2, 3)
    with pytest.raises(ConfigError):
        Trainer(env, TrainerConfig(strategy="TB-X"), np.random.default_rng(23))
    with pytest.raises(ConfigError):
        Trainer(env, TrainerConfig(strategy="TB-Sub"), np.random.default_rng(24))
