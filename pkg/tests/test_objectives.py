"""Loss functions and per-step rewards checked against hand recomputation
and a ground-truth flow fixture on which every balance residual vanishes."""

import numpy as np
import pytest

from gflow import autodiff as ad
from gflow.envs import SINK, HyperGrid, SequenceEnv
from gflow.errors import ContractError
from gflow.exact import flow_from_rewards
from gflow.guides import TableGuide
from gflow.objectives import (
    backward_step_rewards,
    db_loss,
    forward_step_rewards,
    gae_advantages,
    guided_tb_loss,
    step_batch,
    subtb_loss,
    subtb_weights,
    tb_loss,
)
from gflow.policy import make_suite
from gflow.sampling import Trajectory, sample_forward


def perfect_suite(env, need_flow=True):
    """Tabular suite loaded with the ground-truth flow solution."""
    enum = env.enumeration()
    fwd_log, bwd_log, log_z_star, log_flow = flow_from_rewards(enum)
    suite = make_suite(env, np.random.default_rng(0), tabular=True,
                       need_flow=need_flow, init_scale=0.0)
    suite.forward.model.table.data[...] = fwd_log
    suite.log_z.value.data[0] = log_z_star
    if need_flow:
        suite.state_flow.model.table.data[:, 0] = log_flow
    return suite, bwd_log


def sample_batch(env, suite, n=32, seed=1):
    return sample_forward(env, suite.forward, suite.backward, n,
                          np.random.default_rng(seed))


def traj_log_ratio(suite, t):
    """log Z + log P_F(tau) - log P_B(tau|x) - log R(x) from cached steps."""
    return (suite.log_z.item() + t.log_pf.sum()
            - (t.log_pb[:-1].sum() if t.length > 1 else 0.0) - t.log_reward)


# -- step batching -------------------------------------------------------------


def test_step_batch_layout():
    t1 = Trajectory([(0,), SINK], [1], np.array([-0.7]), np.array([np.nan]),
                    [], np.log(0.51))
    t2 = Trajectory([(0,), (1,), SINK], [0, 1], np.array([-0.7, 0.0]),
                    np.array([0.0, np.nan]), [0], np.log(0.51))
    sb = step_batch([t1, t2])
    assert sb.n_traj == 2
    assert sb.n_steps == 3
    assert sb.states == [(0,), (0,), (1,)]
    assert sb.slots.tolist() == [1, 0, 1]
    assert sb.traj.tolist() == [0, 1, 1]
    assert sb.terminal.tolist() == [True, False, True]
    assert sb.in_states == [(1,)]
    assert sb.in_bslots.tolist() == [0]
    assert sb.in_traj.tolist() == [1]
    assert sb.lengths.tolist() == [1, 2]


# -- balance losses on the ground-truth flow -----------------------------------


def test_perfect_flow_zeroes_tb_and_db_on_grid():
    env = HyperGrid(2, 3)
    suite, _ = perfect_suite(env)
    trajs = sample_batch(env, suite)
    assert float(tb_loss(ad.Tape(), trajs, suite).data) <= 1e-10
    assert float(db_loss(ad.Tape(), trajs, suite).data) <= 1e-10


def test_perfect_flow_zeroes_all_losses_on_sequence():
    env = SequenceEnv(2, 3, np.arange(1.0, 10.0))
    suite, bwd_log = perfect_suite(env)
    trajs = sample_batch(env, suite)
    assert float(tb_loss(ad.Tape(), trajs, suite).data) <= 1e-10
    assert float(db_loss(ad.Tape(), trajs, suite).data) <= 1e-10
    assert float(subtb_loss(ad.Tape(), trajs, suite).data) <= 1e-10
    guide = TableGuide(env, bwd_log)
    assert float(guided_tb_loss(ad.Tape(), trajs, suite, guide).data) <= 1e-10


# -- straight-line recomputation -----------------------------------------------


def test_tb_loss_matches_hand_recompute():
    env = HyperGrid(2, 3)
    suite = make_suite(env, np.random.default_rng(2), hidden=(8,),
                       learned_backward=True, logz_init=0.3)
    trajs = sample_batch(env, suite, n=16, seed=3)
    want = np.mean([traj_log_ratio(suite, t) ** 2 for t in trajs])
    got = float(tb_loss(ad.Tape(), trajs, suite).data)
    assert got == pytest.approx(want, rel=1e-10)


def test_tb_loss_weighted_sum():
    env = HyperGrid(1, 3)
    suite = make_suite(env, np.random.default_rng(4), hidden=(8,))
    trajs = sample_batch(env, suite, n=2, seed=5)
    w = np.array([0.25, 0.75])
    want = sum(wi * traj_log_ratio(suite, t) ** 2 for wi, t in zip(w, trajs))
    got = float(tb_loss(ad.Tape(), trajs, suite, weights=w).data)
    assert got == pytest.approx(want, rel=1e-10)


def test_db_loss_matches_hand_recompute():
    env = HyperGrid(2, 3)
    rng = np.random.default_rng(6)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       need_flow=True, init_scale=0.4)
    trajs = sample_batch(env, suite, n=12, seed=7)
    flow = suite.state_flow.model.table.data[:, 0]
    enum = env.enumeration()

    want = 0.0
    for t in trajs:
        acc = 0.0
        for j in range(t.length):
            s = t.states[j]
            lhs = flow[enum.index[s]] + t.log_pf[j]
            if t.states[j + 1] is SINK:
                rhs = t.log_reward
            else:
                rhs = flow[enum.index[t.states[j + 1]]] + t.log_pb[j]
            acc += (lhs - rhs) ** 2
        want += acc / len(trajs)
    got = float(db_loss(ad.Tape(), trajs, suite).data)
    assert got == pytest.approx(want, rel=1e-10)


def test_db_loss_needs_flow():
    env = HyperGrid(1, 3)
    suite = make_suite(env, np.random.default_rng(8), hidden=(8,))
    trajs = sample_batch(env, suite, n=2, seed=9)
    with pytest.raises(ContractError):
        db_loss(ad.Tape(), trajs, suite)


# -- sub-trajectory spans ------------------------------------------------------


def test_subtb_weights_geometric():
    pairs, w = subtb_weights(2, 0.9)
    assert pairs == [(0, 1), (0, 2), (1, 2)]
    np.testing.assert_allclose(w, np.array([0.9, 0.81, 0.9]) / 2.61)
    assert w.sum() == pytest.approx(1.0)


def test_subtb_weights_full_span_only():
    pairs, w = subtb_weights(3, None)
    assert w[pairs.index((0, 3))] == 1.0
    assert w.sum() == 1.0


def test_subtb_full_span_reduces_to_tb():
    # On a graded environment the terminal hop is forced (log-prob 0), so the
    # full-span residual with F(root) set to log Z equals the TB residual.
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(10)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       need_flow=True, init_scale=0.5, logz_init=0.7)
    suite.state_flow.model.table.data[env.enumeration().root_index, 0] = \
        suite.log_z.item()
    trajs = sample_batch(env, suite, n=8, seed=11)
    full = float(subtb_loss(ad.Tape(), trajs, suite, weight_base=None).data)
    tb = float(tb_loss(ad.Tape(), trajs, suite).data)
    assert full == pytest.approx(tb, rel=1e-10)


def test_subtb_matches_hand_recompute():
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(12)
    suite = make_suite(env, rng, tabular=True, learned_backward=True,
                       need_flow=True, init_scale=0.5)
    trajs = sample_batch(env, suite, n=6, seed=13)
    enum = env.enumeration()
    flow_tab = suite.state_flow.model.table.data[:, 0]
    base = 0.9

    def flow_of(s):
        if env.terminal_slot(s) is not None:
            return env.log_reward(s)
        return flow_tab[enum.index[s]]

    pairs, w = subtb_weights(2, base)
    want = 0.0
    for t in trajs:
        acc = 0.0
        for (i, j), wk in zip(pairs, w):
            resid = flow_of(t.states[i]) - flow_of(t.states[j])
            resid += t.log_pf[i:j].sum() - t.log_pb[i:j].sum()
            acc += wk * resid ** 2
        want += acc / len(trajs)
    got = float(subtb_loss(ad.Tape(), trajs, suite, weight_base=base).data)
    assert got == pytest.approx(want, rel=1e-10)


def test_subtb_requires_graded():
    env = HyperGrid(2, 3)
    suite = make_suite(env, np.random.default_rng(14), tabular=True,
                       need_flow=True)
    trajs = sample_batch(env, suite, n=2, seed=15)
    with pytest.raises(ContractError):
        subtb_loss(ad.Tape(), trajs, suite)


# -- guided balance ------------------------------------------------------------


def test_guided_tb_only_touches_backward_params():
    env = SequenceEnv(2, 2, [1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(16)
    suite = make_suite(env, rng, hidden=(8,), learned_backward=True)
    guide = TableGuide(env, np.where(env.enumeration().parent_masks(), 0.0, -np.inf))
    trajs = sample_batch(env, suite, n=4, seed=17)
    tape = ad.Tape()
    loss = guided_tb_loss(tape, trajs, suite, guide)
    assert float(loss.data) > 0.0
    tape.backward(loss)
    assert all(p.grad is None for p in suite.forward.params())
    assert any(p.grad is not None for p in suite.backward.params())


# -- per-step rewards ----------------------------------------------------------


def test_forward_step_rewards_telescope():
    # Interior backward log-probabilities cancel pairwise, so the per-step
    # sums collapse to the trajectory balance log-ratio for any policies.
    env = HyperGrid(2, 4)
    suite = make_suite(env, np.random.default_rng(18), hidden=(8,),
                       learned_backward=True, logz_init=-0.4)
    trajs = sample_batch(env, suite, n=16, seed=19)
    sb = step_batch(trajs)
    r = forward_step_rewards(sb, suite)
    sums = np.zeros(sb.n_traj)
    np.add.at(sums, sb.traj, r)
    want = np.array([traj_log_ratio(suite, t) for t in trajs])
    np.testing.assert_allclose(sums, want, rtol=1e-12, atol=1e-12)


def test_backward_step_rewards_definition():
    env = HyperGrid(2, 3)
    suite = make_suite(env, np.random.default_rng(20), hidden=(8,),
                       learned_backward=True)
    trajs = sample_batch(env, suite, n=8, seed=21)
    sb = step_batch(trajs)
    lpf = suite.forward.log_probs_numpy(sb.states)[np.arange(sb.n_steps), sb.slots]
    ref = lpf[~sb.terminal]
    got = backward_step_rewards(sb, suite, ref)
    lpb = suite.backward.log_probs_numpy(sb.in_states)
    want = lpb[np.arange(len(sb.in_states)), sb.in_bslots] - ref
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert got.size == (~sb.terminal).sum()


# -- advantage sweeps ----------------------------------------------------------


def test_gae_hand_unrolled():
    rewards = np.array([1.0, 2.0, 3.0])
    values = np.array([0.5, -1.0, 2.0])
    delta_want = np.array([-0.5, 5.0, 1.0])

    adv, targets, delta = gae_advantages(rewards, values, 1.0)
    np.testing.assert_allclose(delta, delta_want)
    np.testing.assert_allclose(adv, [5.5, 6.0, 1.0])
    # At lambda = 1 the value target is the reward-to-go.
    np.testing.assert_allclose(targets, [6.0, 5.0, 3.0])

    adv, targets, _ = gae_advantages(rewards, values, 0.0)
    np.testing.assert_allclose(adv, delta_want)
    np.testing.assert_allclose(targets, [0.0, 4.0, 3.0])

    adv, _, _ = gae_advantages(rewards, values, 0.5)
    np.testing.assert_allclose(adv, [2.25, 5.5, 1.0])


def test_gae_single_step():
    adv, targets, delta = gae_advantages([2.0], [0.7], 0.9)
    np.testing.assert_allclose(adv, [1.3])
    np.testing.assert_allclose(targets, [2.0])
    np.testing.assert_allclose(delta, [1.3])
