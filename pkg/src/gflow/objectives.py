"""Training objectives over trajectory batches.

The value-based losses (trajectory balance, detailed balance, sub-trajectory
balance) are differentiable scalars built on one batched policy evaluation
per loss.  The policy-gradient path instead uses per-step rewards
R_F = log pi_F - log pi_B (with the R(x)/Z convention on the terminal hop)
and lambda-weighted advantage sweeps; those produce plain numpy arrays, and
gradients flow only through the log-probability factors of the surrogate.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .envs import SINK


@dataclass
class StepBatch:
    """Flat per-step view of a trajectory batch.

    Steps are ordered trajectory by trajectory.  The interior-edge arrays
    (in_*) cover the same steps minus the terminal hops, evaluated at the
    entered state for backward-policy lookups.
    """

    n_traj: int
    states: list
    slots: np.ndarray
    traj: np.ndarray
    terminal: np.ndarray
    in_states: list
    in_bslots: np.ndarray
    in_traj: np.ndarray
    log_rewards: np.ndarray
    lengths: np.ndarray

    @property
    def n_steps(self):
        return len(self.states)


def step_batch(trajectories):
    states, slots, traj, terminal = [], [], [], []
    in_states, in_bslots, in_traj = [], [], []
    log_r, lengths = [], []
    for b, tr in enumerate(trajectories):
        log_r.append(tr.log_reward)
        lengths.append(tr.length)
        for t, (s, a) in enumerate(zip(tr.states[:-1], tr.slots)):
            states.append(s)
            slots.append(a)
            traj.append(b)
            is_last = tr.states[t + 1] is SINK
            terminal.append(is_last)
            if not is_last:
                in_states.append(tr.states[t + 1])
                in_bslots.append(tr.bslots[t])
                in_traj.append(b)
    return StepBatch(
        n_traj=len(trajectories),
        states=states,
        slots=np.asarray(slots, dtype=np.intp),
        traj=np.asarray(traj, dtype=np.intp),
        terminal=np.asarray(terminal, dtype=bool),
        in_states=in_states,
        in_bslots=np.asarray(in_bslots, dtype=np.intp),
        in_traj=np.asarray(in_traj, dtype=np.intp),
        log_rewards=np.asarray(log_r),
        lengths=np.asarray(lengths, dtype=np.intp),
    )


def _reduce(tape, per_traj_sq, weights):
    if weights is None:
        return ad.mean(tape, per_traj_sq)
    w = np.asarray(weights, dtype=np.float64)
    return ad.sum(tape, ad.mul(tape, per_traj_sq, ad.Tensor(w)))


def tb_loss(tape, trajectories, suite, weights=None):
    """Mean squared trajectory-balance residual
    (log Z + log P_F(tau) - log P_B(tau|x) - log R(x))^2.

    `weights` replaces the batch mean with a weighted sum (used for exact
    expectations over enumerated trajectories).
    """
    sb = step_batch(trajectories)
    lpf = suite.forward.step_log_probs(tape, sb.states, sb.slots)
    sum_f = ad.segment_sum(tape, lpf, sb.traj, sb.n_traj)
    if len(sb.in_states):
        lpb = suite.backward.step_log_probs(tape, sb.in_states, sb.in_bslots)
        sum_b = ad.segment_sum(tape, lpb, sb.in_traj, sb.n_traj)
    else:
        sum_b = ad.Tensor(np.zeros(sb.n_traj))
    ratio = ad.sub(tape, ad.add(tape, sum_f, suite.log_z.value),
                   ad.add(tape, sum_b, ad.Tensor(sb.log_rewards)))
    return _reduce(tape, ad.square(tape, ratio), weights)


def _flow_values(tape, suite, states):
    """log F(s) with graded terminal-layer states pinned to log R(x).

    The pin blocks gradients into the flow model at pinned rows."""
    env = suite.env
    out = suite.state_flow.values(tape, states)
    if not env.graded:
        return out
    keep = np.ones(len(states))
    pinned = np.zeros(len(states))
    for i, s in enumerate(states):
        if env.terminal_slot(s) is not None:
            keep[i] = 0.0
            pinned[i] = env.log_reward(s)
    if keep.all():
        return out
    return ad.add(tape, ad.mul(tape, out, ad.Tensor(keep)), ad.Tensor(pinned))


def db_loss(tape, trajectories, suite, weights=None):
    """Detailed-balance residuals summed over each trajectory's edges.

    Interior edge s -> s':  log F(s) pi_F(s,a) - log F(s') pi_B(s',a).
    Terminal edge x -> sink: log F(x) pi_F(sink|x) - log R(x).
    """
    if suite.state_flow is None:
        raise ContractError("db_loss needs a state-flow estimator")
    sb = step_batch(trajectories)
    lpf = suite.forward.step_log_probs(tape, sb.states, sb.slots)
    flow_src = _flow_values(tape, suite, sb.states)
    lhs = ad.add(tape, flow_src, lpf)

    interior = ~sb.terminal
    rhs_parts = np.zeros(sb.n_steps)
    if len(sb.in_states):
        lpb = suite.backward.step_log_probs(tape, sb.in_states, sb.in_bslots)
        flow_dst = _flow_values(tape, suite, sb.in_states)
        rhs_int = ad.add(tape, flow_dst, lpb)
        # Scatter interior rhs into step order; terminal steps get log R.
        scatter = np.flatnonzero(interior)
        rhs = ad.segment_sum(tape, rhs_int, scatter, sb.n_steps)
    else:
        rhs = ad.Tensor(np.zeros(sb.n_steps))
    rhs_parts[sb.terminal] = sb.log_rewards
    resid = ad.sub(tape, lhs, ad.add(tape, rhs, ad.Tensor(rhs_parts)))
    per_traj = ad.segment_sum(tape, ad.square(tape, resid), sb.traj, sb.n_traj)
    return _reduce(tape, per_traj, weights)


def subtb_weights(n_edges, base):
    """Normalized weights over sub-trajectory spans (i, j), 0 <= i < j <= n_edges,
    proportional to base ** (j - i); base None puts all mass on the full span."""
    pairs = [(i, j) for i in range(n_edges) for j in range(i + 1, n_edges + 1)]
    if base is None:
        w = np.asarray([1.0 if (i, j) == (0, n_edges) else 0.0 for i, j in pairs])
    else:
        w = np.asarray([float(base) ** (j - i) for i, j in pairs])
    return pairs, w / w.sum()


def subtb_loss(tape, trajectories, suite, weight_base=0.9, weights=None):
    """Sub-trajectory balance over all layer spans of graded trajectories.

    Span (i, j) compares F(s_i) plus forward transport against F(s_j) plus
    backward transport; the terminal layer's flow is pinned to R(x).  Spans
    are weighted geometrically by length and normalized per trajectory.
    """
    env = suite.env
    if not env.graded:
        raise ContractError("sub-trajectory balance requires a graded environment")
    if suite.state_flow is None:
        raise ContractError("subtb_loss needs a state-flow estimator")
    sb = step_batch(trajectories)
    d = int(sb.lengths[0]) - 1
    if np.any(sb.lengths != d + 1):
        raise ContractError("graded trajectories must share one length")

    interior = ~sb.terminal
    lpf_all = suite.forward.step_log_probs(tape, sb.states, sb.slots)
    lpf = ad.gather(tape, lpf_all, np.flatnonzero(interior))
    lpb = suite.backward.step_log_probs(tape, sb.in_states, sb.in_bslots)
    # Interior step r of trajectory b sits at flat position b * d + r.
    flow_states = sb.states  # s_0 .. s_{d} per trajectory (x included, sink not)
    flow = _flow_values(tape, suite, flow_states)

    pairs, w = subtb_weights(d, weight_base)
    n_pairs = len(pairs)
    rep_step, rep_bucket = [], []
    pos_i = np.empty(sb.n_traj * n_pairs, dtype=np.intp)
    pos_j = np.empty(sb.n_traj * n_pairs, dtype=np.intp)
    w_full = np.empty(sb.n_traj * n_pairs)
    for b in range(sb.n_traj):
        for k, (i, j) in enumerate(pairs):
            bucket = b * n_pairs + k
            for t in range(i, j):
                rep_step.append(b * d + t)
                rep_bucket.append(bucket)
            pos_i[bucket] = b * (d + 1) + i
            pos_j[bucket] = b * (d + 1) + j
            w_full[bucket] = w[k]
    rep_step = np.asarray(rep_step, dtype=np.intp)
    rep_bucket = np.asarray(rep_bucket, dtype=np.intp)

    n_buckets = sb.n_traj * n_pairs
    span_f = ad.segment_sum(tape, ad.gather(tape, lpf, rep_step), rep_bucket, n_buckets)
    span_b = ad.segment_sum(tape, ad.gather(tape, lpb, rep_step), rep_bucket, n_buckets)
    flow_i = ad.gather(tape, flow, pos_i)
    flow_j = ad.gather(tape, flow, pos_j)
    resid = ad.sub(tape, ad.add(tape, flow_i, span_f), ad.add(tape, flow_j, span_b))
    bucket_traj = np.arange(n_buckets, dtype=np.intp) // n_pairs
    per_traj = ad.segment_sum(
        tape, ad.mul(tape, ad.square(tape, resid), ad.Tensor(w_full)),
        bucket_traj, sb.n_traj)
    return _reduce(tape, per_traj, weights)


def guided_tb_loss(tape, trajectories, suite, guide, weights=None):
    """Mean squared guided balance residual
    (log P_B(tau|x) - log P_G(tau|x))^2; gradients flow through pi_B only."""
    sb = step_batch(trajectories)
    lpb = suite.backward.step_log_probs(tape, sb.in_states, sb.in_bslots)
    sum_b = ad.segment_sum(tape, lpb, sb.in_traj, sb.n_traj)
    log_pg = np.asarray([guide.log_conditional(tr) for tr in trajectories])
    resid = ad.sub(tape, sum_b, ad.Tensor(log_pg))
    return _reduce(tape, ad.square(tape, resid), weights)


# ---------------------------------------------------------------------------
# Policy-gradient rewards and advantages
# ---------------------------------------------------------------------------

def forward_step_rewards(sb, suite, lpf=None, lpb_int=None):
    """R_F per step, aligned with the StepBatch.

    Interior: log pi_F(s,a) - log pi_B(s',a).  Terminal:
    log pi_F(sink|x) - log R(x) + log Z.  Values are plain numbers; the
    surrogate differentiates only its log-probability factors.
    """
    if lpf is None:
        lp = suite.forward.log_probs_numpy(sb.states)
        lpf = lp[np.arange(sb.n_steps), sb.slots]
    if lpb_int is None and len(sb.in_states):
        lpb = suite.backward.log_probs_numpy(sb.in_states)
        lpb_int = lpb[np.arange(len(sb.in_states)), sb.in_bslots]
    r = np.empty(sb.n_steps)
    r[~sb.terminal] = lpf[~sb.terminal] - (lpb_int if lpb_int is not None else 0.0)
    r[sb.terminal] = lpf[sb.terminal] - sb.log_rewards + suite.log_z.item()
    return r


def backward_step_rewards(sb, suite, ref_int, lpb_int=None):
    """R_B per interior edge in StepBatch (forward) order:
    log pi_B(s',a) - ref(edge), with ref the forward policy's log-prob or a
    guide kernel's.  The terminal hop carries no backward reward."""
    if lpb_int is None:
        lpb = suite.backward.log_probs_numpy(sb.in_states)
        lpb_int = lpb[np.arange(len(sb.in_states)), sb.in_bslots]
    return lpb_int - np.asarray(ref_int)


def gae_advantages(rewards, values, lam):
    """Lambda-weighted advantage estimates over one trajectory.

    delta[t] = r[t] + V(s_{t+1}) - V(s_t) with the boundary value pinned to
    0 (sink for the forward chain, root for the backward chain).
    Returns (advantages, value_targets adv + V, deltas)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t_len = rewards.size
    next_values = np.append(values[1:], 0.0)
    delta = rewards + next_values - values
    adv = np.empty(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = delta[t] + lam * acc
        adv[t] = acc
    return adv, adv + values, delta
