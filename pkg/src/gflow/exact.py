"""Exact evaluation on enumerable environments by dynamic programming.

Everything here works on the Enumeration index: policies become dense
(state x slot) log-probability tables, and all quantities (terminating
distribution, state values, accumulated state distribution, metrics) are
computed by sweeps over the topologically ordered state list.  These routines
are the measurement instruments for the whole library; training code never
depends on them.
"""

import numpy as np

from .errors import ContractError, EnumerationLimit
from .envs import SINK

DENSE_CAP = 5000


# ---------------------------------------------------------------------------
# Policy tables
# ---------------------------------------------------------------------------

def forward_log_table(enum, forward):
    """Dense (n_states x n_action_slots) log pi_F table."""
    return forward.log_probs_numpy(enum.states, enum.action_masks())


def backward_log_table(enum, backward):
    """Dense (n_states x n_backward_slots) log pi_B table; root row is -inf."""
    env = enum.env
    out = np.full((enum.n, env.n_backward_slots), -np.inf)
    idx = [i for i in range(enum.n) if i != enum.root_index]
    states = [enum.states[i] for i in idx]
    if states:
        out[idx] = backward.log_probs_numpy(states)
    return out


def edge_logs_forward(enum, fwd_log):
    """Per-edge log pi_F, aligned with the enumeration's interior edge arrays."""
    return fwd_log[enum.edge_src, enum.edge_slot]


def edge_logs_backward(enum, bwd_log):
    """Per-edge log of a backward kernel evaluated at the edge's child."""
    return bwd_log[enum.edge_dst, enum.edge_bslot]


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

def _layer_edge_slices(enum):
    # Layers are contiguous index ranges, so per-layer edge groups are slices.
    starts = [layer[0] for layer in enum.layers]
    bounds = np.asarray(starts + [enum.n])
    return np.searchsorted(enum.edge_src, bounds)


def visit_probabilities(enum, fwd_log):
    """P(trajectory passes through s) for every state; root gets 1."""
    reach = np.zeros(enum.n)
    reach[enum.root_index] = 1.0
    cuts = _layer_edge_slices(enum)
    edge_p = np.exp(edge_logs_forward(enum, fwd_log))
    for k in range(len(enum.layers)):
        lo, hi = cuts[k], cuts[k + 1]
        if hi > lo:
            np.add.at(reach, enum.edge_dst[lo:hi],
                      reach[enum.edge_src[lo:hi]] * edge_p[lo:hi])
    return reach


def terminating_distribution(enum, fwd_log):
    """Exact P_F^T: probability of ending at each terminal-capable state."""
    reach = visit_probabilities(enum, fwd_log)
    pt = np.zeros(enum.n)
    idx = np.flatnonzero(enum.terminal)
    tslots = enum.terminal_slots()
    pt[idx] = reach[idx] * np.exp(fwd_log[idx, tslots[idx]])
    return pt


def reward_distribution(enum):
    """Ground-truth target P*(x) = R(x) / Z* as a full state vector."""
    p = np.zeros(enum.n)
    idx = np.flatnonzero(enum.terminal)
    p[idx] = np.exp(enum.log_rewards[idx])
    return p / p.sum()


def accumulated_distribution(enum, fwd_log, method="layers"):
    """Accumulated state distribution d(s) = (1/T) sum_t P(s_t = s).

    Defined for graded environments, where every trajectory has the same
    length T.  Three routes must agree: direct layer propagation, the
    fundamental-matrix solve (I - P)^-1 applied to the start distribution,
    and the nilpotent power sum.  The sink's accumulated mass is 0 by
    construction and is not represented.
    """
    if not enum.env.graded:
        raise ContractError("accumulated distribution requires a graded environment")
    t_len = len(enum.layers)
    if method == "layers":
        return visit_probabilities(enum, fwd_log) / t_len
    if enum.n > DENSE_CAP:
        raise EnumerationLimit(
            f"dense matrix route limited to {DENSE_CAP} states, have {enum.n}")
    p = np.zeros((enum.n, enum.n))
    p[enum.edge_src, enum.edge_dst] = np.exp(edge_logs_forward(enum, fwd_log))
    mu = np.zeros(enum.n)
    mu[enum.root_index] = 1.0
    if method == "matrix":
        d = np.linalg.solve(np.eye(enum.n) - p.T, mu)
        return d / t_len
    if method == "power":
        acc = mu.copy()
        vec = mu
        for _ in range(t_len - 1):
            vec = p.T @ vec
            acc += vec
        return acc / t_len
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# State values
# ---------------------------------------------------------------------------

def forward_values(enum, fwd_log, ref_edge_logs, log_z):
    """V and Q of the forward MDP with per-step rewards
    log pi_F(s,a) - ref(edge) on interior edges and
    log pi_F(sink slot | x) - log R(x) + log Z on terminal edges.

    ref_edge_logs is an array over the enumeration's interior edges: the
    backward policy for the standard reward, a guide kernel for the guided
    variant.  Returns (V, Q); invalid Q entries are 0.
    """
    n_slots = fwd_log.shape[1]
    v = np.zeros(enum.n)
    q = np.zeros((enum.n, n_slots))
    edge_r = edge_logs_forward(enum, fwd_log) - ref_edge_logs
    tslots = enum.terminal_slots()
    for i in range(enum.n - 1, -1, -1):
        lo, hi = enum.edge_ptr[i], enum.edge_ptr[i + 1]
        total = 0.0
        if hi > lo:
            qi = edge_r[lo:hi] + v[enum.edge_dst[lo:hi]]
            q[i, enum.edge_slot[lo:hi]] = qi
            total += float(np.exp(fwd_log[i, enum.edge_slot[lo:hi]]) @ qi)
        if enum.terminal[i]:
            t = tslots[i]
            qt = fwd_log[i, t] - enum.log_rewards[i] + log_z
            q[i, t] = qt
            total += np.exp(fwd_log[i, t]) * qt
        v[i] = total
    return v, q


def backward_values(enum, bwd_log, ref_edge_logs):
    """V and Q of the backward MDP with rewards
    log pi_B(s', b) - ref(edge) per interior edge, accumulated from x toward
    the root; the root's value is pinned to 0.  The terminal hop carries no
    backward reward.  Returns (V, Q) with Q over backward slots."""
    n_slots = bwd_log.shape[1]
    v = np.zeros(enum.n)
    q = np.zeros((enum.n, n_slots))
    edge_r = edge_logs_backward(enum, bwd_log) - ref_edge_logs
    order = np.argsort(enum.edge_dst, kind="stable")
    in_ptr = np.searchsorted(enum.edge_dst[order], np.arange(enum.n + 1))
    for j in range(enum.n):
        lo, hi = in_ptr[j], in_ptr[j + 1]
        if hi <= lo:
            continue
        e = order[lo:hi]
        qj = edge_r[e] + v[enum.edge_src[e]]
        q[j, enum.edge_bslot[e]] = qj
        v[j] = float(np.exp(bwd_log[j, enum.edge_bslot[e]]) @ qj)
    return v, q


def advantages(v, q, masks):
    """A = Q - V with invalid slots zeroed."""
    return np.where(masks, q - v[:, None], 0.0)


def exact_logit_gradient(visit, log_table, adv):
    """d J / d logits for a tabular policy: visit(s) * pi(s,a) * A(s,a).

    Valid for forward policies with `visit` probabilities and forward
    advantages, and for backward policies with the analogous quantities.
    Masked slots contribute 0 through exp(-inf).
    """
    return visit[:, None] * np.exp(log_table) * adv


# ---------------------------------------------------------------------------
# Flow construction
# ---------------------------------------------------------------------------

def flow_from_rewards(enum, bwd_log=None):
    """Ground-truth tabular policies satisfying the flow-matching identity.

    Chooses a backward kernel (uniform over parents unless given), then sums
    flows from the terminal edges toward the root:
    F(s) = R(s) [if terminal] + sum_children pi_B(child, b) F(child).
    Returns (fwd_log, bwd_log, log_z_star, log_flow); the induced forward
    policy transports exactly R(x)/Z* onto each terminating state.
    """
    env = enum.env
    if bwd_log is None:
        masks = enum.parent_masks()
        counts = masks.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            bwd_log = np.where(masks, -np.log(counts), -np.inf)
    flow = np.zeros(enum.n)
    edge_pb = np.exp(edge_logs_backward(enum, bwd_log))
    for i in range(enum.n - 1, -1, -1):
        lo, hi = enum.edge_ptr[i], enum.edge_ptr[i + 1]
        f = float(edge_pb[lo:hi] @ flow[enum.edge_dst[lo:hi]]) if hi > lo else 0.0
        if enum.terminal[i]:
            f += np.exp(enum.log_rewards[i])
        flow[i] = f
    log_flow = np.log(flow)
    fwd_log = np.full((enum.n, env.n_action_slots), -np.inf)
    e_src, e_dst, e_slot = enum.edge_src, enum.edge_dst, enum.edge_slot
    fwd_log[e_src, e_slot] = np.log(edge_pb) + log_flow[e_dst] - log_flow[e_src]
    idx = np.flatnonzero(enum.terminal)
    tslots = enum.terminal_slots()
    fwd_log[idx, tslots[idx]] = enum.log_rewards[idx] - log_flow[idx]
    return fwd_log, bwd_log, float(log_flow[enum.root_index]), log_flow


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _kl(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def jensen_shannon(p, q):
    """Symmetric divergence against the even mixture; lies in [0, log 2]."""
    m = 0.5 * (np.asarray(p) + np.asarray(q))
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def reward_accuracy(pt, enum):
    """min(E_model[R] / E_target[R], 1); both expectations are exact."""
    r = np.zeros(enum.n)
    idx = np.flatnonzero(enum.terminal)
    r[idx] = np.exp(enum.log_rewards[idx])
    e_model = float(pt @ r)
    p_star = reward_distribution(enum)
    e_target = float(p_star @ r)
    return min(e_model / e_target, 1.0)


def mode_states(enum, quantile=0.005):
    """Terminal-capable states in the top reward quantile (ties included)."""
    idx = np.flatnonzero(enum.terminal)
    rewards = np.exp(enum.log_rewards[idx])
    threshold = np.quantile(rewards, 1.0 - quantile)
    return {enum.states[i] for i, r in zip(idx, rewards) if r >= threshold}


def mode_count(env, forward, modes, n_samples, rng, seen=None):
    """Sample terminating states and count distinct modes found so far.

    `seen` carries discovered modes across calls; returns (count, seen).
    """
    from .sampling import sample_forward
    from .policy import UniformBackward
    if seen is None:
        seen = set()
    if n_samples > 0:
        trajs = sample_forward(env, forward, UniformBackward(env), n_samples, rng)
        for tr in trajs:
            if tr.x in modes:
                seen.add(tr.x)
    return len(seen), seen


# ---------------------------------------------------------------------------
# Trajectory enumeration and finite differences
# ---------------------------------------------------------------------------

def enumerate_paths(env, limit=1_000_000):
    """All root-to-sink paths as (states, slots) tuples, depth first."""
    out = []
    stack = [((env.root,), ())]
    while stack:
        states, slots = stack.pop()
        s = states[-1]
        for a, c in reversed(env.children(s)):
            if c is SINK:
                out.append((states + (SINK,), slots + (int(a),)))
                if len(out) > limit:
                    raise EnumerationLimit(f"more than {limit} trajectories")
            else:
                stack.append((states + (c,), slots + (int(a),)))
    return out


def path_log_prob(enum, log_table, states, slots, backward=False):
    """Log-probability of a path under a dense slot table.

    Forward tables cover every edge including the terminal hop; backward
    tables cover interior edges only (the terminal hop is skipped).
    """
    env = enum.env
    total = 0.0
    for t, a in enumerate(slots):
        s, nxt = states[t], states[t + 1]
        if backward:
            if nxt is SINK:
                continue
            b = env.backward_slot(s, a)
            total += log_table[enum.index[nxt], b]
        else:
            total += log_table[enum.index[s], a]
    return total


def finite_difference_grad(f, x0, step=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.array(x0, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return g


def policy_kl(p_log, q_log, weights, masks):
    """Sum_s w(s) KL(p(s,.) || q(s,.)) over masked slots."""
    p = np.where(masks, np.exp(p_log), 0.0)
    valid = masks & (p > 0)
    diff = np.zeros_like(p)
    diff[valid] = p_log[valid] - q_log[valid]
    return float((weights[:, None] * p * diff).sum())
