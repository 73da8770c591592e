"""Trajectory sampling over DAG environments.

Forward rollouts run all trajectories in lockstep so each step is one batched
policy evaluation.  Sampling is deterministic given the Generator: action
order is fixed by slot index and draws use inverse-CDF per row.

Cached per-step log-probabilities always refer to the learned policies, never
to the exploration mixture; objectives that need gradients recompute them
through a tape anyway.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .envs import EMPTY, SINK
from .errors import ContractError


@dataclass
class Trajectory:
    """A complete root-to-sink path with cached per-step quantities.

    states has length T+1 (root ... x, SINK); slots, log_pf have length T.
    log_pb has length T with the final entry NaN: the backward probability of
    the terminal hop is the R(x)/Z convention, applied by objectives.
    bslots has length T-1 (backward slot of each interior edge).
    """

    states: list
    slots: list
    log_pf: np.ndarray
    log_pb: np.ndarray
    bslots: list
    log_reward: float

    @property
    def x(self):
        return self.states[-2]

    @property
    def length(self):
        return len(self.slots)


@dataclass
class MixtureSchedule:
    """Exploration weight eps_iter = gamma ** iteration (starts at 1.0)."""

    gamma: float = 0.99

    def eps(self, iteration):
        return float(self.gamma) ** int(iteration)


def sample_rows(probs, u):
    """Inverse-CDF categorical draw per row; u in [0, 1) per row."""
    cum = np.cumsum(probs, axis=1)
    r = u * cum[:, -1]
    return (r[:, None] >= cum).sum(axis=1)


def sample_forward(env, forward, backward, n, rng, eps=0.0):
    """Sample n trajectories from the forward policy, optionally mixed with a
    uniform-over-valid-actions distribution with weight eps."""
    n = int(n)
    states = [[env.root] for _ in range(n)]
    slots = [[] for _ in range(n)]
    log_pf = [[] for _ in range(n)]
    log_pb = [[] for _ in range(n)]
    bslots = [[] for _ in range(n)]
    log_r = [0.0] * n
    active = list(range(n))
    steps = 0
    while active:
        steps += 1
        if steps > env.max_trajectory_len + 1:
            raise ContractError("rollout exceeded the environment's trajectory bound")
        cur = [states[i][-1] for i in active]
        masks = forward.masks(cur)
        lp = forward.log_probs_numpy(cur, masks)
        probs = np.exp(lp)
        if eps > 0.0:
            uniform = masks / masks.sum(axis=-1, keepdims=True)
            draw_probs = (1.0 - eps) * probs + eps * uniform
        else:
            draw_probs = probs
        u = rng.random(len(active))
        chosen = sample_rows(draw_probs, u)

        entered = []
        entered_meta = []
        still = []
        for row, i in enumerate(active):
            a = int(chosen[row])
            s = cur[row]
            c = env.child(s, a)
            slots[i].append(a)
            log_pf[i].append(lp[row, a])
            states[i].append(c)
            if c is SINK:
                log_pb[i].append(np.nan)
                log_r[i] = env.log_reward(s)
            else:
                bslots[i].append(env.backward_slot(s, a))
                entered.append(c)
                entered_meta.append(i)
                still.append(i)
        if entered:
            blp = backward.log_probs_numpy(entered)
            for row, i in enumerate(entered_meta):
                log_pb[i].append(blp[row, bslots[i][-1]])
        active = still

    return [Trajectory(states[i], slots[i], np.asarray(log_pf[i]),
                       np.asarray(log_pb[i]), bslots[i], log_r[i])
            for i in range(n)]


def sample_backward(env, backward, xs, rng, forward=None):
    """Sample one trajectory per terminating state in xs by walking parents
    backward to the root, in lockstep.  Forward log-prob caches are filled
    from `forward` when given, else NaN."""
    m = len(xs)
    chains = [[x] for x in xs]
    picks = [[] for _ in range(m)]
    lps = [[] for _ in range(m)]
    active = [i for i in range(m) if xs[i] != env.root]
    steps = 0
    while active:
        steps += 1
        if steps > env.max_trajectory_len:
            raise ContractError("backward walk exceeded the environment's trajectory bound")
        cur = [chains[i][-1] for i in active]
        masks = backward.masks(cur)
        lp = backward.log_probs_numpy(cur, masks)
        u = rng.random(len(active))
        chosen = sample_rows(np.exp(lp), u)
        still = []
        for row, i in enumerate(active):
            b = int(chosen[row])
            picks[i].append(b)
            lps[i].append(lp[row, b])
            p = env.parent(cur[row], b)
            chains[i].append(p)
            if p != env.root:
                still.append(i)
        active = still

    out = []
    for x, chain, pick_list, lp_list in zip(xs, chains, picks, lps):
        fwd_states = chain[::-1]
        bslots = pick_list[::-1]
        fslots = [env.forward_slot(fwd_states[j + 1], b) for j, b in enumerate(bslots)]
        fslots.append(env.terminal_slot(x))
        states_full = fwd_states + [SINK]
        t = len(fslots)
        lpf = np.full(t, np.nan)
        if forward is not None:
            lp = forward.log_probs_numpy(states_full[:-1])
            lpf = lp[np.arange(t), np.asarray(fslots, dtype=np.intp)]
        lpb = np.asarray(lp_list[::-1] + [np.nan])
        out.append(Trajectory(states_full, fslots, lpf, lpb, bslots,
                              env.log_reward(x)))
    return out


class ReplayBuffer:
    """FIFO store of (terminating state, reward) pairs with fixed capacity."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, x, reward):
        self._items.append((x, float(reward)))

    def update(self, trajectories_or_pairs):
        for item in trajectories_or_pairs:
            if isinstance(item, Trajectory):
                self.add(item.x, np.exp(item.log_reward))
            else:
                x, r = item
                self.add(x, r)

    def states(self):
        return [x for x, _ in self._items]

    def rewards(self):
        return np.array([r for _, r in self._items])


def _extends(s, x):
    return all(c == EMPTY or c == xc for c, xc in zip(s, x))


def guided_score(buffer, s, x, floor=1e-8):
    """Replay-derived score of a partial sequence s under conditioning x.

    0 when s is incompatible with x; otherwise the mean reward of buffer
    entries extending s, or `floor` when none do.
    """
    if not _extends(s, x):
        return 0.0
    vals = [r for xp, r in buffer if _extends(s, xp)]
    if not vals:
        return float(floor)
    return float(np.mean(vals))
