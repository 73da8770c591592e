"""Fixed-length sequence environment with unordered slot filling.

A state is a d-tuple over {-1, 0..n-1}; -1 marks an empty slot.  Each move
fills one empty slot with one symbol, so the DAG is graded by fill count and
every trajectory has exactly d+1 edges (the last one the forced hop to the
sink from a complete sequence).

Rewards come from a dense table over the n^d complete sequences.  A synthetic
table generator places smooth bumps around randomly drawn mode sequences,
sharpens with an exponent and rescales into [r_min, r_max].
"""

from itertools import combinations, product

import numpy as np

from ..errors import ConfigError
from .base import ENUMERATION_CAP, DagEnv, MIN_REWARD, SINK

EMPTY = -1


class SequenceEnv(DagEnv):
    """Sequences of length d over n symbols, filled in any slot order.

    Forward slots: pos * n + sym fills position pos with symbol sym; the last
    slot (d * n) is the terminal hop, valid only at complete sequences.
    Backward slots: 0..d-1 name the position that was filled last.
    """

    def __init__(self, d, n, rewards):
        self.d = int(d)
        self.n = int(n)
        if self.d < 1 or self.n < 2:
            raise ValueError(f"need d >= 1 and n >= 2, got d={d}, n={n}")
        rewards = np.asarray(rewards, dtype=np.float64).ravel()
        if rewards.size != self.n ** self.d:
            raise ValueError(
                f"reward table has {rewards.size} entries, need n**d = {self.n ** self.d}")
        self.rewards_table = np.maximum(rewards, MIN_REWARD)
        self.root = (EMPTY,) * self.d
        self.graded = True
        self.n_action_slots = self.d * self.n + 1
        self.n_backward_slots = self.d
        self.encoding_dim = self.d * (self.n + 1)
        self.max_trajectory_len = self.d + 1
        self._terminal = self.d * self.n

    @classmethod
    def synthetic(cls, d, n, seed, beta=3.0, r_min=1e-3, r_max=10.0, n_modes=None):
        return cls(d, n, synthetic_rewards(d, n, seed, beta=beta, r_min=r_min,
                                           r_max=r_max, n_modes=n_modes))

    # -- structure -----------------------------------------------------------

    def action_mask(self, s):
        mask = np.zeros(self.n_action_slots, dtype=bool)
        complete = True
        for pos, c in enumerate(s):
            if c == EMPTY:
                complete = False
                mask[pos * self.n:(pos + 1) * self.n] = True
        mask[self._terminal] = complete
        return mask

    def child(self, s, slot):
        if slot == self._terminal:
            return SINK
        pos, sym = divmod(int(slot), self.n)
        return s[:pos] + (sym,) + s[pos + 1:]

    def terminal_slot(self, s):
        if all(c != EMPTY for c in s):
            return self._terminal
        return None

    def parent_mask(self, s):
        return np.array([c != EMPTY for c in s], dtype=bool)

    def parent(self, s, bslot):
        return s[:bslot] + (EMPTY,) + s[bslot + 1:]

    def backward_slot(self, s, fslot):
        return int(fslot) // self.n

    def forward_slot(self, s, bslot):
        return int(bslot) * self.n + int(s[bslot])

    # -- reward --------------------------------------------------------------

    def sequence_index(self, x):
        idx = 0
        for c in x:
            idx = idx * self.n + int(c)
        return idx

    def reward(self, x):
        return float(self.rewards_table[self.sequence_index(x)])

    # -- features ------------------------------------------------------------

    def encode(self, s):
        v = np.zeros(self.encoding_dim)
        for pos, c in enumerate(s):
            v[pos * (self.n + 1) + int(c) + 1] = 1.0
        return v

    # -- enumeration ---------------------------------------------------------

    def n_states(self):
        return (self.n + 1) ** self.d

    def enumerate_states(self, cap=ENUMERATION_CAP):
        self.check_cap(cap)
        layers = []
        for t in range(self.d + 1):
            layer = []
            for filled in combinations(range(self.d), t):
                for syms in product(range(self.n), repeat=t):
                    s = [EMPTY] * self.d
                    for pos, sym in zip(filled, syms):
                        s[pos] = sym
                    layer.append(tuple(s))
            layers.append(layer)
        return layers


def all_sequences(d, n):
    """Complete sequences in reward-table order (lexicographic)."""
    return [tuple(s) for s in product(range(n), repeat=d)]


def synthetic_rewards(d, n, seed, beta=3.0, r_min=1e-3, r_max=10.0, n_modes=None):
    """Seeded reward table over all n**d sequences.

    Draws mode sequences, scores every sequence by Gaussian bumps in Hamming
    distance around the modes, sharpens with exponent beta and affinely
    rescales so the table maximum is exactly r_max and the minimum r_min.
    """
    total = n ** d
    if n_modes is None:
        n_modes = int(np.clip(total // 100, 2, 60))
    rng = np.random.default_rng(seed)
    modes = rng.integers(0, n, size=(n_modes, d))
    amps = rng.uniform(0.5, 1.0, size=n_modes)
    widths = rng.uniform(0.5, 1.5, size=n_modes)
    seqs = np.array(all_sequences(d, n), dtype=np.int64)
    # Hamming distance from every sequence to every mode.
    dist = (seqs[:, None, :] != modes[None, :, :]).sum(axis=2)
    score = (amps[None, :] * np.exp(-(dist ** 2) / (2.0 * widths[None, :] ** 2))).sum(axis=1)
    raw = score ** float(beta)
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-300:
        return np.full(total, float(r_max))
    return r_min + (r_max - r_min) * (raw - lo) / (hi - lo)


def save_reward_table(path, d, n, rewards):
    """Write one line per sequence: comma-separated symbols, tab, reward."""
    rewards = np.asarray(rewards, dtype=np.float64).ravel()
    if rewards.size != n ** d:
        raise ValueError(f"reward table has {rewards.size} entries, need {n ** d}")
    with open(path, "w") as fh:
        for seq, r in zip(all_sequences(d, n), rewards):
            fh.write(",".join(str(c) for c in seq) + "\t" + repr(float(r)) + "\n")


def load_reward_table(path):
    """Parse a reward-table file; returns (d, n, rewards) with rewards in
    lexicographic sequence order.  The table must be complete."""
    entries = {}
    d = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                sym_part, r_part = line.split("\t")
                seq = tuple(int(c) for c in sym_part.split(","))
                r = float(r_part)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad reward-table line {line!r}") from e
            if d is None:
                d = len(seq)
            elif len(seq) != d:
                raise ConfigError(f"{path}:{lineno}: sequence length {len(seq)} != {d}")
            entries[seq] = r
    if not entries:
        raise ConfigError(f"{path}: empty reward table")
    n = max(max(seq) for seq in entries) + 1
    if len(entries) != n ** d:
        raise ConfigError(
            f"{path}: {len(entries)} rows do not cover all {n ** d} sequences "
            f"of length {d} over {n} symbols")
    rewards = np.empty(n ** d)
    for i, seq in enumerate(all_sequences(d, n)):
        if seq not in entries:
            raise ConfigError(f"{path}: missing sequence {seq}")
        rewards[i] = entries[seq]
    return d, n, rewards
