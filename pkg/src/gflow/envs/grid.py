"""Hyper-grid environment: states {0..n-1}^d, moves increment one coordinate.

Every state can stop (hop to the sink), so trajectories have variable length
and the DAG is not graded.  The reward is a base constant plus two nested
band bonuses around the grid corners, producing well separated modes.
"""

from itertools import product

import numpy as np

from .base import ENUMERATION_CAP, DagEnv, SINK


class HyperGrid(DagEnv):
    """d-dimensional grid of side n.

    Forward slots: 0..d-1 increment that coordinate, slot d stops.  The stop
    slot is always available.  Backward slots: 0..d-1 decrement.
    """

    def __init__(self, d, n, r0=0.01, r1=0.5, r2=2.0):
        self.d = int(d)
        self.n = int(n)
        if self.d < 1 or self.n < 2:
            raise ValueError(f"need d >= 1 and n >= 2, got d={d}, n={n}")
        self.r0, self.r1, self.r2 = float(r0), float(r1), float(r2)
        self.root = (0,) * self.d
        self.graded = False
        self.n_action_slots = self.d + 1
        self.n_backward_slots = self.d
        self.encoding_dim = self.d * self.n
        self.max_trajectory_len = self.d * (self.n - 1) + 1
        self._stop = self.d

    # -- structure -----------------------------------------------------------

    def action_mask(self, s):
        mask = np.empty(self.n_action_slots, dtype=bool)
        for i in range(self.d):
            mask[i] = s[i] < self.n - 1
        mask[self._stop] = True
        return mask

    def child(self, s, slot):
        if slot == self._stop:
            return SINK
        return s[:slot] + (s[slot] + 1,) + s[slot + 1:]

    def terminal_slot(self, s):
        return self._stop

    def parent_mask(self, s):
        return np.array([c > 0 for c in s], dtype=bool)

    def parent(self, s, bslot):
        return s[:bslot] + (s[bslot] - 1,) + s[bslot + 1:]

    def backward_slot(self, s, fslot):
        return fslot

    def forward_slot(self, s, bslot):
        return bslot

    # -- reward --------------------------------------------------------------

    def reward(self, x):
        t = np.abs(np.asarray(x, dtype=np.float64) / (self.n - 1) - 0.5)
        outer = np.all((t > 0.25) & (t <= 0.5))
        inner = np.all((t > 0.3) & (t <= 0.4))
        return self.r0 + self.r1 * float(outer) + self.r2 * float(inner)

    # -- features ------------------------------------------------------------

    def encode(self, s):
        v = np.zeros(self.encoding_dim)
        for i, c in enumerate(s):
            v[i * self.n + c] = 1.0
        return v

    def encode_batch(self, states):
        coords = np.asarray(states, dtype=np.intp)
        m = coords.shape[0]
        v = np.zeros((m, self.encoding_dim))
        cols = coords + np.arange(self.d) * self.n
        v[np.arange(m)[:, None], cols] = 1.0
        return v

    # -- enumeration ---------------------------------------------------------

    def n_states(self):
        return self.n ** self.d

    def enumerate_states(self, cap=ENUMERATION_CAP):
        self.check_cap(cap)
        layers = [[] for _ in range(self.d * (self.n - 1) + 1)]
        for coords in product(range(self.n), repeat=self.d):
            layers[sum(coords)].append(coords)
        return layers
