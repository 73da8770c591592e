"""Explicit DAGs given by adjacency, used for randomized exactness checks.

States are arbitrary hashable labels.  Forward slots are positions in the
(ordered) child list, with the terminal slot appended after the children for
reward-carrying states; backward slots are positions in the parent list.
"""

import numpy as np

from .base import ENUMERATION_CAP, DagEnv, MIN_REWARD, SINK


class ExplicitDag(DagEnv):
    """Environment over an explicit child map and reward map.

    Parameters
    ----------
    children_map : dict state -> list of states
        Ordered successor lists.  States absent from the map have no
        non-sink children.
    rewards : dict state -> float
        Terminal-capable states and their (positive) rewards.
    root : state, optional
        Inferred as the unique state with no incoming edge when omitted.
    """

    def __init__(self, children_map, rewards, root=None):
        self._children = {s: list(cs) for s, cs in children_map.items()}
        for s, cs in self._children.items():
            if len(set(cs)) != len(cs):
                raise ValueError(f"duplicate edges out of {s!r}")
        self._rewards = {s: max(float(r), MIN_REWARD) for s, r in rewards.items()}
        states = set(self._children)
        for cs in self._children.values():
            states.update(cs)
        states.update(self._rewards)
        incoming = {s: 0 for s in states}
        parents = {s: [] for s in states}
        for cs in self._children.values():
            for c in cs:
                incoming[c] += 1
        if root is None:
            roots = [s for s in states if incoming[s] == 0]
            if len(roots) != 1:
                raise ValueError(f"need exactly one root, found {len(roots)}")
            root = roots[0]
        self.root = root

        # Longest-path depth from the root; a valid topological grading.
        depth = {self.root: 0}
        order = self._toposort(states)
        for s in order:
            for c in self._children.get(s, ()):
                depth[c] = max(depth.get(c, 0), depth[s] + 1)
        self._depth = depth
        for s in order:
            for c in self._children.get(s, ()):
                parents[c].append(s)
        # Deterministic parent order: by enumeration (topological) position.
        pos = {s: i for i, s in enumerate(order)}
        self._parents = {s: sorted(ps, key=pos.__getitem__) for s, ps in parents.items()}
        self._order = order

        dead = [s for s in order
                if s not in self._rewards and not self._children.get(s)]
        if dead:
            raise ValueError(f"states with no outgoing edge and no reward: {dead[:3]}")

        self.graded = self._check_graded()
        self.n_action_slots = max(
            len(self._children.get(s, ())) + (1 if s in self._rewards else 0)
            for s in order)
        self.n_backward_slots = max(1, max(len(self._parents[s]) for s in order))
        self.encoding_dim = len(order)
        self.max_trajectory_len = max(depth.values()) + 1
        self._index = pos

    def _toposort(self, states):
        remaining = {s: 0 for s in states}
        for cs in self._children.values():
            for c in cs:
                remaining[c] += 1
        frontier = [s for s, k in remaining.items() if k == 0]
        frontier.sort(key=repr)
        order = []
        while frontier:
            s = frontier.pop(0)
            order.append(s)
            added = []
            for c in self._children.get(s, ()):
                remaining[c] -= 1
                if remaining[c] == 0:
                    added.append(c)
            added.sort(key=repr)
            frontier.extend(added)
        if len(order) != len(states):
            raise ValueError("children_map contains a cycle")
        return order

    def _check_graded(self):
        top = max(self._depth.values())
        for s, cs in self._children.items():
            for c in cs:
                if self._depth[c] != self._depth[s] + 1:
                    return False
        for s in self._order:
            at_top = self._depth[s] == top
            if at_top != (s in self._rewards):
                return False
        return True

    # -- structure -----------------------------------------------------------

    def action_mask(self, s):
        mask = np.zeros(self.n_action_slots, dtype=bool)
        k = len(self._children.get(s, ()))
        mask[:k] = True
        if s in self._rewards:
            mask[k] = True
        return mask

    def child(self, s, slot):
        cs = self._children.get(s, ())
        if slot == len(cs) and s in self._rewards:
            return SINK
        return cs[slot]

    def terminal_slot(self, s):
        if s in self._rewards:
            return len(self._children.get(s, ()))
        return None

    def parent_mask(self, s):
        mask = np.zeros(self.n_backward_slots, dtype=bool)
        mask[:len(self._parents[s])] = True
        return mask

    def parent(self, s, bslot):
        return self._parents[s][bslot]

    def backward_slot(self, s, fslot):
        c = self._children[s][fslot]
        return self._parents[c].index(s)

    def forward_slot(self, s, bslot):
        p = self._parents[s][bslot]
        return self._children[p].index(s)

    # -- reward / features / enumeration -------------------------------------

    def reward(self, x):
        return self._rewards[x]

    def encode(self, s):
        v = np.zeros(self.encoding_dim)
        v[self._index[s]] = 1.0
        return v

    def n_states(self):
        return len(self._order)

    def enumerate_states(self, cap=ENUMERATION_CAP):
        self.check_cap(cap)
        top = max(self._depth.values())
        layers = [[] for _ in range(top + 1)]
        for s in self._order:
            layers[self._depth[s]].append(s)
        return layers


def random_graded_dag(rng, n_layers=4, max_width=4, edge_prob=0.6,
                      reward_low=0.5, reward_high=2.0):
    """Random graded DAG: rewards only on the last layer, edges between
    consecutive layers, every state connected forward and backward."""
    widths = [1] + [int(rng.integers(1, max_width + 1)) for _ in range(n_layers - 1)]
    nodes = [[("g", t, i) for i in range(w)] for t, w in enumerate(widths)]
    children = {}
    for t in range(n_layers - 1):
        for s in nodes[t]:
            children[s] = []
        for c in nodes[t + 1]:
            picks = [s for s in nodes[t] if rng.random() < edge_prob]
            if not picks:
                picks = [nodes[t][int(rng.integers(len(nodes[t])))]]
            for s in picks:
                children[s].append(c)
        for s in nodes[t]:
            if not children[s]:
                children[s].append(nodes[t + 1][int(rng.integers(len(nodes[t + 1])))])
    rewards = {x: float(rng.uniform(reward_low, reward_high)) for x in nodes[-1]}
    return ExplicitDag(children, rewards, root=nodes[0][0])


def random_dag(rng, n_layers=4, max_width=4, edge_prob=0.6, skip_prob=0.2,
               interior_reward_prob=0.4, reward_low=0.5, reward_high=2.0):
    """Random non-graded DAG: skip-level edges and interior rewards give
    variable-length trajectories, as on the grid."""
    widths = [1] + [int(rng.integers(1, max_width + 1)) for _ in range(n_layers - 1)]
    nodes = [[("r", t, i) for i in range(w)] for t, w in enumerate(widths)]
    children = {s: [] for layer in nodes for s in layer}
    for t in range(n_layers - 1):
        for c in nodes[t + 1]:
            picks = [s for s in nodes[t] if rng.random() < edge_prob]
            if not picks:
                picks = [nodes[t][int(rng.integers(len(nodes[t])))]]
            for s in picks:
                children[s].append(c)
        for u in range(t + 2, n_layers):
            for c in nodes[u]:
                for s in nodes[t]:
                    if rng.random() < skip_prob * edge_prob:
                        children[s].append(c)
    rewards = {x: float(rng.uniform(reward_low, reward_high)) for x in nodes[-1]}
    for layer in nodes[1:-1]:
        for s in layer:
            if rng.random() < interior_reward_prob:
                rewards[s] = float(rng.uniform(reward_low, reward_high))
    for layer in nodes[:-1]:
        for s in layer:
            if not children[s] and s not in rewards:
                children[s].append(nodes[-1][int(rng.integers(len(nodes[-1])))])
    return ExplicitDag(children, rewards, root=nodes[0][0])
