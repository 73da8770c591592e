"""Policies, value estimators and flow scalars over DAG environments.

A forward policy maps a state to a masked distribution over action slots; a
backward policy does the same over backward (parent) slots.  Both are backed
either by an Mlp over state encodings or by a Tabular logit table over the
enumerated state index.  The uniform backward policy has no parameters.

The backward probability of the virtual terminal hop (x -> sink) is never
produced here; objectives substitute R(x)/Z for it by convention.
"""

import struct

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

CHECKPOINT_MAGIC = b"GFLW"
CHECKPOINT_VERSION = 1


def masked_log_softmax_np(logits, mask):
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    w = np.exp(z - m)
    s = w.sum(axis=-1, keepdims=True)
    return np.where(mask, logits - (m + np.log(s)), -np.inf)


def masked_softmax_np(logits, mask):
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    w = np.exp(z - m)
    return w / w.sum(axis=-1, keepdims=True)


class _PolicyBase:
    """Shared mechanics for forward and backward policies.

    Subclasses provide _mask(s) and the slot count; the model is an
    autodiff Mlp (fed encodings) or Tabular (fed enumeration indices).
    """

    def __init__(self, env, model):
        self.env = env
        self.model = model
        self.tabular = isinstance(model, ad.Tabular)
        if self.tabular:
            self._enum = env.enumeration()
            if model.n_rows != self._enum.n:
                raise ShapeError(
                    f"tabular model has {model.n_rows} rows, env has {self._enum.n} states")

    def _mask(self, s):
        raise NotImplementedError

    def params(self):
        return self.model.params()

    def masks(self, states):
        return np.stack([self._mask(s) for s in states])

    def _model_inputs(self, states):
        if self.tabular:
            return np.asarray([self._enum.index[s] for s in states], dtype=np.intp)
        return self.env.encode_batch(states)

    def logits_numpy(self, states):
        x = self._model_inputs(states)
        if self.tabular:
            return self.model.rows_numpy(x)
        return self.model.forward_numpy(x)

    def log_prob_matrix(self, tape, states, masks=None):
        """Taped (M x slots) masked log-probabilities."""
        if masks is None:
            masks = self.masks(states)
        x = self._model_inputs(states)
        logits = self.model.rows(tape, x) if self.tabular else self.model.forward(tape, x)
        return ad.log_softmax_masked(tape, logits, masks)

    def step_log_probs(self, tape, states, slots):
        """Taped log-probabilities of chosen slots, shape (M,)."""
        mat = self.log_prob_matrix(tape, states)
        return ad.pick(tape, mat, slots)

    def log_probs_numpy(self, states, masks=None):
        if masks is None:
            masks = self.masks(states)
        return masked_log_softmax_np(self.logits_numpy(states), masks)

    def probs_numpy(self, states, masks=None):
        if masks is None:
            masks = self.masks(states)
        return masked_softmax_np(self.logits_numpy(states), masks)


class ForwardPolicy(_PolicyBase):
    """Distribution over forward action slots, masked per state."""

    def _mask(self, s):
        return self.env.action_mask(s)


class BackwardPolicy(_PolicyBase):
    """Learned distribution over backward slots (which parent came before)."""

    def _mask(self, s):
        return self.env.parent_mask(s)


class UniformBackward:
    """Parameter-free backward policy, uniform over each state's parents."""

    def __init__(self, env):
        self.env = env
        self.tabular = False

    def params(self):
        return []

    def masks(self, states):
        return np.stack([self.env.parent_mask(s) for s in states])

    def log_probs_numpy(self, states, masks=None):
        if masks is None:
            masks = self.masks(states)
        counts = masks.sum(axis=-1, keepdims=True)
        return np.where(masks, -np.log(counts), -np.inf)

    def probs_numpy(self, states, masks=None):
        if masks is None:
            masks = self.masks(states)
        return masks / masks.sum(axis=-1, keepdims=True)

    def log_prob_matrix(self, tape, states, masks=None):
        return ad.Tensor(self.log_probs_numpy(states, masks))

    def step_log_probs(self, tape, states, slots):
        mat = self.log_probs_numpy(states)
        return ad.Tensor(mat[np.arange(len(states)), np.asarray(slots, dtype=np.intp)])


class ScalarEstimator:
    """State -> scalar map used for values (V~_F, V~_B) and log-flows log F(s).

    Boundary conventions live in the consumers: forward values treat the sink
    as exactly 0, backward values treat the root as exactly 0, and graded
    state flows pin terminal-layer states to log R(x).
    """

    def __init__(self, env, model):
        self.env = env
        self.model = model
        self.tabular = isinstance(model, ad.Tabular)
        if self.tabular:
            self._enum = env.enumeration()
            if model.n_cols != 1:
                raise ShapeError("tabular scalar estimator needs a single column")

    def params(self):
        return self.model.params()

    def _model_inputs(self, states):
        if self.tabular:
            return np.asarray([self._enum.index[s] for s in states], dtype=np.intp)
        return self.env.encode_batch(states)

    def values(self, tape, states):
        x = self._model_inputs(states)
        out = self.model.rows(tape, x) if self.tabular else self.model.forward(tape, x)
        return ad.pick(tape, out, np.zeros(len(states), dtype=np.intp))

    def values_numpy(self, states):
        x = self._model_inputs(states)
        out = self.model.rows_numpy(x) if self.tabular else self.model.forward_numpy(x)
        return out[:, 0]


class LogZ:
    """Learned scalar log Z."""

    def __init__(self, init=0.0):
        self.value = ad.Tensor(np.array([float(init)]), requires_grad=True)

    def params(self):
        return [self.value]

    def item(self):
        return float(self.value.data[0])


class PolicySuite:
    """Bundle of everything a training strategy touches.

    Components other than the forward policy and log Z are optional and
    depend on the strategy: learned backward policy, forward/backward value
    estimators, state-flow estimator.
    """

    GROUPS = ("policy_f", "policy_b", "log_z", "value_f", "value_b", "flow")

    def __init__(self, env, forward, backward, log_z,
                 value_f=None, value_b=None, state_flow=None):
        self.env = env
        self.forward = forward
        self.backward = backward
        self.log_z = log_z
        self.value_f = value_f
        self.value_b = value_b
        self.state_flow = state_flow

    def param_groups(self):
        groups = {"policy_f": self.forward.params(), "log_z": self.log_z.params()}
        if self.backward.params():
            groups["policy_b"] = self.backward.params()
        if self.value_f is not None:
            groups["value_f"] = self.value_f.params()
        if self.value_b is not None:
            groups["value_b"] = self.value_b.params()
        if self.state_flow is not None:
            groups["flow"] = self.state_flow.params()
        return groups

    def all_params(self):
        out = []
        for name in self.GROUPS:
            out.extend(self.param_groups().get(name, []))
        return out

    def snapshot(self):
        """Copy of all parameters as flat vectors, keyed by group."""
        return {name: ad.flatten(params).copy()
                for name, params in self.param_groups().items()}

    def restore(self, snap):
        groups = self.param_groups()
        if set(snap) != set(groups):
            raise ShapeError(f"snapshot groups {sorted(snap)} != suite groups {sorted(groups)}")
        for name, vec in snap.items():
            ad.assign_flat(groups[name], vec)

    def save(self, path, seed=0, kind="suite"):
        groups = self.param_groups()
        names = [n for n in self.GROUPS if n in groups]
        vecs = [ad.flatten(groups[n]) for n in names]
        dims = [v.size for v in vecs]
        save_checkpoint(path, kind + ":" + ",".join(names), dims, seed,
                        np.concatenate(vecs) if vecs else np.zeros(0))

    def load(self, path):
        kind, dims, seed, vec = load_checkpoint(path)
        names = kind.split(":", 1)[1].split(",") if ":" in kind else []
        groups = self.param_groups()
        if names != [n for n in self.GROUPS if n in groups]:
            raise ShapeError(f"checkpoint groups {names} do not match suite")
        offset = 0
        for name, size in zip(names, dims):
            ad.assign_flat(groups[name], vec[offset:offset + size])
            offset += size
        return seed


def score_matrix(policy, states, slots):
    """Per-sample score vectors d log pi(slot | state) / d theta, stacked M x P.

    Used for the empirical Fisher in the trust-region step and for exactness
    tests.  Column order matches flatten() over the policy's parameters.
    """
    slots = np.asarray(slots, dtype=np.intp)
    masks = policy.masks(states)
    x = policy._model_inputs(states)
    if policy.tabular:
        logits = policy.model.rows_numpy(x)
        p = masked_softmax_np(logits, masks)
        d = -p
        d[np.arange(len(states)), slots] += 1.0
        return policy.model.per_sample_param_grads(x, d)
    logits, inputs, pre = policy.model.forward_cached(x)
    p = masked_softmax_np(logits, masks)
    d = -p
    d[np.arange(len(states)), slots] += 1.0
    return policy.model.per_sample_param_grads(inputs, pre, d)


def save_checkpoint(path, kind, dims, seed, vec):
    """Binary dump: magic, version, kind string, dims, seed, float64 LE data."""
    kind_b = kind.encode("utf-8")
    vec = np.asarray(vec, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack("<I", len(dims)))
        for d in dims:
            fh.write(struct.pack("<q", int(d)))
        fh.write(struct.pack("<q", int(seed)))
        fh.write(struct.pack("<q", vec.size))
        fh.write(vec.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint version {version}")
        (klen,) = struct.unpack("<I", fh.read(4))
        kind = fh.read(klen).decode("utf-8")
        (ndims,) = struct.unpack("<I", fh.read(4))
        dims = [struct.unpack("<q", fh.read(8))[0] for _ in range(ndims)]
        (seed,) = struct.unpack("<q", fh.read(8))
        (size,) = struct.unpack("<q", fh.read(8))
        vec = np.frombuffer(fh.read(size * 8), dtype="<f8").astype(np.float64)
    return kind, dims, seed, vec


def make_suite(env, rng, tabular=False, hidden=(64, 64), learned_backward=False,
               need_value_f=False, need_value_b=False, need_flow=False,
               logz_init=0.0, init_scale=0.0):
    """Construct a PolicySuite with freshly initialized models.

    Tabular suites index the enumerated state space directly (exact-gradient
    work); Mlp suites share the architecture `hidden` across components.
    """
    def policy_model(n_slots):
        if tabular:
            return ad.Tabular(env.enumeration().n, n_slots, rng=rng, init_scale=init_scale)
        return ad.Mlp((env.encoding_dim, *hidden, n_slots), rng)

    def scalar_model():
        if tabular:
            return ad.Tabular(env.enumeration().n, 1, rng=rng, init_scale=init_scale)
        return ad.Mlp((env.encoding_dim, *hidden, 1), rng)

    forward = ForwardPolicy(env, policy_model(env.n_action_slots))
    if learned_backward:
        backward = BackwardPolicy(env, policy_model(env.n_backward_slots))
    else:
        backward = UniformBackward(env)
    return PolicySuite(
        env, forward, backward, LogZ(logz_init),
        value_f=ScalarEstimator(env, scalar_model()) if need_value_f else None,
        value_b=ScalarEstimator(env, scalar_model()) if need_value_b else None,
        state_flow=ScalarEstimator(env, scalar_model()) if need_flow else None,
    )
