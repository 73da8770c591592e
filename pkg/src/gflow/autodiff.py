"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tape records every primitive operation applied to Tensors; backward() replays
the records in reverse and accumulates gradients into the participating
tensors.  All operations are batched, so a training step produces a tape with
tens of records rather than one per trajectory step.

The op set is deliberately small: dense affine maps, elementwise maps, masked
log-softmax, index gathers and segment sums.  That is enough to express every
objective in this library as a handful of records.
"""

import builtins

import numpy as np

from .errors import ContractError, MaskError, NumericFault, ShapeError

NEG_INF = -np.inf


class Tensor:
    """A float64 array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Converted to a float64 ndarray.
    requires_grad : bool
        Marks leaf parameters.  Gradients are accumulated into any tensor
        that either requires grad or was produced by a taped op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_taped")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._taped = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Record of primitive ops, replayed in reverse by backward()."""

    def __init__(self):
        self._records = []
        self._spent = False

    def record(self, out, inputs, backward):
        out._taped = True
        self._records.append((out, inputs, backward))
        return out

    def backward(self, root):
        """Accumulate d(root)/d(tensor) into .grad of every participating tensor.

        `root` must be a scalar (shape () or (1,)).  A tape supports a single
        backward pass; build a fresh tape per loss evaluation.
        """
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
        if self._spent:
            raise ContractError("tape already consumed by a previous backward()")
        self._spent = True
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += np.ones_like(root.data)
        for out, inputs, fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not (t.requires_grad or t._taped):
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


# ---------------------------------------------------------------------------
# Primitive ops.  Each takes the tape first, returns a new Tensor.
# ---------------------------------------------------------------------------

def matmul(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return tape.record(out, (a, b), bw)


def add(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return tape.record(out, (a, b), bw)


def sub(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return tape.record(out, (a, b), bw)


def mul(tape, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return tape.record(out, (a, b), bw)


def scale(tape, a, c):
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        return (g * c,)

    return tape.record(out, (a,), bw)


def neg(tape, a):
    return scale(tape, a, -1.0)


def log(tape, a):
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bw(g):
        return (g / a.data,)

    return tape.record(out, (a,), bw)


def exp(tape, a):
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        return (g * out.data,)

    return tape.record(out, (a,), bw)


def square(tape, a):
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)

    def bw(g):
        return (2.0 * g * a.data,)

    return tape.record(out, (a,), bw)


def leaky_relu(tape, a, slope=0.01):
    a = _as_tensor(a)
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))

    def bw(g):
        return (np.where(pos, g, slope * g),)

    return tape.record(out, (a,), bw)


def logsumexp(tape, a, axis=-1):
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(a.data - m)
    s = w.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(m + np.log(s), axis=axis))
    p = w / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return tape.record(out, (a,), bw)


def log_softmax_masked(tape, logits, mask):
    """Masked log-softmax along the last axis.

    `mask` is a boolean ndarray of the same shape; excluded entries receive
    -inf in the output and contribute nothing to the normalizer.  A row with
    no admitted entry raises MaskError.
    """
    logits = _as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.data.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.data.shape}")
    if not mask.any(axis=-1).all():
        raise MaskError("log_softmax_masked: a row masks out every entry")
    z = np.where(mask, logits.data, NEG_INF)
    m = z.max(axis=-1, keepdims=True)
    w = np.exp(z - m)
    s = w.sum(axis=-1, keepdims=True)
    out = Tensor(np.where(mask, logits.data - (m + np.log(s)), NEG_INF))
    p = w / s

    def bw(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return tape.record(out, (logits,), bw)


def gather(tape, a, idx):
    """Select rows (or scalars, for 1-D input) along axis 0; repeats allowed."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return tape.record(out, (a,), bw)


def pick(tape, a, cols):
    """Row-wise gather: out[m] = a[m, cols[m]] for a 2-D input."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-D input, got shape {a.data.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols])

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, cols), g)
        return (acc,)

    return tape.record(out, (a,), bw)


def segment_sum(tape, a, segments, num_segments):
    """Sum a 1-D tensor into `num_segments` buckets given per-entry segment ids."""
    a = _as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    out = Tensor(np.bincount(segments, weights=a.data, minlength=num_segments))

    def bw(g):
        return (g[segments],)

    return tape.record(out, (a,), bw)


def sum(tape, a):
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def bw(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return tape.record(out, (a,), bw)


def mean(tape, a):
    a = _as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean())

    def bw(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return tape.record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Fully connected network, leaky-ReLU hidden activations, linear output.

    Parameters
    ----------
    dims : sequence of int
        Layer widths including input and output, e.g. (32, 64, 64, 3).
    rng : numpy.random.Generator
        Source for the uniform +-sqrt(6/(fan_in+fan_out)) weight init.
        Biases start at zero.
    slope : float
        Negative-side slope of the hidden activation.
    """

    def __init__(self, dims, rng, slope=0.01):
        if len(dims) < 2:
            raise ShapeError("Mlp needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        self.slope = float(slope)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            self.weights.append(Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, tape, x):
        h = _as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(tape, matmul(tape, h, w), b)
            if i < last:
                h = leaky_relu(tape, h, self.slope)
        return h

    def forward_numpy(self, x):
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def forward_cached(self, x):
        """Forward pass keeping per-layer inputs and pre-activations.

        Returns (output, layer_inputs, pre_activations); consumed by
        per_sample_param_grads.
        """
        h = np.asarray(x, dtype=np.float64)
        inputs = [h]
        pre = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.data + b.data
            if i < last:
                pre.append(z)
                h = np.where(z > 0, z, self.slope * z)
                inputs.append(h)
            else:
                h = z
        return h, inputs, pre

    def n_params(self):
        # builtins.sum: the taped `sum` op below shadows the builtin here.
        return builtins.sum(p.data.size for p in self.params())

    def per_sample_param_grads(self, inputs, pre, d_out):
        """Per-sample parameter gradients of a per-sample scalar function.

        `d_out` holds each sample's gradient at the network output (M x out).
        Returns an (M x n_params) matrix whose columns follow params() order
        with C-order raveling, matching flatten().
        """
        m = d_out.shape[0]
        delta = np.asarray(d_out, dtype=np.float64)
        blocks = [None] * len(self.weights)
        for layer in range(len(self.weights) - 1, -1, -1):
            g_w = np.einsum("mi,mo->mio", inputs[layer], delta).reshape(m, -1)
            blocks[layer] = (g_w, delta)
            if layer > 0:
                delta = delta @ self.weights[layer].data.T
                z = pre[layer - 1]
                delta = np.where(z > 0, delta, self.slope * delta)
        cols = []
        for g_w, g_b in blocks:
            cols.append(g_w)
            cols.append(g_b)
        return np.concatenate(cols, axis=1)


class Tabular:
    """A dense table of logits or values indexed by enumerated row.

    Used for exact-gradient work on small state spaces: row r holds the
    parameters attached to state r.
    """

    def __init__(self, n_rows, n_cols, rng=None, init_scale=0.0):
        data = np.zeros((int(n_rows), int(n_cols)))
        if rng is not None and init_scale > 0:
            data = rng.normal(0.0, init_scale, size=data.shape)
        self.table = Tensor(data, requires_grad=True)

    @property
    def n_rows(self):
        return self.table.data.shape[0]

    @property
    def n_cols(self):
        return self.table.data.shape[1]

    def params(self):
        return [self.table]

    def rows(self, tape, idx):
        return gather(tape, self.table, idx)

    def rows_numpy(self, idx):
        return self.table.data[np.asarray(idx, dtype=np.intp)]

    def per_sample_param_grads(self, idx, d_out):
        idx = np.asarray(idx, dtype=np.intp)
        m = d_out.shape[0]
        g = np.zeros((m, self.n_rows * self.n_cols))
        cols = idx[:, None] * self.n_cols + np.arange(self.n_cols)[None, :]
        np.put_along_axis(g, cols, d_out, axis=1)
        return g


# ---------------------------------------------------------------------------
# Parameter plumbing
# ---------------------------------------------------------------------------

def flatten(params):
    """Concatenate parameter tensors into one flat float64 vector."""
    if not params:
        return np.zeros(0)
    return np.concatenate([p.data.ravel() for p in params])


def assign_flat(params, vec):
    """Write a flat vector back into parameter tensors, in flatten() order."""
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for p in params:
        n = p.data.size
        if offset + n > vec.size:
            raise ShapeError("assign_flat: vector shorter than parameter count")
        p.data[...] = vec[offset:offset + n].reshape(p.data.shape)
        offset += n
    if offset != vec.size:
        raise ShapeError(f"assign_flat: vector has {vec.size} entries, params need {offset}")


def flat_grad(params):
    """Flat gradient vector in flatten() order; missing grads read as zero."""
    parts = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(g.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def zero_grads(params):
    for p in params:
        p.grad = None


class Adam:
    """Adam optimizer with bias correction.

    Raises NumericFault when a gradient contains NaN or infinity, so a
    diverged loss stops a run instead of silently corrupting parameters.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in self.params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericFault("non-finite gradient in Adam step")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
