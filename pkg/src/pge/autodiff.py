"""Dense-tensor reverse-mode differentiation on an explicit op tape.

A :class:`GraphBuilder` executes primitives eagerly and appends one
:class:`OpRecord` per primitive; the resulting
:class:`ComputationRecord` is replayed back-to-front by
:func:`backward`.  The arithmetic primitive set is closed: matmul,
valid 2-D convolution with stride 1, bias add, ReLU, per-sample
mean-squared error, per-sample softmax cross-entropy, and mean over
the batch.  ``reshape`` is additionally allowed as value-preserving
shape plumbing (it moves no numbers).

Everything is float64.  Accumulation order in backward is the fixed
reverse tape order, so repeated runs are bit-identical regardless of
how many threads the caller uses above this module.
"""

from dataclasses import dataclass

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class Tensor:
    """Immutable double-precision array with explicit shape.

    ``values`` is the flat row-major storage; ``array`` the shaped
    view.  Construction rejects non-finite entries.
    """

    __slots__ = ("array",)

    def __init__(self, values, shape=None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds NaN or Inf")
        arr.flags.writeable = False
        self.array = arr

    @property
    def shape(self):
        return self.array.shape

    @property
    def values(self):
        return self.array.reshape(-1)

    def item(self):
        return float(self.array)

    def __repr__(self):
        return f"Tensor(shape={self.array.shape})"


@dataclass(frozen=True)
class OpRecord:
    """One primitive application: op kind, input ids, output id, and
    cached values needed for its backward rule."""

    kind: str
    inputs: tuple
    output: int
    aux: tuple = ()


class ComputationRecord:
    """Ordered tape of primitive applications.

    Node ids are list indices; every input id precedes its consumer by
    construction.  ``params`` lists the leaf nodes whose gradients
    :func:`backward` returns, in declaration order.
    """

    __slots__ = ("values", "ops", "params", "inputs", "output")

    def __init__(self):
        self.values = []
        self.ops = []
        self.params = []
        self.inputs = []
        self.output = None


class GraphBuilder:
    """Eagerly executes primitives while recording the tape."""

    def __init__(self):
        self._rec = ComputationRecord()

    # -- leaves ------------------------------------------------------

    def add_input(self, values):
        """Non-trainable leaf (data, targets)."""
        nid = self._store(self._coerce(values))
        self._rec.inputs.append(nid)
        return nid

    def add_param(self, values):
        """Trainable leaf; backward reports its gradient."""
        nid = self._store(self._coerce(values))
        self._rec.params.append(nid)
        return nid

    # -- arithmetic primitives ----------------------------------------

    def matmul(self, a, b):
        av, bv = self._val(a), self._val(b)
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} incompatible with {bv.shape}")
        return self._emit("matmul", (a, b), backend.kernels.matmul(av, bv))

    def conv2d(self, x, w):
        xv, wv = self._val(x), self._val(w)
        if xv.ndim != 4 or wv.ndim != 4:
            raise ShapeError(f"conv2d: need NCHW input and OIHW kernel, got {xv.shape} and {wv.shape}")
        if xv.shape[1] != wv.shape[1]:
            raise ShapeError(f"conv2d: channel mismatch {xv.shape} vs {wv.shape}")
        if xv.shape[2] < wv.shape[2] or xv.shape[3] < wv.shape[3]:
            raise ShapeError(f"conv2d: kernel {wv.shape} larger than input {xv.shape}")
        return self._emit("conv2d", (x, w), backend.kernels.conv2d(xv, wv))

    def bias_add(self, x, b):
        xv, bv = self._val(x), self._val(b)
        if xv.ndim == 2 and bv.shape == (xv.shape[1],):
            return self._emit("bias_add", (x, b), backend.kernels.bias_add(xv, bv))
        if xv.ndim == 4 and bv.shape == (xv.shape[1],):
            return self._emit("conv_bias_add", (x, b), backend.kernels.conv_bias_add(xv, bv))
        raise ShapeError(f"bias_add: {xv.shape} incompatible with bias {bv.shape}")

    def relu(self, x):
        return self._emit("relu", (x,), backend.kernels.relu(self._val(x)))

    def reshape(self, x, shape):
        xv = self._val(x)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != xv.size:
            raise ShapeError(f"reshape: cannot view {xv.shape} as {shape}")
        return self._emit("reshape", (x,), np.ascontiguousarray(xv.reshape(shape)))

    def mse(self, pred, target):
        """Per-sample mean squared error over the feature axis -> (m,)."""
        pv, tv = self._val(pred), self._val(target)
        if pv.ndim != 2 or pv.shape != tv.shape:
            raise ShapeError(f"mse: prediction {pv.shape} vs target {tv.shape}")
        return self._emit("mse", (pred, target), backend.kernels.mse_per_sample(pv, tv))

    def softmax_xent(self, logits, labels):
        """Per-sample softmax cross-entropy against integer labels -> (m,)."""
        lv = self._val(logits)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if lv.ndim != 2 or labels.shape != (lv.shape[0],):
            raise ShapeError(f"softmax_xent: logits {lv.shape} vs labels {labels.shape}")
        if labels.min() < 0 or labels.max() >= lv.shape[1]:
            raise ShapeError(f"softmax_xent: label out of range for {lv.shape[1]} classes")
        losses, probs = backend.kernels.softmax_xent(lv, labels)
        return self._emit("softmax_xent", (logits,), losses, aux=(probs, labels))

    def mean_batch(self, v):
        vv = self._val(v)
        if vv.ndim != 1 or vv.shape[0] == 0:
            raise ShapeError(f"mean_batch: need a non-empty vector, got {vv.shape}")
        out = np.asarray(backend.kernels.mean_vec(vv))
        return self._emit("mean_batch", (v,), out)

    # -- finishing -----------------------------------------------------

    def finish(self, output):
        """Seal the tape and return (output tensor, record)."""
        rec = self._rec
        rec.output = output
        return Tensor(rec.values[output]), rec

    def value(self, nid):
        """Current value of a node (read-only array)."""
        return self._rec.values[nid]

    # -- internals -----------------------------------------------------

    @staticmethod
    def _coerce(values):
        if isinstance(values, Tensor):
            return values.array
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value holds NaN or Inf")
        return arr

    def _val(self, nid):
        return self._rec.values[nid]

    def _store(self, arr):
        self._rec.values.append(arr)
        return len(self._rec.values) - 1

    def _emit(self, kind, inputs, value, aux=()):
        value = np.asarray(value)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced a non-finite value")
        out = self._store(value)
        self._rec.ops.append(OpRecord(kind, tuple(inputs), out, aux))
        return out


def forward(graph, *inputs):
    """Run ``graph(builder, *input_ids) -> output_id`` on the inputs.

    Returns the output tensor and the computation record for
    :func:`backward`.
    """
    g = GraphBuilder()
    ids = [g.add_input(x) for x in inputs]
    return g.finish(graph(g, *ids))


def backward(record, seed=1.0):
    """Gradients of the scalar output w.r.t. every parameter leaf.

    Replays the tape in reverse; accumulation order is fixed, so the
    result is deterministic.  ``seed`` scales the output gradient and
    enters every rule linearly.
    """
    if record.output is None:
        raise ValueError("backward: record was never finished")
    if record.values[record.output].shape != ():
        raise ShapeError("backward: record does not terminate in a scalar loss")

    K = backend.kernels
    grads = [None] * len(record.values)
    grads[record.output] = np.asarray(float(seed))

    def acc(nid, g):
        # Accumulation never mutates in place, so sharing g is safe.
        if grads[nid] is None:
            grads[nid] = g
        else:
            grads[nid] = grads[nid] + g

    for op in reversed(record.ops):
        g = grads[op.output]
        if g is None:
            continue
        kind = op.kind
        if kind == "matmul":
            a, b = op.inputs
            acc(a, K.matmul_grad_a(g, record.values[b]))
            acc(b, K.matmul_grad_b(record.values[a], g))
        elif kind == "conv2d":
            x, w = op.inputs
            acc(x, K.conv2d_grad_x(g, record.values[w]))
            acc(w, K.conv2d_grad_w(record.values[x], g))
        elif kind == "bias_add":
            x, b = op.inputs
            acc(x, g)
            acc(b, K.bias_grad(g))
        elif kind == "conv_bias_add":
            x, b = op.inputs
            acc(x, g)
            acc(b, K.conv_bias_grad(g))
        elif kind == "relu":
            (x,) = op.inputs
            acc(x, K.relu_grad(record.values[x], g))
        elif kind == "reshape":
            (x,) = op.inputs
            acc(x, np.ascontiguousarray(g.reshape(record.values[x].shape)))
        elif kind == "mse":
            pred, target = op.inputs
            gp = K.mse_grad_pred(record.values[pred], record.values[target], g)
            acc(pred, gp)
            acc(target, -gp)
        elif kind == "softmax_xent":
            (logits,) = op.inputs
            probs, labels = op.aux
            acc(logits, K.softmax_xent_grad(probs, labels, g))
        elif kind == "mean_batch":
            (v,) = op.inputs
            m = record.values[v].shape[0]
            acc(v, np.full(m, float(g) / m))
        else:  # pragma: no cover - the op set is closed
            raise ValueError(f"backward: unknown op kind {kind!r}")

    out = []
    for p in record.params:
        gp = grads[p]
        if gp is None:
            gp = np.zeros_like(record.values[p])
        out.append(Tensor(gp))
    return tuple(out)
