"""
Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` is created for every forward pass whose gradients are wanted.
Leaves join a tape through ``Tape.watch``; every op whose operands include a
tape participant is recorded on that tape, everything else is a constant.
``Tape.backward`` consumes the tape and fills ``grad`` on every participant.

There is no broadcasting: element-wise ops need identical shapes and
``repeat_rows`` / ``reshape`` make shapes match explicitly.
"""
import logging

import numpy as np
from scipy import special

from .exceptions import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)


class Tensor:
    """Immutable float64 array plus an optional gradient buffer."""

    def __init__(self, values, tape=None):
        array = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError('tensor', 'non-finite values')
        array.setflags(write=False)
        self.values = array
        self.grad = None
        self.tape = tape

    @classmethod
    def _wrap(cls, array, tape=None):
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        out.values = array
        out.grad = None
        out.tape = tape
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        if self.values.size != 1:
            raise ShapeError('item', self.shape)
        return float(self.values.reshape(-1)[0])

    def numpy(self):
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.shape}, values={self.values.tolist()})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records one forward pass; consumed by a single ``backward`` call."""

    def __init__(self, name='tape'):
        self.name = name
        self.consumed = False
        self._nodes = []
        self._members = {}
        self._leaves = []

    def __repr__(self):
        state = 'consumed' if self.consumed else 'live'
        return f"Tape({self.name!r}, nodes={len(self._nodes)}, {state})"

    def watch(self, *tensors):
        """Make leaf tensors participants of this tape."""
        self._check_live()
        for tensor in tensors:
            if id(tensor) in self._members:
                continue
            tensor.tape = self
            tensor.grad = None
            self._members[id(tensor)] = tensor
            self._leaves.append(tensor)
        return tensors[0] if len(tensors) == 1 else tensors

    def tracks(self, tensor):
        return id(tensor) in self._members

    def _check_live(self):
        if self.consumed:
            raise TapeError(f"{self.name} has already been consumed")

    def _record(self, out, inputs, vjp):
        self._check_live()
        self._members[id(out)] = out
        self._nodes.append((out, inputs, vjp))

    def backward(self, root):
        """Fill ``grad`` with d(root)/d(participant) for every participant."""
        self._check_live()
        if not isinstance(root, Tensor) or not self.tracks(root):
            raise TapeError(f"root was not recorded on {self.name}")
        if root.shape != ():
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")

        grads = {id(root): np.ones(())}
        for out, inputs, vjp in reversed(self._nodes):
            upstream = grads.get(id(out))
            if upstream is None:
                continue
            for tensor, contribution in zip(inputs, vjp(upstream)):
                if contribution is None or not self.tracks(tensor):
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution

        for key, tensor in self._members.items():
            grad = grads.get(key)
            tensor.grad = np.zeros(tensor.shape) if grad is None else np.asarray(grad, dtype=np.float64)

        self.consumed = True
        for leaf in self._leaves:
            if leaf.tape is self:
                leaf.tape = None
        logger.debug("%s consumed after %d nodes", self.name, len(self._nodes))


def backward(root):
    """Run reverse mode on the tape that recorded ``root``."""
    if not isinstance(root, Tensor) or root.tape is None:
        raise TapeError('root is not attached to a live tape')
    root.tape.backward(root)


def constant(values):
    return Tensor(values)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _active_tape(inputs):
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None and not t.tape.consumed}
    if len(tapes) > 1:
        raise TapeError('operands belong to different live tapes')
    return next(iter(tapes.values()), None)


def _result(op, values, inputs, vjp):
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError(op)
    tape = _active_tape(inputs)
    out = Tensor._wrap(values, tape)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _expand(grad, shape, axis):
    """Spread a reduced gradient back over the reduced axis."""
    if axis is None:
        return np.full(shape, float(grad))
    return np.broadcast_to(np.expand_dims(grad, axis), shape).copy()


# Element-wise arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape('add', a, b)
    return _result('add', a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape('sub', a, b)
    return _result('sub', a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape('mul', a, b)
    av, bv = a.values, b.values
    return _result('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, factor):
    """Multiply by a plain real number."""
    a = _as_tensor(a)
    factor = float(factor)
    return _result('scale', a.values * factor, (a,), lambda g: (g * factor,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape)
    av, bv = a.values, b.values
    return _result('matmul', av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# Non-linearities

def relu(a):
    a = _as_tensor(a)
    mask = (a.values > 0).astype(np.float64)
    return _result('relu', a.values * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    s = special.expit(a.values)
    return _result('sigmoid', s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.values)
    return _result('tanh', t, (a,), lambda g: (g * (1.0 - t * t),))


def softmax(a):
    """Row-wise softmax of a matrix."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError('softmax', a.shape)
    s = special.softmax(a.values, axis=1)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _result('softmax', s, (a,), vjp)


def log(a):
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise NumericError('log', 'argument must be strictly positive')
    av = a.values
    return _result('log', np.log(av), (a,), lambda g: (g / av,))


def absolute(a):
    a = _as_tensor(a)
    sign = np.sign(a.values)
    return _result('abs', np.abs(a.values), (a,), lambda g: (g * sign,))


def clip(a, low, high):
    """Clamp into [low, high]; clamped entries get zero gradient."""
    a = _as_tensor(a)
    mask = ((a.values >= low) & (a.values <= high)).astype(np.float64)
    return _result('clip', np.clip(a.values, low, high), (a,), lambda g: (g * mask,))


# Reductions

def _check_axis(op, a, axis):
    if axis is not None and not (0 <= axis < a.ndim):
        raise ShapeError(op, a.shape)


def sum(a, axis=None):  # noqa: A001
    a = _as_tensor(a)
    _check_axis('sum', a, axis)
    shape = a.shape
    return _result('sum', np.sum(a.values, axis=axis), (a,), lambda g: (_expand(g, shape, axis),))


def mean(a, axis=None):
    a = _as_tensor(a)
    _check_axis('mean', a, axis)
    if a.size == 0:
        raise ShapeError('mean', a.shape)
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    return _result(
        'mean', np.mean(a.values, axis=axis), (a,), lambda g: (_expand(g, shape, axis) / count,)
    )


def l1_norm(a, axis=None):
    a = _as_tensor(a)
    _check_axis('l1_norm', a, axis)
    shape = a.shape
    sign = np.sign(a.values)
    return _result(
        'l1_norm', np.sum(np.abs(a.values), axis=axis), (a,),
        lambda g: (_expand(g, shape, axis) * sign,),
    )


def squared_l2_norm(a, axis=None):
    a = _as_tensor(a)
    _check_axis('squared_l2_norm', a, axis)
    shape = a.shape
    av = a.values
    return _result(
        'squared_l2_norm', np.sum(av * av, axis=axis), (a,),
        lambda g: (2.0 * _expand(g, shape, axis) * av,),
    )


# Shape plumbing

def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError('reshape', a.shape, shape)
    original = a.shape
    return _result('reshape', a.values.reshape(shape), (a,), lambda g: (g.reshape(original),))


def repeat_rows(a, count):
    """Stack a vector ``count`` times into a ``count x len(a)`` matrix."""
    a = _as_tensor(a)
    if a.ndim != 1 or count < 1:
        raise ShapeError('repeat_rows', a.shape)
    return _result('repeat_rows', np.tile(a.values, (count, 1)), (a,), lambda g: (g.sum(axis=0),))
