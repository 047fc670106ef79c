"""Reverse-mode differentiable arrays (float64), named parameters, gradient checks and checkpoints.

A :class:`Value` wraps a numpy array. Every op returns a new Value that remembers its parents
and a closure mapping the output gradient to one gradient per parent. :func:`backward` walks the
graph in reverse topological order and accumulates gradients in construction order, so the same
graph always yields bitwise-identical gradients.
"""
import logging
import math
import struct
import zlib

import numpy as np

from .errors import NonFiniteLoss, NonScalarLoss, SchemaMismatch, ShapeMismatch
from .utils import Utils

logger = logging.getLogger('rel2prompt')

DTYPE = np.float64
CHECKPOINT_MAGIC = b'R2PCKPT1'


class Value:
    __slots__ = ('data', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, data, parents=(), backward=None, op='', requires_grad=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = bool(requires_grad)
        # constants drop their history; nothing upstream can receive a gradient
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Value(shape={self.shape}, op='{self.op}', requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def constant(x):
    return Value(x, requires_grad=False)


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"Cannot {op} shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, 'add')

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Value(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, 'subtract')

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Value(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, 'multiply')

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Value(a.data * b.data, (a, b), _backward, 'mul')


def matmul(a, b):
    """``a @ b`` for a vector or matrix ``a`` and a matrix ``b``."""
    a, b = as_value(a), as_value(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"Cannot matmul shapes {a.shape} and {b.shape}")

    def _backward(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g
    return Value(a.data @ b.data, (a, b), _backward, 'matmul')


def relu(x):
    x = as_value(x)
    positive = x.data > 0

    def _backward(g):
        return (g * positive,)
    return Value(np.where(positive, x.data, 0.0), (x,), _backward, 'relu')


def exp(x):
    x = as_value(x)
    out = np.exp(x.data)

    def _backward(g):
        return (g * out,)
    return Value(out, (x,), _backward, 'exp')


def log(x):
    x = as_value(x)

    def _backward(g):
        return (g / x.data,)
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(x.data)
    return Value(out, (x,), _backward, 'log')


def power(x, exponent):
    """Elementwise ``x ** exponent`` for a constant exponent."""
    x = as_value(x)
    exponent = float(exponent)
    if exponent == 0.0:
        return Value(np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),), 'power')

    def _backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)
    return Value(x.data ** exponent, (x,), _backward, 'power')


def abs_(x):
    x = as_value(x)
    sign = np.sign(x.data)

    def _backward(g):
        return (g * sign,)
    return Value(np.abs(x.data), (x,), _backward, 'abs')


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_value(x)

    def _backward(g):
        return (np.array(_expand(g, x.shape, axis, keepdims)),)
    return Value(x.data.sum(axis=axis, keepdims=keepdims), (x,), _backward, 'sum')


def mean(x, axis=None, keepdims=False):
    x = as_value(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeMismatch(f"Cannot take the mean over an empty axis of shape {x.shape}")

    def _backward(g):
        return (np.array(_expand(g, x.shape, axis, keepdims)) / count,)
    return Value(x.data.mean(axis=axis, keepdims=keepdims), (x,), _backward, 'mean')


def softmax(x, axis=-1):
    x = as_value(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Value(out, (x,), _backward, 'softmax')


def log_softmax(x, axis=-1):
    x = as_value(x)
    top = x.data.max(axis=axis, keepdims=True)
    out = x.data - top - np.log(np.exp(x.data - top).sum(axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Value(out, (x,), _backward, 'log_softmax')


def concat(values, axis=0):
    values = [as_value(v) for v in values]
    if not values:
        raise ShapeMismatch("Cannot concatenate an empty list")
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as error:
        raise ShapeMismatch(f"Cannot concatenate shapes {[v.shape for v in values]}: {error}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Value(out, values, _backward, 'concat')


def take(x, indices):
    """Row lookup ``x[indices]`` along axis 0 (embedding tables)."""
    x = as_value(x)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < -x.shape[0] or indices.max() >= x.shape[0]):
        raise ShapeMismatch(f"Row index out of range for table of {x.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, indices, g)
        return (grad,)
    return Value(x.data[indices], (x,), _backward, 'take')


def getitem(x, key):
    x = as_value(x)
    try:
        out = x.data[key]
    except IndexError as error:
        raise ShapeMismatch(f"Bad index {key!r} for shape {x.shape}: {error}") from None

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)
    return Value(out, (x,), _backward, 'getitem')


def reshape(x, shape):
    x = as_value(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"Cannot reshape {x.shape} into {shape}") from None

    def _backward(g):
        return (g.reshape(x.shape),)
    return Value(out, (x,), _backward, 'reshape')


def transpose(x, axes=None):
    x = as_value(x)
    inverse = None if axes is None else np.argsort(axes)

    def _backward(g):
        return (np.transpose(g, inverse),)
    return Value(np.transpose(x.data, axes), (x,), _backward, 'transpose')


def dropout(x, rate, rng, training):
    """Inverted dropout; the keep mask is a constant of the graph."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, constant(keep))


def causal_attention(q, k, v, heads):
    """
    Multi-head scaled dot-product attention where position i only attends to positions ≤ i.

    :param q: Queries, ``n × d``.
    :param k: Keys, ``n × d``.
    :param v: Values, ``n × d``.
    :param heads: Number of heads; must divide ``d``.
    :return: ``n × d`` attention output with heads concatenated.
    :rtype: Value
    """
    q, k, v = as_value(q), as_value(k), as_value(v)
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 2:
        raise ShapeMismatch(f"Attention inputs must share one n × d shape, got {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if d % heads:
        raise ShapeMismatch(f"Model width {d} is not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(a):
        return a.reshape(n, heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = qh @ kh.transpose(0, 2, 1) * scale
    future = np.triu(np.ones((n, n), dtype=bool), 1)
    scores[:, future] = -np.inf
    probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    out = (probs @ vh).transpose(1, 0, 2).reshape(n, d)

    def _backward(g):
        gh = split(g)
        grad_v = probs.transpose(0, 2, 1) @ gh
        grad_p = gh @ vh.transpose(0, 2, 1)
        grad_s = probs * (grad_p - (grad_p * probs).sum(axis=-1, keepdims=True)) * scale
        grad_q = grad_s @ kh
        grad_k = grad_s.transpose(0, 2, 1) @ qh

        def merge(a):
            return a.transpose(1, 0, 2).reshape(n, d)
        return merge(grad_q), merge(grad_k), merge(grad_v)
    return Value(out, (q, k, v), _backward, 'causal_attention')


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d loss / d x into ``x.grad`` for every leaf x that requires a gradient.

    :param loss: A single-element Value.
    :type loss: Value
    :raises NonScalarLoss: If ``loss`` holds more than one element.
    :raises NonFiniteLoss: If ``loss`` is NaN or infinite.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss(f"Loss is not finite: {loss.item()}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if not parent.requires_grad or grad is None:
                continue
            grad = np.asarray(grad, dtype=DTYPE).reshape(parent.shape)
            parent.grad = grad.copy() if parent.grad is None else parent.grad + grad


class ParameterStore:
    """
    Named trainable arrays plus per-parameter optimizer state.

    Initial values are drawn from a generator keyed by (seed, name), so a parameter's start
    value does not depend on the order in which parameters are created.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.params = {}
        self.state = {}
        self.frozen = set()

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __len__(self):
        return len(self.params)

    def names(self):
        return sorted(self.params)

    def create(self, name, shape, std=None, fill=None):
        """Register a new parameter; ``std`` draws from N(0, std²), otherwise a constant ``fill`` (default 0)."""
        if name in self.params:
            raise ValueError(f"Parameter {name} already exists")
        shape = tuple(int(s) for s in shape)
        if std is not None:
            rng = Utils.derive_rng(self.seed, zlib.crc32(name.encode('utf-8')))
            data = rng.normal(0.0, std, size=shape)
        else:
            data = np.full(shape, 0.0 if fill is None else fill, dtype=DTYPE)
        param = Value(data, requires_grad=name not in self.frozen)
        param.op = name
        self.params[name] = param
        return param

    def get_or_create(self, name, shape, std=None, fill=None):
        if name in self.params:
            return self.params[name]
        return self.create(name, shape, std, fill)

    def freeze(self, prefixes):
        """Stop gradients for every parameter whose name starts with one of ``prefixes``."""
        prefixes = tuple(prefixes)
        for name, param in self.params.items():
            if name.startswith(prefixes):
                self.frozen.add(name)
                param.requires_grad = False
                param.grad = None

    def is_frozen(self, name):
        return name in self.frozen

    def trainable(self):
        return [name for name in self.names() if name not in self.frozen]

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def gradients(self):
        return {name: self.params[name].grad for name in self.names()}

    def snapshot(self):
        return {name: self.params[name].data.copy() for name in self.names()}

    def load_arrays(self, arrays, strict=True):
        for name, array in arrays.items():
            if name not in self.params:
                if strict:
                    raise SchemaMismatch(f"Checkpoint parameter {name} is unknown to this model")
                continue
            if self.params[name].shape != array.shape:
                raise ShapeMismatch(f"Parameter {name} has shape {self.params[name].shape}, checkpoint has {array.shape}")
            self.params[name].data = np.array(array, dtype=DTYPE)

    def num_parameters(self, trainable_only=False):
        names = self.trainable() if trainable_only else self.names()
        return int(sum(self.params[n].size for n in names))


def check_gradients(f, store, h=1e-5, tol=None, max_coords=20, names=None, rng_seed=0):
    """
    Compare analytic gradients of ``f()`` against central differences.

    :param f: Zero-argument callable returning a scalar Value built from ``store``; must be deterministic.
    :param store: Parameters to perturb; frozen parameters are skipped.
    :type store: ParameterStore
    :param h: Finite-difference step.
    :param tol: When given, coordinates above it are logged as warnings.
    :param max_coords: Coordinates checked per parameter; larger parameters are subsampled.
    :param names: Optional subset of parameter names.
    :return: Max relative error |a − n| / max(|a|, |n|, 1e-6) over all checked coordinates.
    :rtype: float
    """
    store.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (store[name].grad if store[name].grad is not None else np.zeros(store[name].shape))
                for name in store.trainable()}
    worst = 0.0
    rng = Utils.derive_rng(rng_seed)
    for name in sorted(names or analytic):
        if name not in analytic:
            continue
        param = store[name]
        flat = param.data.reshape(-1)
        if flat.size <= max_coords:
            coords = range(flat.size)
        else:
            coords = sorted(rng.choice(flat.size, size=max_coords, replace=False).tolist())
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[i]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
            if tol is not None and error > tol:
                logger.warning(f"Gradient mismatch at {name}[{i}]: analytic {exact:.6e}, numeric {numeric:.6e}")
            worst = max(worst, error)
    store.zero_grad()
    return worst


def save_checkpoint(store, path):
    """
    Write every parameter in sorted-name order.

    Layout (little-endian): magic ``R2PCKPT1``, uint32 count, then per parameter uint32 name
    length, UTF-8 name, uint32 ndim, ndim × uint64 dims, float64 data in C order.
    """
    with open(path, 'wb') as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(struct.pack('<I', len(store)))
        for name in store.names():
            data = store[name].data
            encoded = name.encode('utf-8')
            file.write(struct.pack('<I', len(encoded)))
            file.write(encoded)
            file.write(struct.pack('<I', data.ndim))
            file.write(struct.pack(f'<{data.ndim}Q', *data.shape))
            file.write(np.ascontiguousarray(data, dtype='<f8').tobytes())
    logger.info(f"Saved {len(store)} parameters to {path}")


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint` into a name → array dict."""
    with open(path, 'rb') as file:
        blob = file.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise SchemaMismatch(f"{path} is not a rel2prompt checkpoint")
    try:
        return _read_arrays(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise SchemaMismatch(f"Checkpoint {path} is truncated or corrupt: {e}") from e


def _read_arrays(blob):
    offset = 8
    (count,) = struct.unpack_from('<I', blob, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (length,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        name = blob[offset:offset + length].decode('utf-8')
        offset += length
        (ndim,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        shape = struct.unpack_from(f'<{ndim}Q', blob, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype='<f8', count=size, offset=offset).astype(DTYPE).reshape(shape)
        offset += 8 * size
    return arrays
