"""
A minimal reverse-mode automatic differentiation engine over dense numpy arrays.

Every operation returns a new `Tensor`. When at least one input requires a gradient (and
recording hasn't been switched off with `no_grad()`), the output carries a `Node`: the
inputs plus the rule mapping the output gradient onto input gradients. Calling
`backward()` on a scalar result orders the reachable nodes into a `GradientGraph`, runs the
rules in reverse and then releases the graph, so each forward pass supports exactly one
backward pass.

Only the operations the fusion and detection pipelines need are provided. Broadcasting is
limited to what numpy does for `add`, `sub` and `mul`; gradients are summed back onto the
broadcast input shape.
"""
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax as _softmax

from .const import EPS_CLAMP, EPS_DICE
from .errors import GraphError, LabelRangeError, ShapeError


_recording = threading.local()


def is_grad_enabled():
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad():
    """
    Run operations without recording a gradient graph (per thread).
    """
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


class Node(object):
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor(object):
    """
    An n-dimensional array that can take part in a gradient graph.

    Integer or boolean data is promoted to float32; floating data keeps its dtype, so the
    same code paths run in float32 for training and float64 for gradient checks.
    """

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None
        self._consumed = False

    def __repr__(self):
        if self.name:
            return "<Tensor %r shape=%s>" % (self.name, self.shape)
        return "<Tensor shape=%s dtype=%s>" % (self.shape, self.dtype)

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        GradientGraph(self).backward()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


class GradientGraph(object):
    """
    The operations reachable from a scalar root, inputs ordered before outputs.
    """

    def __init__(self, root):
        if root._consumed:
            raise GraphError(
                "backward() already ran for this graph; run a new forward pass first"
            )
        if root.size != 1:
            raise GraphError("backward() needs a scalar root, got shape %s" % (root.shape,))
        if not root.requires_grad:
            raise GraphError("backward() root doesn't require a gradient")
        self.root = root
        self.tensors = self._toposort(root)
        self.consumed = False

    @staticmethod
    def _toposort(root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for inp in tensor._node.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    def backward(self):
        if self.consumed:
            raise GraphError("This gradient graph has already been consumed")
        pending = {id(self.root): np.ones_like(self.root.data)}
        for tensor in reversed(self.tensors):
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            node = tensor._node
            if node is None:
                continue
            for inp, inp_grad in zip(node.inputs, node.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                inp_grad = _unbroadcast(inp_grad, inp.shape)
                key = id(inp)
                pending[key] = inp_grad if key not in pending else pending[key] + inp_grad
        for tensor in self.tensors:
            if tensor._node is not None:
                tensor._node = None
                tensor._consumed = True
        self.root._consumed = True
        self.consumed = True


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, inputs, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _values(target):
    return target.data if isinstance(target, Tensor) else np.asarray(target)


# Elementwise and structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward, "mul")


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def tensor_sum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, x.shape)),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x):
    return tensor_sum(x) * (1.0 / x.size)


def getitem(x, index):
    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result(x.data[index], (x,), backward, "getitem")


def stack(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack() needs at least one tensor")
    shapes = set(t.shape for t in tensors)
    if len(shapes) != 1:
        raise ShapeError("stack() needs identical shapes, got %s" % sorted(shapes))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward,
                   "stack")


def concat(tensors, axis=1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   backward, "concat")


def relu(x):
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * positive,), "relu")


def sigmoid(x):
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def softmax(x, axis):
    y = _softmax(x.data, axis=axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def softmax_over_stack(inputs):
    """
    Normalize K same-shaped tensors against each other pixel by pixel: output j at p is
    exp(Q_j(p)) / sum_k exp(Q_k(p)). Returns K tensors summing to one everywhere.
    """
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("softmax_over_stack() needs at least one input")
    weights = softmax(stack(inputs, axis=0), axis=0)
    return [weights[i] for i in range(len(inputs))]


# Spatial ops, NCHW layout


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            "conv2d: expected input [N,C,H,W] and weight [F,C,k,k], got %s and %s"
            % (x.shape, weight.shape)
        )
    n, channels, height, width = x.shape
    filters, weight_channels, k, k2 = weight.shape
    if channels != weight_channels:
        raise ShapeError(
            "conv2d: input has %d channels but weight %s expects %d"
            % (channels, weight.shape, weight_channels)
        )
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d: kernel must be square with odd size, got %dx%d" % (k, k2))
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1, got %d" % stride)
    if height + 2 * padding < k or width + 2 * padding < k:
        raise ShapeError(
            "conv2d: %dx%d input with padding %d is smaller than the %dx%d kernel"
            % (height, width, padding, k, k)
        )
    if bias is not None and bias.shape != (filters,):
        raise ShapeError("conv2d: bias shape %s doesn't match %d filters" % (bias.shape, filters))

    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad) if padding else x.data
    # [N, C, H', W', k, k]
    cols = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            grad_cols = np.tensordot(g, weight.data, axes=([1], [0]))  # [N, H', W', C, k, k]
            grad_padded = np.zeros_like(padded)
            h_end = stride * (out_h - 1) + 1
            w_end = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + h_end:stride, j:j + w_end:stride] += (
                        grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward, "conv2d")


def max_pool2x(x):
    n, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError("max_pool2x: spatial dims %dx%d must be even" % (height, width))
    h2, w2 = height // 2, width // 2
    windows = (
        x.data.reshape(n, channels, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, channels, h2, w2, 4)
    )
    argmax = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, argmax, axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(windows)
        np.put_along_axis(grad, argmax, g[..., None], axis=-1)
        grad = grad.reshape(n, channels, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (grad.reshape(x.shape),)

    return _result(out, (x,), backward, "max_pool2x")


def upsample_nearest2x(x):
    n, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, channels, height, 2, width, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest2x")


# Losses


def cross_entropy(logits, labels):
    """
    Mean over all pixels of -log softmax(logits)[label]. `labels` is an integer array
    shaped [N, H, W] with values in [0, C).
    """
    labels = np.asarray(_values(labels))
    n, n_classes, height, width = logits.shape
    if labels.shape != (n, height, width):
        raise ShapeError(
            "cross_entropy: labels %s don't match logits %s" % (labels.shape, logits.shape)
        )
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        coordinate = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelRangeError(coordinate, int(labels[coordinate]), n_classes)
    labels = labels.astype(np.int64)
    log_probs = log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(log_probs, labels[:, None], axis=1)
    count = n * height * width
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        on_label = np.take_along_axis(grad, labels[:, None], axis=1)
        np.put_along_axis(grad, labels[:, None], on_label - 1, axis=1)
        return (grad * (g / count),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def bce_loss(pred, target, eps=EPS_CLAMP):
    """
    Binary cross entropy, mean of -[t log p + (1 - t) log(1 - p)] with p clamped into
    [eps, 1 - eps]. Clamped entries pass no gradient.
    """
    t = np.asarray(_values(target), dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError("bce_loss: target %s doesn't match prediction %s" % (t.shape, pred.shape))
    p = np.clip(pred.data, eps, 1 - eps)
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    inside = (pred.data > eps) & (pred.data < 1 - eps)

    def backward(g):
        return (g * inside * (p - t) / (p * (1 - p)) / p.size,)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "bce_loss")


def dice_coefficient(pred, target, eps=EPS_DICE):
    """
    Smoothed overlap (2 sum(p t) + eps) / (sum(p) + sum(t) + eps). Empty prediction and
    target score exactly 1.
    """
    t = np.asarray(_values(target), dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(
            "dice_coefficient: target %s doesn't match prediction %s" % (t.shape, pred.shape)
        )
    intersection = (pred.data * t).sum()
    denominator = pred.data.sum() + t.sum() + eps
    numerator = 2 * intersection + eps

    def backward(g):
        return (g * (2 * t * denominator - numerator) / denominator ** 2,)

    return _result(np.asarray(numerator / denominator, dtype=pred.dtype), (pred,), backward,
                   "dice_coefficient")
