"""
Tensor Network Engine
Reverse-mode automatic differentiation over numpy arrays, the layer set used by the
generator and the shared discriminator/auxiliary trunk, and the Adam optimizer

Every differentiable operation is a Function subclass with forward() on raw arrays and
backward() returning one gradient per parent. Tensors remember the Function that
produced them; Tensor.backward() walks that record in reverse topological order and
accumulates gradients into leaf tensors that require them.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from standardization_utils import DimensionError, GraphStateError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)

# Layer conventions
LRELU_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
DROPOUT_RATE = 0.5
INIT_STD = 0.02


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array with an optional gradient slot and a record of how it was produced"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _fn: 'Function' = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._fn = _fn

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # arithmetic
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __neg__(self): return Mul.apply(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> 'Tensor':
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def log(self) -> 'Tensor': return Log.apply(self)
    def exp(self) -> 'Tensor': return Exp.apply(self)
    def clip(self, low: float, high: float) -> 'Tensor': return Clip.apply(self, low=low, high=high)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient"""
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError('backward() without a seed gradient needs a scalar tensor',
                                      {'shape': self.shape})
            grad = np.ones_like(self.data)
        order = self._topological_order()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._fn is None:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._fn.parents, node._fn.backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

    def _topological_order(self) -> List['Tensor']:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._fn is not None:
                for parent in node._fn.parents:
                    if id(parent) not in seen and parent.requires_grad:
                        stack.append((parent, False))
        return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """One differentiable operation; instances double as the backward context"""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        parents = tuple(as_tensor(x) for x in inputs)
        fn = cls(*parents)
        out = fn.forward(*[p.data for p in parents], **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, _fn=fn if requires_grad else None)

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (_unbroadcast(grad / self.y, self.x.shape),
                _unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Clip(Function):
    """Clamp; the gradient passes only where the input is inside the range"""

    def forward(self, x, low=0.0, high=1.0):
        self.inside = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.inside,)


class KinkTrace:
    """
    Sign pattern of every piecewise-linear activation input seen while active.
    Finite differences are only meaningful when the pattern does not change.
    """

    current: Optional['KinkTrace'] = None

    def __init__(self):
        self.signs: List[np.ndarray] = []

    def __enter__(self):
        KinkTrace.current = self
        return self

    def __exit__(self, *exc):
        KinkTrace.current = None

    @staticmethod
    def record(positive: np.ndarray):
        if KinkTrace.current is not None:
            KinkTrace.current.signs.append(np.packbits(positive))

    def matches(self, other: 'KinkTrace') -> bool:
        return len(self.signs) == len(other.signs) and all(
            np.array_equal(a, b) for a, b in zip(self.signs, other.signs))


class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        KinkTrace.record(self.positive)
        return x * self.positive

    def backward(self, grad):
        return (grad * self.positive,)


class LeakyReLU(Function):
    def forward(self, x, slope=LRELU_SLOPE):
        positive = x > 0
        KinkTrace.record(positive)
        self.scale = np.where(positive, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = special.expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Softmax(Function):
    """Softmax over the last axis"""

    def forward(self, x):
        self.out = special.softmax(x, axis=-1)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


class Linear(Function):
    """x @ W.T + b with W shaped (out, in)"""

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Output extent and (before, after) padding so the output is ceil(size / stride)"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pads: Tuple[int, int, int, int]) -> np.ndarray:
    """(N, C, H, W) -> patches (N, C, kh, kw, OH, OW)"""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    oh = (h + pads[0] + pads[1] - kh) // stride + 1
    ow = (w + pads[2] + pads[3] - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols: np.ndarray, x_shape: Tuple[int, ...], stride: int, pads: Tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the (N, C, H, W) canvas"""
    n, c, h, w = x_shape
    kh, kw, oh, ow = cols.shape[2:]
    padded = np.zeros((n, c, h + pads[0] + pads[1], w + pads[2] + pads[3]), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return padded[:, :, pads[0]:pads[0] + h, pads[2]:pads[2] + w]


def _conv_pads(h: int, w: int, kh: int, kw: int, stride: int) -> Tuple[int, int, int, int]:
    _, top, bottom = same_padding(h, kh, stride)
    _, left, right = same_padding(w, kw, stride)
    return top, bottom, left, right


class Conv2D(Function):
    """Same-padded strided convolution, W shaped (F, C, kh, kw)"""

    def forward(self, x, w, b, stride=1):
        self.x_shape, self.w, self.stride = x.shape, w, stride
        kh, kw = w.shape[2:]
        self.pads = _conv_pads(x.shape[2], x.shape[3], kh, kw, stride)
        self.cols = _im2col(x, kh, kw, stride, self.pads)
        out = np.tensordot(self.cols, w, axes=([1, 2, 3], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(self, grad):
        dw = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 4, 5]))
        db = grad.sum(axis=(0, 2, 3))
        dcols = np.tensordot(grad, self.w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        dx = _col2im(dcols, self.x_shape, self.stride, self.pads)
        return dx, dw, db


class ConvTranspose2D(Function):
    """
    Upsampling convolution, the adjoint of a same-padded strided Conv2D.
    W shaped (C_in, C_out, kh, kw); output extent is input extent * stride.
    """

    def forward(self, x, w, b, stride=2):
        self.x, self.w, self.stride = x, w, stride
        n, _, h, wd = x.shape
        kh, kw = w.shape[2:]
        self.out_shape = (n, w.shape[1], h * stride, wd * stride)
        self.pads = _conv_pads(h * stride, wd * stride, kh, kw, stride)
        cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        return _col2im(cols, self.out_shape, stride, self.pads) + b[None, :, None, None]

    def backward(self, grad):
        kh, kw = self.w.shape[2:]
        cols = _im2col(grad, kh, kw, self.stride, self.pads)
        dx = np.tensordot(cols, self.w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(self.x, cols, axes=([0, 2, 3], [0, 4, 5]))
        db = grad.sum(axis=(0, 2, 3))
        return dx, dw, db


class BatchNormFn(Function):
    """Per-channel normalization; channel axis 1, statistics over every other axis"""

    def forward(self, x, gamma, beta, mean=None, var=None, eps=BN_EPSILON):
        self.axes = tuple(a for a in range(x.ndim) if a != 1)
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        self.shape = tuple(shape)
        self.train = mean is None
        if self.train:
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
        self.batch_mean, self.batch_var = mean, var
        self.inv = 1.0 / np.sqrt(var.reshape(self.shape) + eps)
        self.xhat = (x - mean.reshape(self.shape)) * self.inv
        self.gamma = gamma
        return gamma.reshape(self.shape) * self.xhat + beta.reshape(self.shape)

    def backward(self, grad):
        dgamma = np.sum(grad * self.xhat, axis=self.axes)
        dbeta = np.sum(grad, axis=self.axes)
        dxhat = grad * self.gamma.reshape(self.shape)
        if not self.train:
            return dxhat * self.inv, dgamma, dbeta
        count = grad.size / grad.shape[1]
        dx = (self.inv / count) * (
            count * dxhat
            - np.sum(dxhat, axis=self.axes, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=self.axes, keepdims=True)
        )
        return dx, dgamma, dbeta


def relu(x): return ReLU.apply(x)
def leaky_relu(x, slope=LRELU_SLOPE): return LeakyReLU.apply(x, slope=slope)
def sigmoid(x): return Sigmoid.apply(x)
def tanh(x): return Tanh.apply(x)
def softmax(x): return Softmax.apply(x)


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    'relu': relu,
    'lrelu': leaky_relu,
    'sigmoid': sigmoid,
    'tanh': tanh,
    'softmax': softmax,
    'identity': lambda x: x,
}


def truncated_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations"""
    values = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


@dataclass
class PassContext:
    """Per-forward settings handed to every layer"""
    mode: Mode
    rng: np.random.Generator


class Layer:
    """Base layer: parameters are trainable Tensors, buffers are plain arrays"""

    kind = 'layer'

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.name = self.kind

    def describe(self) -> str:
        return self.kind

    def __call__(self, x: Tensor, ctx: PassContext) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    kind = 'dense'

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params['weight'] = Tensor(truncated_normal((out_features, in_features), rng, dtype=dtype), requires_grad=True)
        self.params['bias'] = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def describe(self) -> str:
        return f"dense({self.in_features}->{self.out_features})"

    def __call__(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(self.name, f"(batch, {self.in_features})", x.shape)
        return Linear.apply(x, self.params['weight'], self.params['bias'])


class Conv(Layer):
    """Same-padded convolution; stride 2 halves the spatial extent"""

    kind = 'conv'

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel, self.stride = in_channels, out_channels, kernel, stride
        shape = (out_channels, in_channels, kernel, kernel)
        self.params['weight'] = Tensor(truncated_normal(shape, rng, dtype=dtype), requires_grad=True)
        self.params['bias'] = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def describe(self) -> str:
        return f"conv({self.in_channels}->{self.out_channels},k{self.kernel},s{self.stride})"

    def __call__(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(self.name, f"(batch, {self.in_channels}, H, W)", x.shape)
        return Conv2D.apply(x, self.params['weight'], self.params['bias'], stride=self.stride)


class ConvUp(Layer):
    """Transposed convolution; stride 2 doubles the spatial extent"""

    kind = 'conv_up'

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel, self.stride = in_channels, out_channels, kernel, stride
        shape = (in_channels, out_channels, kernel, kernel)
        self.params['weight'] = Tensor(truncated_normal(shape, rng, dtype=dtype), requires_grad=True)
        self.params['bias'] = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def describe(self) -> str:
        return f"conv_up({self.in_channels}->{self.out_channels},k{self.kernel},s{self.stride})"

    def __call__(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(self.name, f"(batch, {self.in_channels}, H, W)", x.shape)
        return ConvTranspose2D.apply(x, self.params['weight'], self.params['bias'], stride=self.stride)


class BatchNorm(Layer):
    """Batch statistics in train mode, running statistics (EMA) in eval mode"""

    kind = 'batchnorm'

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.params['gamma'] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.params['beta'] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.buffers['running_mean'] = np.zeros(channels, dtype=dtype)
        self.buffers['running_var'] = np.ones(channels, dtype=dtype)

    def describe(self) -> str:
        return f"batchnorm({self.channels})"

    def __call__(self, x, ctx):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise DimensionError(self.name, f"(batch, {self.channels}, ...)", x.shape)
        if ctx.mode == Mode.EVAL:
            return BatchNormFn.apply(x, self.params['gamma'], self.params['beta'],
                                     mean=self.buffers['running_mean'], var=self.buffers['running_var'])
        fn_out = BatchNormFn.apply(x, self.params['gamma'], self.params['beta'])
        stats_fn = fn_out._fn
        if stats_fn is not None:
            batch_mean, batch_var = stats_fn.batch_mean, stats_fn.batch_var
        else:
            axes = tuple(a for a in range(x.ndim) if a != 1)
            batch_mean, batch_var = x.data.mean(axis=axes), x.data.var(axis=axes)
        dtype = self.buffers['running_mean'].dtype
        self.buffers['running_mean'] = (BN_MOMENTUM * self.buffers['running_mean']
                                        + (1.0 - BN_MOMENTUM) * batch_mean).astype(dtype)
        self.buffers['running_var'] = (BN_MOMENTUM * self.buffers['running_var']
                                       + (1.0 - BN_MOMENTUM) * batch_var).astype(dtype)
        return fn_out


class Activation(Layer):
    kind = 'activation'

    def __init__(self, function: str):
        super().__init__()
        if function not in ACTIVATIONS:
            raise ValidationError(f"Unknown activation '{function}'")
        self.function = function

    def describe(self) -> str:
        return self.function

    def __call__(self, x, ctx):
        return ACTIVATIONS[self.function](x)


class Dropout(Layer):
    """Inverted dropout, active only in train mode"""

    kind = 'dropout'

    def __init__(self, rate: float = DROPOUT_RATE):
        super().__init__()
        self.rate = rate

    def describe(self) -> str:
        return f"dropout({self.rate})"

    def __call__(self, x, ctx):
        if ctx.mode == Mode.EVAL or self.rate == 0:
            return x
        keep = (ctx.rng.random(x.shape) >= self.rate).astype(x.data.dtype) / (1.0 - self.rate)
        return x * keep


class Unflatten(Layer):
    """(batch, prod(shape)) -> (batch, *shape)"""

    kind = 'unflatten'

    def __init__(self, *shape: int):
        super().__init__()
        self.target = tuple(shape)

    def describe(self) -> str:
        return f"unflatten{self.target}"

    def __call__(self, x, ctx):
        per_sample = int(np.prod(x.shape[1:]))
        if per_sample != int(np.prod(self.target)):
            raise DimensionError(self.name, self.target, x.shape[1:])
        return x.reshape((x.shape[0],) + self.target)


class Flatten(Layer):
    kind = 'flatten'

    def __call__(self, x, ctx):
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


class BlockSoftmax(Layer):
    """(batch, N * k) logits -> (batch, N, k) per-node categorical probabilities"""

    kind = 'block_softmax'

    def __init__(self, nodes: int, width: int):
        super().__init__()
        self.nodes, self.width = nodes, width

    def describe(self) -> str:
        return f"block_softmax({self.nodes}x{self.width})"

    def __call__(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.nodes * self.width:
            raise DimensionError(self.name, f"(batch, {self.nodes * self.width})", x.shape)
        return softmax(x.reshape(x.shape[0], self.nodes, self.width))


class BlockMean(Layer):
    """(batch, N * k) -> (batch, N, k) factored-Gaussian means (unit variance)"""

    kind = 'block_mean'

    def __init__(self, nodes: int, width: int):
        super().__init__()
        self.nodes, self.width = nodes, width

    def describe(self) -> str:
        return f"block_mean({self.nodes}x{self.width})"

    def __call__(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.nodes * self.width:
            raise DimensionError(self.name, f"(batch, {self.nodes * self.width})", x.shape)
        return x.reshape(x.shape[0], self.nodes, self.width)


class NetworkGraph:
    """
    A trunk of layers plus named heads that all consume the trunk's final hidden tensor.
    Parameters are addressed as '<section>.<index>.<param>' where section is 'trunk'
    or a head name.
    """

    def __init__(self, name: str, trunk: List[Layer], heads: Dict[str, List[Layer]], seed: int = 0, dtype=np.float32):
        self.name = name
        self.trunk = trunk
        self.heads = heads
        self.dtype = np.dtype(dtype)
        self.frozen: set = set()
        self._rng = np.random.default_rng(seed)
        self._trained_forward = False
        for section, layers in self.sections():
            for index, layer in enumerate(layers):
                layer.name = f"{self.name}.{section}.{index}.{layer.kind}"

    def sections(self) -> List[Tuple[str, List[Layer]]]:
        return [('trunk', self.trunk)] + list(self.heads.items())

    def layer_table(self) -> List[str]:
        return [f"{section}.{index}:{layer.describe()}"
                for section, layers in self.sections() for index, layer in enumerate(layers)]

    def parameters(self, heads: Optional[Sequence[str]] = None, include_trunk: bool = True) -> Dict[str, Tensor]:
        """Parameters of the trunk and the selected heads (all heads by default)"""
        selected = []
        if include_trunk:
            selected.append(('trunk', self.trunk))
        for head, layers in self.heads.items():
            if heads is None or head in heads:
                selected.append((head, layers))
        return {f"{section}.{index}.{key}": tensor
                for section, layers in selected
                for index, layer in enumerate(layers)
                for key, tensor in layer.params.items()}

    def buffers(self) -> Dict[str, Tuple[Layer, str]]:
        return {f"{section}.{index}.{key}": (layer, key)
                for section, layers in self.sections()
                for index, layer in enumerate(layers)
                for key in layer.buffers}

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, in table order"""
        values = {name: tensor.data for name, tensor in self.parameters().items()}
        values.update({name: layer.buffers[key] for name, (layer, key) in self.buffers().items()})
        return values

    def load_state(self, values: Dict[str, np.ndarray]):
        params, buffers = self.parameters(), self.buffers()
        for name, value in values.items():
            if name in params:
                target = params[name]
                if target.shape != value.shape:
                    raise DimensionError(name, target.shape, value.shape)
                target.data = np.asarray(value, dtype=self.dtype).copy()
            elif name in buffers:
                layer, key = buffers[name]
                layer.buffers[key] = np.asarray(value, dtype=self.dtype).copy()
            else:
                raise ValidationError(f"Unknown tensor '{name}' for graph '{self.name}'")

    def freeze(self, head: str):
        """Stop gradients into one head"""
        self.frozen.add(head)
        for tensor in self.parameters(heads=[head], include_trunk=False).values():
            tensor.requires_grad = False
            tensor.grad = None

    def unfreeze(self, head: str):
        self.frozen.discard(head)
        for tensor in self.parameters(heads=[head], include_trunk=False).values():
            tensor.requires_grad = True

    def zero_grad(self):
        for tensor in self.parameters().values():
            tensor.grad = None

    def forward(self, x, mode: Mode = Mode.TRAIN, heads: Optional[Sequence[str]] = None,
                dropout_seed: Optional[int] = None) -> Dict[str, Tensor]:
        """Run the trunk once and every requested head on its output"""
        x = as_tensor(x)
        if x.data.dtype != self.dtype and x._fn is None:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        rng = self._rng if dropout_seed is None else np.random.default_rng(dropout_seed)
        ctx = PassContext(mode, rng)
        hidden = x
        for layer in self.trunk:
            hidden = layer(hidden, ctx)
        outputs = {}
        for head in (heads if heads is not None else list(self.heads)):
            if head not in self.heads:
                raise ValidationError(f"Graph '{self.name}' has no head '{head}'")
            out = hidden
            for layer in self.heads[head]:
                out = layer(out, ctx)
            outputs[head] = out
        if mode == Mode.TRAIN:
            self._trained_forward = True
        return outputs

    def backward(self, loss: Tensor) -> Dict[str, Optional[np.ndarray]]:
        """Fill gradient slots from a scalar loss; returns gradients by parameter name"""
        if not self._trained_forward:
            raise GraphStateError(f"backward() on graph '{self.name}' before a train-mode forward()")
        loss.backward()
        return {name: tensor.grad for name, tensor in self.parameters().items()}


@dataclass
class AdamState:
    """Moments, step counter and hyperparameters of one Adam optimizer"""

    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


MAX_ADAM_STEPS = 2 ** 31


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Optional[Dict[str, Optional[np.ndarray]]] = None) -> Dict[str, Tensor]:
    """
    Bias-corrected Adam update in place. Parameters without a gradient are skipped,
    which keeps inactive heads bit-identical.
    """
    if grads is None:
        grads = {name: tensor.grad for name, tensor in params.items()}
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NonFiniteError(name, f"Non-finite gradient for parameter '{name}'")
    if state.step + 1 >= MAX_ADAM_STEPS:
        raise ValidationError('Adam step counter overflow', details={'step': state.step})

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise DimensionError(name, tensor.shape, grad.shape)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = (tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.data.dtype)
    return params


@dataclass
class GradientCheckResult:
    max_relative_error: float
    worst_parameter: Optional[str]
    checked_entries: int
    skipped_entries: int = 0


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)


def gradient_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-4,
                   max_entries: Optional[int] = None, seed: int = 0) -> GradientCheckResult:
    """
    Compare analytic gradients of loss_fn() with central finite differences.
    loss_fn must be deterministic (fixed dropout seed); params should be 64-bit.
    Entries whose perturbation moves a ReLU/LeakyReLU input across zero are skipped.
    """
    def evaluate():
        with KinkTrace() as trace:
            value = loss_fn().item()
        return value, trace

    for tensor in params.values():
        tensor.grad = None
    with KinkTrace() as baseline:
        loss = loss_fn()
    loss.backward()
    analytic = {name: (tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data))
                for name, tensor in params.items()}

    rng = np.random.default_rng(seed)
    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for index in indices:
            original = flat[index]
            flat[index] = original + h
            plus, plus_trace = evaluate()
            flat[index] = original - h
            minus, minus_trace = evaluate()
            flat[index] = original
            if not (baseline.matches(plus_trace) and baseline.matches(minus_trace)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            error = relative_error(float(analytic[name].reshape(-1)[index]), numeric)
            checked += 1
            if error > worst:
                worst, worst_name = error, name
    logger.debug(f"gradient check: {checked} entries ({skipped} skipped at kinks), "
                 f"max relative error {worst:.3e} ({worst_name})")
    return GradientCheckResult(worst, worst_name, checked, skipped)
