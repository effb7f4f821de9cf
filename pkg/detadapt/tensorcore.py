"""Dense reverse-mode differentiation over numpy arrays.

Every op builds a node holding its output array, the parents that need
gradients and a closure that pushes the upstream gradient into them. The tape
is dynamic: it is rebuilt by each forward pass and released by ``backward``.
"""
from __future__ import annotations

import logging
import math
import struct
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError, GradientError, ShapeError, StatisticsError


logger = logging.getLogger("detadapt.tensorcore")

CHECKPOINT_MAGIC = b"DADC"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32) -> None:
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._freed = False

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: Callable[[np.ndarray], None],
    ) -> Tensor:
        """Register ``data`` as the output of an op; ``backward`` receives the upstream grad."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward if out.requires_grad else None
        out._freed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """Trainable leaf; ``name`` is filled in from the owning module path."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(value, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable tensor that requires it, then free the tape.

    Leaf gradients accumulate across calls until ``zero_grad``.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GradientError("graph was already released by an earlier backward pass")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss._accumulate(seed)
        return
    loss.grad = seed

    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
            node._freed = True


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor.from_op(out, (a, b), _backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor.from_op(out, (a, b), _backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(out, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * factor

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g * factor)

    return Tensor.from_op(out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return Tensor.from_op(out, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g * s * (1.0 - s))

    return Tensor.from_op(s, (x,), _backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor.from_op(out, (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    return Tensor.from_op(out, (x,), _backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = x.data.transpose(axes)
    inverse = tuple(int(a) for a in np.argsort(axes))

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g.transpose(inverse))

    return Tensor.from_op(out, (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor.from_op(out, tuple(tensors), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return Tensor.from_op(out, parents, _backward)


def _window_slices(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,k,k]`` via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    batch, cin, height, width = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding nonnegative")
    if height + 2 * padding < k or width + 2 * padding < k:
        raise ShapeError(f"conv2d: padded input {height}x{width}+{padding} smaller than kernel {k}")

    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    cols = np.empty((batch, cin, k, k, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, _window_slices(i, stride, out_h), _window_slices(j, stride, out_w)]

    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.tensordot(weight.data, g, axes=([0], [1]))  # Cin,k,k,B,oh,ow
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, _window_slices(i, stride, out_h), _window_slices(j, stride, out_w)] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return Tensor.from_op(out, parents, _backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    batch, channels, height, width = x.shape
    if height < kernel or width < kernel:
        raise ShapeError(f"max_pool2d: input {height}x{width} smaller than kernel {kernel}")
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    offsets = [(i, j) for i in range(kernel) for j in range(kernel)]
    windows = np.stack(
        [x.data[:, :, _window_slices(i, stride, out_h), _window_slices(j, stride, out_w)] for i, j in offsets],
        axis=2,
    )
    winner = windows.argmax(axis=2)
    out = np.take_along_axis(windows, winner[:, :, None], axis=2)[:, :, 0]

    def _backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        for n, (i, j) in enumerate(offsets):
            dx[:, :, _window_slices(i, stride, out_h), _window_slices(j, stride, out_w)] += g * (winner == n)
        x._accumulate(dx)

    return Tensor.from_op(out, (x,), _backward)


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects [B,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


def upsample_nearest_2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest_2x expects [B,C,H,W], got {x.shape}")
    batch, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)))

    return Tensor.from_op(out, (x,), _backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    updates: int = 0


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Normalize over (B,H,W). In train mode batch statistics are used and, unless
    ``update_stats`` is off, folded into the running estimates."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: affine shape does not match {channels} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    view = (1, channels, 1, 1)

    if training:
        if count < 2:
            raise ShapeError("batch_norm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[...] = (1 - momentum) * stats.var + momentum * var * count / (count - 1)
            stats.updates += 1
    else:
        if stats.updates == 0:
            raise StatisticsError("batch_norm in eval mode before running statistics were initialized")
        mu = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def _backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(view)
            if training:
                gx = gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            x._accumulate(gx * inv_std.reshape(view))

    return Tensor.from_op(out, (x, gamma, beta), _backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * keep

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g * keep)

    return Tensor.from_op(out, (x,), _backward)


class GradientReversal:
    """Identity forward; multiplies the upstream gradient by ``-lam`` on the way back."""

    def __init__(self, lam: float) -> None:
        if lam < 0:
            raise ValueError(f"gradient reversal coefficient must be nonnegative, got {lam}")
        self.lam = float(lam)

    def __call__(self, x: Tensor) -> Tensor:
        factor = x.dtype.type(-self.lam)

        def _backward(g: np.ndarray) -> None:
            x._accumulate(g * factor)

        return Tensor.from_op(x.data.copy(), (x,), _backward)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    return GradientReversal(lam)(x)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{idx}", item

    def _local_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = prefix + name
                yield value.name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, array in self._local_buffers().items():
            yield prefix + name, array
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    @contextmanager
    def frozen_statistics(self) -> Iterator[Module]:
        """Batch norms inside the block use batch statistics but leave their running estimates alone."""
        norms = [m for m in self.modules() if isinstance(m, BatchNorm2d)]
        previous = [m.track_stats for m in norms]
        for norm in norms:
            norm.track_stats = False
        try:
            yield self
        finally:
            for norm, flag in zip(norms, previous):
                norm.track_stats = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        bad_shape = sorted(
            f"{name} (expected {own[name].shape}, got {np.shape(state[name])})"
            for name in set(own) & set(state)
            if own[name].shape != np.shape(state[name])
        )
        if bad_shape or (strict and (missing or unexpected)):
            raise CheckpointMismatchError(missing + bad_shape, unexpected)
        for name, target in own.items():
            if name in state:
                target[...] = state[name]
        self._mark_loaded()

    def _mark_loaded(self) -> None:
        for _, child in self.children():
            child._mark_loaded()

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for _, child in self.children():
            child._cast_buffers(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.stats = RunningStats(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps
        self.track_stats = True

    def _local_buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def _mark_loaded(self) -> None:
        self.stats.updates = max(self.stats.updates, 1)

    def _cast_buffers(self, dtype) -> None:
        self.stats.mean = self.stats.mean.astype(dtype)
        self.stats.var = self.stats.var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.stats, self.training, self.momentum, self.eps, self.track_stats
        )


class SGD:
    """Momentum SGD without weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for p, velocity in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            velocity *= self.momentum
            velocity += p.grad
            p.data -= p.data.dtype.type(self.lr) * velocity


def save_checkpoint(state: dict[str, np.ndarray], path: str | Path) -> Path:
    """Write ``name -> array`` as the versioned little-endian float32 checkpoint format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug("checkpoint with %s entries written to %s", len(state), path)
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMismatchError([], [f"{path} is not a checkpoint file"])
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError([], [f"unsupported checkpoint version {version}"])
    offset = 12
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = math.prod(shape)
        state[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * size
    return state


@dataclass(frozen=True)
class GradcheckResult:
    errors: tuple[float, ...]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tolerance


def gradcheck(
    fn: Callable[[list[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
    tolerance: float = 1e-3,
) -> GradcheckResult:
    """Compare analytic grads of scalar ``fn`` to central differences, in float64.

    The error per input is ``|analytic - numeric| / (|numeric| + 1e-8)`` taken
    over the whole gradient vector.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    fn(leaves).backward()
    analytic = [leaf.grad for leaf in leaves]

    errors = []
    for idx, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for pos in range(flat.size):
            original = flat[pos]
            flat[pos] = original + h
            plus = fn([Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[pos] = original - h
            minus = fn([Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[pos] = original
            numeric.reshape(-1)[pos] = (plus - minus) / (2 * h)
        diff = np.linalg.norm(analytic[idx] - numeric)
        errors.append(float(diff / (np.linalg.norm(numeric) + 1e-8)))
    return GradcheckResult(tuple(errors), tolerance)
