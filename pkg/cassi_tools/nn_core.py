"""
Dense tensors with a recording tape for reverse-mode differentiation.

Every operation returns a new Tensor. When a Tape is active and one of the
inputs requires gradients, the operation is appended to the tape together
with a closure mapping the output gradient to the input gradients.
``backward(loss)`` replays that tape in reverse order.

Images are channel-last throughout: N x H x W x C.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from .errors import ConfigError, DimensionError, NonFiniteError, UsageError

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
MAX_RANK = 4
LN_EPS = 1e-6
CONV_MODES = ("standard", "depthwise", "transposed")

_local = threading.local()
_debug = os.environ.get("CASSI_DEBUG") == "1"


def set_debug(enabled: bool) -> None:
    """Raise NonFiniteError whenever an op turns finite inputs into NaN/Inf."""
    global _debug
    _debug = enabled


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An immutable n-d array (rank <= 4) that may take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}", axis="rank")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A learnable leaf tensor. Its gradient has the value's shape and starts at zero."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value)
        if value.shape != self.shape:
            raise DimensionError(
                f"parameter {self.name!r} expects shape {self.shape}, got {value.shape}", axis="shape"
            )
        self.data = value.astype(self.dtype, copy=True)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class TapeRecord:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed ops. Use as a context manager around a forward pass."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def parameters(self) -> list[Parameter]:
        """Parameters that took part in the recorded forward pass, in first-use order."""
        seen: dict[int, Parameter] = {}
        for rec in self.records:
            for t in rec.inputs:
                if isinstance(t, Parameter) and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def clear(self) -> None:
        self.records.clear()


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _lift(a, like), _lift(b, like)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append(TapeRecord(op, out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dParam into every participating leaf's ``grad``."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise UsageError("loss was not recorded; run the forward pass inside `with Tape():`")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        grad = pending.pop(id(rec.output), None)
        if grad is None:
            continue
        for tensor, g in zip(rec.inputs, rec.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            g = np.asarray(g, dtype=tensor.dtype)
            if tensor.tape is None:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            else:
                key = id(tensor)
                pending[key] = pending[key] + g if key in pending else g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# Elementwise and reduction ops
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(
        "div", a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def abs_(x: Tensor) -> Tensor:
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(x: Tensor, index: tuple) -> Tensor:
    """Basic (slice/int) indexing, differentiable."""

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("take", x.data[index], (x,), grad_fn)


def pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom and right of a rank-4 image tensor."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    data = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    return _emit("pad", data, (x,), lambda g: (g[:, :h, :w, :],))


# ----------------------------------------------------------------------------
# Activations
# ----------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_A * v ** 3))

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _emit("gelu", 0.5 * v * (1.0 + t), (x,), grad_fn)


def softplus(x: Tensor) -> Tensor:
    return _emit("softplus", np.logaddexp(0.0, x.data).astype(x.dtype), (x,),
                 lambda g: (g * special.expit(x.data),))


# ----------------------------------------------------------------------------
# Layer primitives
# ----------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b with W of shape (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input features {x.shape[-1]} do not match weight {weight.shape}", axis="features"
        )
    out_features = weight.shape[0]
    data = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (out_features,):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({out_features},)", axis="features")
        data = data + bias.data
        inputs.append(bias)

    def grad_fn(g):
        g2 = g.reshape(-1, out_features)
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, weight.shape[1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("linear", data, inputs, grad_fn)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the channel (last) axis, then apply the affine map."""
    c = x.shape[-1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise DimensionError(
            f"layer_norm: {c} channels but gain {gain.shape} / offset {offset.shape}", axis="channels"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def grad_fn(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("layer_norm", xhat * gain.data + offset.data, (x, gain, offset), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: N x H x W x C -> N x 1 x 1 x C."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a rank-4 input, got rank {x.ndim}", axis="rank")
    return mean(x, axis=(1, 2), keepdims=True)


def drop_path(x: Tensor, rate: float, training: bool,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero whole samples of a residual branch with probability ``rate``; rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop-path rate must satisfy 0 <= rate < 1, got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("drop_path in training mode needs a seeded generator")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, keep.reshape((-1,) + (1,) * (x.ndim - 1)))


def _conv_extent(n: int, k: int, stride: int, padding: int, mode: str) -> int:
    if mode == "transposed":
        return (n - 1) * stride - 2 * padding + k
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int, mode: str) -> None:
    if mode not in CONV_MODES:
        raise ConfigError(f"conv mode must be one of {CONV_MODES}, got {mode!r}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    if x.ndim != 4:
        raise DimensionError(f"conv2d needs an N x H x W x C input, got shape {x.shape}", axis="rank")
    want_rank = 3 if mode == "depthwise" else 4
    if weight.ndim != want_rank:
        raise DimensionError(
            f"{mode} conv weight must have rank {want_rank}, got shape {weight.shape}", axis="rank"
        )
    if weight.shape[2] != x.shape[3]:
        raise DimensionError(
            f"{mode} conv expects {weight.shape[2]} input channels, got {x.shape[3]}", axis="channels"
        )
    for axis, n, k in (("height", x.shape[1], weight.shape[0]), ("width", x.shape[2], weight.shape[1])):
        if _conv_extent(n, k, stride, padding, mode) < 1:
            raise DimensionError(f"{mode} conv with kernel {k} leaves no output along {axis}", axis=axis)


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, mode: str) -> np.ndarray:
    kh, kw = w.shape[:2]
    if mode == "transposed":
        n, h, wd, _ = x.shape
        hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
        full = np.zeros((n, hf, wf, w.shape[3]), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                full[:, _window(i, stride, h), _window(j, stride, wd), :] += x @ w[i, j]
        return full[:, padding:hf - padding, padding:wf - padding, :]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, _window(i, stride, ho), _window(j, stride, wo), :]
            term = patch * w[i, j] if mode == "depthwise" else patch @ w[i, j]
            if out is None:
                out = term
            else:
                out += term
    return out


def conv2d_backward_input(grad: np.ndarray, w: np.ndarray, input_shape: tuple,
                          stride: int, padding: int, mode: str) -> np.ndarray:
    """Adjoint of ``conv2d_forward`` with respect to its input."""
    kh, kw = w.shape[:2]
    n, h, wd, c = input_shape
    if mode == "transposed":
        gp = np.pad(grad, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else grad
        dx = np.zeros(input_shape, dtype=np.result_type(grad, w))
        for i in range(kh):
            for j in range(kw):
                dx += gp[:, _window(i, stride, h), _window(j, stride, wd), :] @ w[i, j].T
        return dx
    ho, wo = grad.shape[1], grad.shape[2]
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=np.result_type(grad, w))
    for i in range(kh):
        for j in range(kw):
            contrib = grad * w[i, j] if mode == "depthwise" else grad @ w[i, j].T
            dxp[:, _window(i, stride, ho), _window(j, stride, wo), :] += contrib
    return dxp[:, padding:padding + h, padding:padding + wd, :]


def _conv2d_backward_weight(grad: np.ndarray, x: np.ndarray, w: np.ndarray,
                            stride: int, padding: int, mode: str) -> np.ndarray:
    kh, kw = w.shape[:2]
    dw = np.zeros_like(w)
    if mode == "transposed":
        h, wd = x.shape[1], x.shape[2]
        gp = np.pad(grad, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else grad
        for i in range(kh):
            for j in range(kw):
                gslice = gp[:, _window(i, stride, h), _window(j, stride, wd), :]
                dw[i, j] = np.tensordot(x, gslice, axes=([0, 1, 2], [0, 1, 2]))
        return dw
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    ho, wo = grad.shape[1], grad.shape[2]
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, _window(i, stride, ho), _window(j, stride, wo), :]
            if mode == "depthwise":
                dw[i, j] = (patch * grad).sum(axis=(0, 1, 2))
            else:
                dw[i, j] = np.tensordot(patch, grad, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, mode: str = "standard") -> Tensor:
    """2-D convolution over N x H x W x C inputs.

    Weight layouts: standard and transposed use (kh, kw, C_in, C_out); depthwise
    uses (kh, kw, C), one filter per channel.
    """
    _check_conv(x, weight, stride, padding, mode)
    data = conv2d_forward(x.data, weight.data, stride, padding, mode)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (data.shape[-1],):
            raise DimensionError(
                f"conv bias shape {bias.shape} != ({data.shape[-1]},)", axis="channels"
            )
        data = data + bias.data
        inputs.append(bias)

    def grad_fn(g):
        grads = [
            conv2d_backward_input(g, weight.data, x.shape, stride, padding, mode),
            _conv2d_backward_weight(g, x.data, weight.data, stride, padding, mode),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return _emit(f"conv2d[{mode}]", data, inputs, grad_fn)


# ----------------------------------------------------------------------------
# Modules
# ----------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal values truncated at two standard deviations."""
    values = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype)


class Module:
    """Container of Parameters and sub-modules, discovered in attribute order."""

    training: bool = False

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        """All parameters with their ``name`` set to the attribute path. Order is stable."""
        params = []
        for name, param in self.named_parameters():
            param.name = name
            params.append(param)
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(
                f"state mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {unexpected[:5]}{'...' if len(unexpected) > 5 else ''}"
            )
        for name, param in own.items():
            param.assign(state[name])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.weight = Parameter(trunc_normal(rng, shape, dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, "standard")


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int, *, rng: np.random.Generator,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        if kernel_size % 2 != 1:
            raise ConfigError(f"depthwise kernel size must be odd, got {kernel_size}")
        self.weight = Parameter(trunc_normal(rng, (kernel_size, kernel_size, channels), dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.padding, "depthwise")


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.weight = Parameter(trunc_normal(rng, shape, dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, "transposed")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, *, dtype=DEFAULT_DTYPE):
        self.gain = Parameter(np.ones(channels, dtype=dtype))
        self.offset = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset)


# ----------------------------------------------------------------------------
# Finite-difference gradient check
# ----------------------------------------------------------------------------

@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], *, name: str = "",
              eps: float = 1e-5, samples: int = 6,
              rng: Optional[np.random.Generator] = None) -> GradcheckResult:
    """Compare tape gradients of ``fn`` against central finite differences.

    The output is reduced to a scalar with a fixed random projection. Up to
    ``samples`` entries of every input are perturbed. The reported error is
    normwise: max |analytic - numeric| / max |numeric| over all checked entries.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            log.warning("gradcheck on %s uses %s; finite differences need float64", name, t.dtype)
        t.data = t.data.copy()
        t.requires_grad = True
        t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None

    projection = rng.standard_normal(fn().shape)

    def scalar() -> float:
        return float(np.sum(fn().data * projection))

    with Tape():
        loss = sum_(mul(fn(), projection))
    backward(loss)

    analytic, numeric = [], []
    for t in inputs:
        picks = rng.choice(t.size, size=min(samples, t.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + eps
            f_plus = scalar()
            t.data[idx] = orig - eps
            f_minus = scalar()
            t.data[idx] = orig
            numeric.append((f_plus - f_minus) / (2.0 * eps))
            analytic.append(0.0 if t.grad is None else float(t.grad[idx]))

    analytic_arr, numeric_arr = np.array(analytic), np.array(numeric)
    scale = max(np.max(np.abs(numeric_arr)), 1e-12)
    error = float(np.max(np.abs(analytic_arr - numeric_arr)) / scale)
    log.debug("gradcheck %s: %d entries, max rel error %.3e", name, len(numeric), error)
    return GradcheckResult(name, error, len(numeric))
