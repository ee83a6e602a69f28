"""Minimal deterministic tensor engine with reverse-mode differentiation.

Values are dense 64-bit float arrays of rank 1..4 in batch-channel-height-width
order. Every operation records its inputs and a backward closure, so the
computation graph is the implicit tape hanging off the final tensor; calling
``backward`` on a scalar loss walks that tape in reverse topological order and
accumulates gradients into every reachable tensor that requires them.

Design constraints honoured throughout:

* all forward math is plain numpy on float64, so identical inputs give
  bit-identical outputs across runs;
* output shapes are a pure function of input shapes, and every shape violation
  raises :class:`ShapeError` naming the offending dimensions;
* tensors are immutable once produced (parameters are the one exception: the
  optimizer updates their storage in place between graph constructions).
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "MissingGradientError",
    "Tensor",
    "custom_op",
    "topo_order",
    "ParameterStore",
    "xavier_uniform",
    "conv2d",
    "avg_pool2x2",
    "global_avg_pool",
    "fully_connected",
    "activate",
    "sigmoid",
    "relu",
    "softmax_lastdim",
    "combine",
    "add",
    "mul_elementwise",
    "mul_channelwise",
    "mul_spatialwise",
    "concat_channels",
    "scale",
    "reshape",
    "permute",
    "take_column",
    "sum_all",
    "mean_all",
    "log",
    "clamp_min",
    "AdamState",
    "adam_step",
    "GradCheckEntry",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


class NumericError(ArithmeticError):
    """A numeric invariant (finiteness, scalar loss, domain) is violated."""


class MissingGradientError(RuntimeError):
    """A parameter that should carry a gradient does not."""


class Tensor:
    """Dense float64 value of rank 1..4 plus an optional gradient slot.

    ``array`` is the row-major numpy storage; ``dims`` and ``data`` expose the
    shape tuple and the flat view. Tensors built by operations keep references
    to their parent tensors and a backward closure, which together form the
    autodiff tape.
    """

    __slots__ = ("array", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, array, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support rank 1..4, got rank {arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"tensor dims must all be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite (no NaN/Inf)")
        self.array = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise NumericError(f"item() requires a single-element tensor, dims {self.dims}")
        return float(self.array.reshape(-1)[0])

    def detach(self) -> np.ndarray:
        """Copy of the forward value with no graph attachment."""
        return self.array.copy()

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` for every reachable node.

        ``self`` must hold exactly one element (a scalar loss).
        """
        if self.array.size != 1:
            raise NumericError(f"backward() requires a scalar loss, got dims {self.dims}")
        self.grad = np.ones_like(self.array)
        if not self.requires_grad:
            return
        for node in reversed(topo_order(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{tag}, requires_grad={self.requires_grad})"


def custom_op(
    array: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    name: str | None = None,
) -> Tensor:
    """Wrap a forward result as a graph node with an explicit backward closure.

    ``backward_fn`` receives the gradient w.r.t. the output and must call
    :func:`accumulate_grad` on each parent that requires a gradient. This is
    the extension point every built-in op uses.
    """
    out = Tensor.__new__(Tensor)
    out.array = np.ascontiguousarray(array, dtype=np.float64)
    out.grad = None
    out.name = name
    out._parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out._parents)
    out._backward_fn = backward_fn if out.requires_grad else None
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (functionally: stored arrays are never mutated)."""
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# Parameters


class ParameterStore:
    """Ordered registry of named trainable tensors.

    Acts as the graph's parameter table: insertion order is deterministic,
    names are unique, and gradient accumulators live on the tensors themselves.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def n_elements(self) -> int:
        return sum(p.array.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def export_arrays(self) -> dict[str, np.ndarray]:
        """Name -> copy of current values, in registration order."""
        return {name: p.array.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and dims must match exactly."""
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
        for name, arr in arrays.items():
            p = self._params[name]
            a = np.asarray(arr, dtype=np.float64)
            if a.shape != p.array.shape:
                raise ShapeError(f"parameter {name!r}: stored dims {a.shape} != expected {p.array.shape}")
            p.array[...] = a


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    """Seeded uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Operations


def _require_rank(t: Tensor, rank: int, op: str, arg: str) -> None:
    if t.array.ndim != rank:
        raise ShapeError(f"{op}: {arg} must have rank {rank}, got dims {t.dims}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and pad == 0:
        return x.reshape(n, c, h * w), ho, wo
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return view.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        return cols.reshape(n, c, h, w)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over [N, Cin, H, W] with odd square-or-rect kernels.

    Output is [N, Cout, H', W'] with H' = (H + 2*pad - kh)/stride + 1, which
    must be integral. Differentiable w.r.t. input, weight and bias; the
    forward uses an im2col lowering whose equivalence with a direct
    nested-loop convolution is pinned by tests.
    """
    _require_rank(x, 4, "conv2d", "input")
    _require_rank(weight, 4, "conv2d", "weight")
    _require_rank(bias, 1, "conv2d", "bias")
    n, cin, h, w = x.dims
    cout, wcin, kh, kw = weight.dims
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels ({cin}) != weight input channels ({wcin})")
    if bias.dims[0] != cout:
        raise ShapeError(f"conv2d: bias length ({bias.dims[0]}) != output channels ({cout})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got ({kh}, {kw})")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0, got ({stride}, {pad})")
    for dim, k, label in ((h, kh, "height"), (w, kw, "width")):
        span = dim + 2 * pad - k
        if span < 0 or span % stride != 0:
            raise ShapeError(
                f"conv2d: {label} {dim} with kernel {k}, pad {pad}, stride {stride} "
                f"gives non-integral output size"
            )

    cols, ho, wo = _im2col(x.array, kh, kw, stride, pad)
    w2 = weight.array.reshape(cout, cin * kh * kw)
    out = (w2 @ cols).reshape(n, cout, ho, wo) + bias.array.reshape(1, cout, 1, 1)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, cout, ho * wo)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            accumulate_grad(weight, gw.reshape(weight.dims))
        if x.requires_grad:
            gcols = w2.T @ g2
            accumulate_grad(x, _col2im(gcols, x.dims, kh, kw, stride, pad))

    return custom_op(out, (x, weight, bias), backward, "conv2d")


def avg_pool2x2(x: Tensor) -> Tensor:
    """Mean-pool non-overlapping 2x2 windows; H and W must be even."""
    _require_rank(x, 4, "avg_pool2x2", "input")
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial dims must be even, got ({h}, {w})")
    out = x.array.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        accumulate_grad(x, gx)

    return custom_op(out, (x,), backward, "avg_pool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Arithmetic mean over each H x W plane: [N, C, H, W] -> [N, C, 1, 1]."""
    _require_rank(x, 4, "global_avg_pool", "input")
    n, c, h, w = x.dims
    out = x.array.mean(axis=(2, 3), keepdims=True)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.broadcast_to(g / (h * w), x.dims))

    return custom_op(out, (x,), backward, "global_avg_pool")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N, Din] @ [Dout, Din]^T + [Dout]."""
    _require_rank(x, 2, "fully_connected", "input")
    _require_rank(weight, 2, "fully_connected", "weight")
    _require_rank(bias, 1, "fully_connected", "bias")
    n, din = x.dims
    dout, wdin = weight.dims
    if din != wdin:
        raise ShapeError(f"fully_connected: input width ({din}) != weight width ({wdin})")
    if bias.dims[0] != dout:
        raise ShapeError(f"fully_connected: bias length ({bias.dims[0]}) != output width ({dout})")
    out = x.array @ weight.array.T + bias.array

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g @ weight.array)
        if weight.requires_grad:
            accumulate_grad(weight, g.T @ x.array)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))

    return custom_op(out, (x, weight, bias), backward, "fully_connected")


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs lie strictly inside (0, 1).

    Saturated values are nudged to the nearest representable double inside
    the open interval so the strict bound holds for every finite input.
    """
    a = x.array
    s = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
    s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * s * (1.0 - s))

    return custom_op(s, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.array, 0.0)
    mask = x.array > 0

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * mask)

    return custom_op(out, (x,), backward, "relu")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis; each output row sums to 1."""
    a = x.array
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * s).sum(axis=-1, keepdims=True)
        accumulate_grad(x, s * (g - inner))

    return custom_op(s, (x,), backward, "softmax_lastdim")


_ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "softmax_lastdim": softmax_lastdim}


def activate(x: Tensor, kind: str) -> Tensor:
    """Apply one of {sigmoid, relu, softmax_lastdim}."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"add: operand dims differ: {a.dims} vs {b.dims}")
    out = a.array + b.array

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return custom_op(out, (a, b), backward, "add")


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"mul_elementwise: operand dims differ: {a.dims} vs {b.dims}")
    out = a.array * b.array

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * b.array)
        accumulate_grad(b, g * a.array)

    return custom_op(out, (a, b), backward, "mul_elementwise")


def mul_channelwise(gate: Tensor, x: Tensor) -> Tensor:
    """Broadcast a [N, C, 1, 1] gate over [N, C, H, W].

    The gate's gradient is the incoming gradient reduced (summed) over the
    broadcast spatial axes.
    """
    _require_rank(gate, 4, "mul_channelwise", "gate")
    _require_rank(x, 4, "mul_channelwise", "input")
    if gate.dims[2:] != (1, 1) or gate.dims[:2] != x.dims[:2]:
        raise ShapeError(f"mul_channelwise: gate dims {gate.dims} incompatible with input dims {x.dims}")
    out = gate.array * x.array

    def backward(g: np.ndarray) -> None:
        if gate.requires_grad:
            accumulate_grad(gate, (g * x.array).sum(axis=(2, 3), keepdims=True))
        if x.requires_grad:
            accumulate_grad(x, g * gate.array)

    return custom_op(out, (gate, x), backward, "mul_channelwise")


def mul_spatialwise(gate: Tensor, x: Tensor) -> Tensor:
    """Broadcast a [N, 1, H, W] gate over [N, C, H, W]."""
    _require_rank(gate, 4, "mul_spatialwise", "gate")
    _require_rank(x, 4, "mul_spatialwise", "input")
    if gate.dims[1] != 1 or gate.dims[0] != x.dims[0] or gate.dims[2:] != x.dims[2:]:
        raise ShapeError(f"mul_spatialwise: gate dims {gate.dims} incompatible with input dims {x.dims}")
    out = gate.array * x.array

    def backward(g: np.ndarray) -> None:
        if gate.requires_grad:
            accumulate_grad(gate, (g * x.array).sum(axis=1, keepdims=True))
        if x.requires_grad:
            accumulate_grad(x, g * gate.array)

    return custom_op(out, (gate, x), backward, "mul_spatialwise")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; N, H, W must agree."""
    _require_rank(a, 4, "concat_channels", "first operand")
    _require_rank(b, 4, "concat_channels", "second operand")
    if a.dims[0] != b.dims[0] or a.dims[2:] != b.dims[2:]:
        raise ShapeError(f"concat_channels: dims {a.dims} and {b.dims} differ outside the channel axis")
    ca = a.dims[1]
    out = np.concatenate([a.array, b.array], axis=1)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return custom_op(out, (a, b), backward, "concat_channels")


_COMBINES = {
    "add": add,
    "mul_elementwise": mul_elementwise,
    "mul_channelwise": mul_channelwise,
    "mul_spatialwise": mul_spatialwise,
    "concat_channels": concat_channels,
}


def combine(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Apply one of {add, mul_elementwise, mul_channelwise, mul_spatialwise, concat_channels}."""
    try:
        fn = _COMBINES[kind]
    except KeyError:
        raise ValueError(f"unknown combine kind {kind!r}; expected one of {sorted(_COMBINES)}") from None
    return fn(a, b)


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or per-batch-item vector (no gradient to ``factor``).

    A vector factor of length N broadcasts over all trailing axes of ``x``.
    """
    f = np.asarray(factor, dtype=np.float64)
    if f.ndim == 0:
        fb = f
    elif f.ndim == 1:
        if f.shape[0] != x.dims[0]:
            raise ShapeError(f"scale: factor length ({f.shape[0]}) != batch size ({x.dims[0]})")
        fb = f.reshape((f.shape[0],) + (1,) * (x.array.ndim - 1))
    else:
        raise ShapeError(f"scale: factor must be scalar or rank 1, got rank {f.ndim}")
    out = x.array * fb

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * fb)

    return custom_op(out, (x,), backward, "scale")


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if not dims or len(dims) > 4 or any(d < 1 for d in dims):
        raise ShapeError(f"reshape: target dims must be 1..4 positive ints, got {dims}")
    if int(np.prod(dims)) != x.array.size:
        raise ShapeError(f"reshape: cannot view {x.dims} ({x.array.size} elements) as {dims}")
    out = x.array.reshape(dims)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(x.dims))

    return custom_op(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.array.ndim)):
        raise ShapeError(f"permute: axes {axes} is not a permutation of rank {x.array.ndim}")
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out = np.ascontiguousarray(x.array.transpose(axes))

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.ascontiguousarray(g.transpose(inverse)))

    return custom_op(out, (x,), backward, "permute")


def take_column(x: Tensor, j: int) -> Tensor:
    """Extract column ``j`` of a [N, D] tensor as a rank-1 [N] tensor."""
    _require_rank(x, 2, "take_column", "input")
    n, d = x.dims
    if not 0 <= j < d:
        raise ShapeError(f"take_column: column {j} out of range for width {d}")
    out = x.array[:, j].copy()

    def backward(g: np.ndarray) -> None:
        gx = np.zeros((n, d))
        gx[:, j] = g
        accumulate_grad(x, gx)

    return custom_op(out, (x,), backward, "take_column")


def sum_all(x: Tensor) -> Tensor:
    out = np.array([x.array.sum()])

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.full(x.dims, g.reshape(-1)[0]))

    return custom_op(out, (x,), backward, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    size = x.array.size
    out = np.array([x.array.mean()])

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.full(x.dims, g.reshape(-1)[0] / size))

    return custom_op(out, (x,), backward, "mean_all")


def log(x: Tensor) -> Tensor:
    if np.any(x.array <= 0):
        raise NumericError("log: all elements must be positive; clamp first")
    out = np.log(x.array)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g / x.array)

    return custom_op(out, (x,), backward, "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max with ``floor``; gradient is zero where the clamp is active."""
    out = np.maximum(x.array, floor)
    mask = x.array > floor

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * mask)

    return custom_op(out, (x,), backward, "clamp_min")


# ---------------------------------------------------------------------------
# Optimizer


@dataclasses.dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = dataclasses.field(default_factory=dict)


def adam_step(state: AdamState, params: ParameterStore) -> None:
    """One bias-corrected Adam update, in place, over every registered parameter.

    A parameter with no accumulated gradient raises
    :class:`MissingGradientError` rather than being skipped silently.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient; call backward() first")
        g = p.grad
        if g.shape != p.array.shape:
            raise ShapeError(f"adam_step: gradient dims {g.shape} != parameter dims {p.array.shape} for {name!r}")
        m, v = state.moments.get(name, (np.zeros_like(p.array), np.zeros_like(p.array)))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.moments[name] = (m, v)
        p.array -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclasses.dataclass
class GradCheckEntry:
    name: str
    n_checked: int
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


@dataclasses.dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_error)

    def format_lines(self) -> list[str]:
        lines = []
        for e in sorted(self.entries, key=lambda e: -e.max_rel_error):
            status = "ok  " if e.max_rel_error < self.tolerance else "FAIL"
            lines.append(
                f"{status} {e.name}: max rel err {e.max_rel_error:.3e} over {e.n_checked} elements "
                f"(worst: analytic {e.analytic:.6e} vs numeric {e.numeric:.6e})"
            )
        return lines


def _rel_error(a: float, b: float) -> float:
    # Floor keeps finite-difference roundoff on near-zero gradients from
    # registering as huge relative errors.
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore | Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    exhaustive_limit: int = 10_000,
    subsample: int = 4_000,
) -> GradCheckReport:
    """Compare backward() gradients against central finite differences.

    ``loss_fn`` rebuilds the graph from the live parameter tensors and returns
    the scalar loss; it must be deterministic. Every parameter element is
    checked when the total count is at most ``exhaustive_limit``, otherwise a
    seeded random subsample of about ``subsample`` elements is spread across
    parameters proportionally to their size.

    An element whose error exceeds the tolerance is re-measured at h/16 and
    h/256 before being reported: a piecewise-linear kink (relu, clamp) falling
    inside the difference interval vanishes as h shrinks, while a genuinely
    wrong backward rule persists at every step size.
    """
    named = dict(params.items()) if isinstance(params, ParameterStore) else dict(params)
    for p in named.values():
        p.grad = None
    loss = loss_fn()
    if loss.array.size != 1:
        raise NumericError(f"grad_check requires a scalar loss, got dims {loss.dims}")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.array)) for name, p in named.items()}

    total = sum(p.array.size for p in named.values())
    rng = np.random.default_rng(seed)
    chosen: dict[str, np.ndarray] = {}
    for name, p in named.items():
        size = p.array.size
        if total <= exhaustive_limit:
            chosen[name] = np.arange(size)
        else:
            k = min(size, max(1, round(subsample * size / total)))
            chosen[name] = np.sort(rng.choice(size, size=k, replace=False))

    def fd_at(p: Tensor, idx: int, step: float) -> float:
        flat = p.array.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = loss_fn().item()
        flat[idx] = orig - step
        f_minus = loss_fn().item()
        flat[idx] = orig
        return (f_plus - f_minus) / (2.0 * step)

    entries: list[GradCheckEntry] = []
    for name, p in named.items():
        grads = analytic[name].reshape(-1)
        worst = GradCheckEntry(name, len(chosen[name]), 0.0, -1, 0.0, 0.0)
        for idx in chosen[name]:
            a = float(grads[idx])
            numeric = fd_at(p, int(idx), h)
            err = _rel_error(a, numeric)
            if err >= tolerance:
                for shrink in (16.0, 256.0):
                    numeric = fd_at(p, int(idx), h / shrink)
                    err = _rel_error(a, numeric)
                    if err < tolerance:
                        break
            if err > worst.max_rel_error:
                worst = GradCheckEntry(name, len(chosen[name]), err, int(idx), a, numeric)
        entries.append(worst)
    return GradCheckReport(tolerance=tolerance, entries=entries)
