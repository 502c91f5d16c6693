"""Dense tensors with reverse-mode automatic differentiation.

The engine covers exactly the operations the classifiers and attacks need:
matmul, conv2d (stride 1, explicit zero padding), add_bias, relu, 2x2
max-pooling, flatten and softmax cross-entropy, plus a few elementwise
helpers used by tests and loss composition.  Two precision modes exist:
"single" (float32, training) and "double" (float64, used by the numerical
gradient checks).

Gradients are exact in order of evaluation: matmul and the convolution
gemm are computed one example at a time (a stacked batched matmul), so
every example's forward values and input gradient are bit-identical no
matter which batch it is evaluated in.  Attacks rely on this to make
vectorized and per-example processing interchangeable.

Subgradient conventions: relu'(0) = 0, max-pool ties break toward the
lowest flat index inside the window, sign is never taken here (attacks
apply np.sign to returned gradients).
"""

from __future__ import annotations

import threading

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}
_ALLOWED_DTYPES = (np.float32, np.float64)


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes (or dtypes) incompatible with the requested op."""


class NonFiniteError(EngineError):
    """A NaN or infinity was produced or supplied."""


class GraphError(EngineError):
    """Misuse of the recording graph (non-scalar backward, reuse, ...)."""


class Tensor:
    """A dense n-dimensional array, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "per_example")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node = None
        self.per_example: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Wrap an array as a leaf tensor, validating dtype and finiteness."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in _ALLOWED_DTYPES:
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        else:
            raise ShapeError(f"unsupported tensor dtype {arr.dtype}; use float32 or float64")
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor input contains NaN or infinity")
    return Tensor(arr, requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "graph")

    def __init__(self, op, inputs, output, vjp, graph):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.graph = graph


_STATE = threading.local()


def _graph_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Recording context: ops executed inside append nodes in topological order.

    One graph belongs to one thread of execution and can be consumed by
    backward() exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _graph_stack().pop()


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp) -> Tensor:
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        if graph.consumed:
            raise GraphError(f"cannot record {op}: graph already consumed by backward()")
        out.requires_grad = True
        node = _Node(op, inputs, out, vjp, graph)
        graph.nodes.append(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(tensor) for every tensor requiring grad.

    The recorded graph is walked once in reverse topological order;
    contributions to a tensor consumed by several ops are summed.  A second
    backward() through the same graph is rejected.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise GraphError("backward() requires a scalar loss tensor")
    if loss.node is None:
        raise GraphError("loss was not produced by a recorded graph")
    graph = loss.node.graph
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward() call")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        _store_grad(node.output, gout)
        for t, gin in zip(node.inputs, node.vjp(gout)):
            if gin is None:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gin if acc is None else acc + gin
    for node in graph.nodes:  # leaves: never popped above
        for t in node.inputs:
            gin = grads.pop(id(t), None)
            if gin is not None:
                _store_grad(t, gin)


def _store_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # vjp outputs are fresh arrays (or views of them) and are never mutated
    # in place afterwards, so aliasing them into .grad is safe
    t.grad = g if t.grad is None else t.grad + g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"{op}: mixed precisions {dt.name} and {t.data.dtype.name} in one graph")


def _check_finite(op: str, out: np.ndarray) -> None:
    # single-pass probe: a float64 accumulator cannot overflow on float32
    # inputs, so a non-finite sum implies a non-finite element
    if out.dtype == np.float32:
        bad = not np.isfinite(out.sum(dtype=np.float64))
    else:
        bad = not np.isfinite(out).all()
    if bad:
        raise NonFiniteError(f"{op} produced a non-finite value (overflow or NaN)")


# ---------------------------------------------------------------------------
# spec'd operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    # one gemm per row: bit-identical rows regardless of batch composition
    out_data = np.matmul(a.data[:, None, :], b.data)[:, 0]
    _check_finite("matmul", out_data)
    out = Tensor(out_data)
    needs = (a.requires_grad, b.requires_grad)
    bt = b.data.T

    def vjp(g):
        ga = np.matmul(g[:, None, :], bt)[:, 0] if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def _pad2d(arr: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return arr
    n, c, h, w = arr.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=arr.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = arr
    return out


def _im2col(arr: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, Ho*Wo) patch matrix for stride-1 convolution.

    Patch channels lead and spatial positions stay innermost, so the copy
    out of the sliding-window view runs along contiguous memory.
    """
    arr = _pad2d(arr, pad)
    n, c, h, w = arr.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, c * k * k, ho * wo), dtype=arr.dtype)
    dst = cols.reshape(n, c, k, k, ho, wo)
    for u in range(k):
        for v in range(k):
            dst[:, :, u, v] = arr[:, :, u : u + ho, v : v + wo]
    return cols


def _col2im(dcols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the image grid."""
    n, c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    src = dcols.reshape(n, c, k, k, ho, wo)
    for u in range(k):
        for v in range(k):
            buf[:, :, u : u + ho, v : v + wo] += src[:, :, u, v]
    if pad:
        return np.ascontiguousarray(buf[:, :, pad : pad + h, pad : pad + w])
    return buf


def _conv_raw(arr: np.ndarray, kern: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    n = arr.shape[0]
    f, _, k, _ = kern.shape
    ho = arr.shape[2] + 2 * pad - k + 1
    wo = arr.shape[3] + 2 * pad - k + 1
    cols = _im2col(arr, k, pad)
    y = np.matmul(kern.reshape(f, -1), cols)  # one gemm per example
    return y.reshape(n, f, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    _check_same_dtype("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and FCkk kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {padding}")

    out_data, cols = _conv_raw(x.data, w.data, padding)
    _check_finite("conv2d", out_data)
    out = Tensor(out_data)
    needs = (x.requires_grad, w.requires_grad)

    def vjp(g):
        gx = gw = None
        gmat = g.reshape(n, f, ho * wo)
        if needs[0]:
            wmat_t = np.ascontiguousarray(w.data.reshape(f, -1).T)
            dcols = np.matmul(wmat_t, gmat)  # (n, C*k*k, Ho*Wo), one gemm per example
            gx = _col2im(dcols, (n, c, h, wd), k, padding)
        if needs[1]:
            gw = np.matmul(gmat, cols.swapaxes(1, 2)).sum(axis=0).reshape(f, c, k, k)
        return gx, gw

    return _record("conv2d", (x, w), out, vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-d input) or per-channel (4-d input) bias."""
    _check_same_dtype("add_bias", x, b)
    if b.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-d, got {b.shape}")
    if x.ndim == 2:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(f"add_bias: bias {b.shape} does not match features of {x.shape}")
        out_data = x.data + b.data
        axes = (0,)
    elif x.ndim == 4:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
        out_data = x.data + b.data[:, None, None]
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias: expected 2-d or 4-d input, got {x.shape}")
    _check_finite("add_bias", out_data)
    out = Tensor(out_data)
    needs = (x.requires_grad, b.requires_grad)

    def vjp(g):
        return (g if needs[0] else None), (g.sum(axis=axes) if needs[1] else None)

    return _record("add_bias", (x, b), out, vjp)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def vjp(g):
        return (g * (x.data > 0),)  # relu'(0) = 0

    return _record("relu", (x,), out, vjp)


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))  # flat window index order


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the lowest flat window index."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {x.shape}")
    slabs = tuple(x.data[:, :, du::2, dv::2] for du, dv in _POOL_OFFSETS)
    out = Tensor(np.maximum(np.maximum(slabs[0], slabs[1]),
                            np.maximum(slabs[2], slabs[3])))

    def vjp(g):
        # argmax over the stacked slabs picks the first max: lowest flat index
        idx = np.stack(slabs).argmax(axis=0)
        gx = np.empty((n, c, h, w), dtype=g.dtype)
        for t, (du, dv) in enumerate(_POOL_OFFSETS):
            gx[:, :, du::2, dv::2] = np.where(idx == t, g, 0)
        return (gx,)

    return _record("max_pool2", (x,), out, vjp)


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"flatten: expected at least 2-d input, got {x.shape}")
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))

    def vjp(g):
        return (g.reshape(shape),)

    return _record("flatten", (x,), out, vjp)


def cross_entropy_with_softmax(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the batch; scalar >= 0.

    reduction "mean" is the training loss; "sum" is used internally by the
    attacks so each example's input gradient is exactly the gradient of its
    own loss.  Per-example losses are exposed on the result's .per_example.
    """
    if reduction not in ("mean", "sum"):
        raise ShapeError(f"cross_entropy_with_softmax: unknown reduction {reduction!r}")
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_with_softmax: expected (N, C) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy_with_softmax: labels {y.shape} do not match batch {logits.shape}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= c:
        raise ShapeError(f"cross_entropy_with_softmax: label out of range for {c} classes")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    per = (m[:, 0] + np.log(s[:, 0])) - z[rows, y]
    _check_finite("cross_entropy_with_softmax", per)
    out_val = per.mean() if reduction == "mean" else per.sum()
    out = Tensor(np.asarray(out_val, dtype=z.dtype))
    out.per_example = per

    def vjp(g):
        p = e / s
        p[rows, y] -= 1
        scale = g / np.asarray(n, dtype=z.dtype) if reduction == "mean" else g
        return (p * scale,)

    return _record("cross_entropy_with_softmax", (logits,), out, vjp)


# ---------------------------------------------------------------------------
# elementwise helpers (loss composition, tests)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data
    _check_finite("add", out_data)
    out = Tensor(out_data)
    needs = (a.requires_grad, b.requires_grad)

    def vjp(g):
        return (g if needs[0] else None), (g if needs[1] else None)

    return _record("add", (a, b), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    cs = x.data.dtype.type(c)
    out_data = x.data * cs
    _check_finite("scale", out_data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * cs,)

    return _record("scale", (x,), out, vjp)


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    const = np.asarray(arr, dtype=x.data.dtype)
    if const.shape != x.shape:
        raise ShapeError(f"mul_const: constant {const.shape} does not match {x.shape}")
    out_data = x.data * const
    _check_finite("mul_const", out_data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * const,)

    return _record("mul_const", (x,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

    return _record("sum_all", (x,), out, vjp)


# ---------------------------------------------------------------------------
# uniform dispatch over the named op set


_DISPATCH = {
    "matmul": lambda ops, attrs: matmul(*ops),
    "conv2d": lambda ops, attrs: conv2d(*ops, padding=attrs.get("padding", 0)),
    "add_bias": lambda ops, attrs: add_bias(*ops),
    "relu": lambda ops, attrs: relu(*ops),
    "max_pool2": lambda ops, attrs: max_pool2(*ops),
    "flatten": lambda ops, attrs: flatten(*ops),
    "cross_entropy_with_softmax": lambda ops, attrs: cross_entropy_with_softmax(
        ops[0], attrs["labels"], attrs.get("reduction", "mean")
    ),
}

OP_KINDS = tuple(_DISPATCH)


def forward_op(op_kind: str, operands, attrs: dict | None = None) -> Tensor:
    """Apply one of the named ops; records a node when any operand requires grad."""
    if op_kind not in _DISPATCH:
        raise ShapeError(f"unknown op kind {op_kind!r}")
    return _DISPATCH[op_kind](tuple(operands), attrs or {})


# ---------------------------------------------------------------------------
# input gradients


class frozen_params:
    """Temporarily drop requires_grad on a network's parameters.

    Used while generating adversarial examples: only the input gradient is
    needed, so the (expensive) parameter gradients are skipped entirely.
    """

    def __init__(self, net):
        self._params = list(net.params.values())
        self._saved: list[bool] = []

    def __enter__(self):
        self._saved = [p.requires_grad for p in self._params]
        for p in self._params:
            p.requires_grad = False
        return self

    def __exit__(self, exc_type, exc, tb):
        for p, r in zip(self._params, self._saved):
            p.requires_grad = r


def grad_wrt_input(net, x, y) -> Tensor:
    """Gradient of the mean cross-entropy loss with respect to the input batch.

    Parameters are frozen for the duration: their gradients are neither
    computed nor touched.
    """
    xt = x if isinstance(x, Tensor) else tensor(x)
    leaf = Tensor(xt.data, requires_grad=True)
    with frozen_params(net), Graph():
        loss = cross_entropy_with_softmax(net.forward(leaf), y, reduction="mean")
        backward(loss)
    return Tensor(leaf.grad)
