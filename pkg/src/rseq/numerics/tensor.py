"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`TapeNode` to the tape of the
current thread. :func:`backward` walks that tape newest-first, looks up each
node's rule in :data:`BACKWARD_RULES` and accumulates gradients into the
inputs. Rules are keyed by op kind so a single rule can be swapped out (the
gradient-check negative control relies on that).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from rseq.errors import DimensionError, NumericFault, UsageError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype: type = np.float32

_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = []
        _local.grad_enabled = True
    return _local


def set_default_dtype(precision: str) -> None:
    global _default_dtype
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[precision]


def get_default_dtype() -> type:
    return _default_dtype


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or _default_dtype)
    return "f64" if dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    prev = precision_name()
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state().grad_enabled


def tape_size() -> int:
    return len(_state().tape)


def clear_tape() -> None:
    st = _state()
    for node in st.tape:
        node.out._node = None
    st.tape.clear()


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    out: "Tensor"
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericFault("tensor", "non-finite values in tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: TapeNode | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype.kind == "f" and arr.ndim > 0 else _default_dtype
    return Tensor(arr, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


# -- graph construction -----------------------------------------------------

BACKWARD_RULES: dict[str, Callable[..., tuple]] = {}


def backward_rule(op: str):
    def register(fn):
        BACKWARD_RULES[op] = fn
        return fn

    return register


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], **saved: Any) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and, if needed, append a tape node.

    ``saved`` holds whatever the registered backward rule needs.
    """
    if not np.all(np.isfinite(data)):
        raise NumericFault(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    st = _state()
    out.requires_grad = st.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = TapeNode(op, tuple(inputs), out, saved)
        out._node = node
        st.tape.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on, then clear the tape."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    st = _state()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for node in reversed(st.tape):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            in_grads = BACKWARD_RULES[node.op](g, node)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
                if inp._node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericFault("backward")
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    finally:
        for node in st.tape:
            node.out._node = None
        st.tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", a.data + b.data, (a, b))


@backward_rule("add")
def _add_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", a.data - b.data, (a, b))


@backward_rule("sub")
def _sub_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("mul", a.data * b.data, (a, b))


@backward_rule("mul")
def _mul_bw(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return record("div", out, (a, b))


@backward_rule("div")
def _div_bw(g, node):
    a, b = node.inputs
    return (_unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,))


@backward_rule("neg")
def _neg_bw(g, node):
    return (-g,)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting any leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record("matmul", np.matmul(a.data, b.data), (a, b))


@backward_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            # fold batch axes into one GEMM instead of a batched product plus a sum
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return (None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape))


# -- reductions and layout ----------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 axis=axis, keepdims=keepdims)


@backward_rule("sum")
def _sum_bw(g, node):
    (a,) = node.inputs
    axis, keepdims = node.saved["axis"], node.saved["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record("reshape", a.data.reshape(shape), (a,))


@backward_rule("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.inputs[0].shape),)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    return record("transpose", np.transpose(a.data, axes), (a,), axes=axes)


@backward_rule("transpose")
def _transpose_bw(g, node):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    return record("getitem", np.ascontiguousarray(a.data[idx]), (a,), idx=idx)


@backward_rule("getitem")
def _getitem_bw(g, node):
    (a,) = node.inputs
    idx = node.saved["idx"]
    out = np.zeros(a.shape, dtype=g.dtype)
    if _is_basic_index(idx):
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    return record("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                 axis=axis, sizes=sizes)


@backward_rule("concat")
def _concat_bw(g, node):
    cuts = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=node.saved["axis"]))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return record("stack", np.stack([t.data for t in ts], axis=axis), ts, axis=axis)


@backward_rule("stack")
def _stack_bw(g, node):
    axis = node.saved["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(node.inputs)))


def pad_rows(a, n: int) -> Tensor:
    """Prepend ``n`` zero rows along the second-to-last axis."""
    a = as_tensor(a)
    if n == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[-2] = (n, 0)
    return record("pad_rows", np.pad(a.data, widths), (a,), n=n)


@backward_rule("pad_rows")
def _pad_rows_bw(g, node):
    return (g[..., node.saved["n"]:, :],)


# -- nonlinearities -----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,))


@backward_rule("exp")
def _exp_bw(g, node):
    return (g * node.out.data,)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record("log", out, (a,))


@backward_rule("log")
def _log_bw(g, node):
    return (g / node.inputs[0].data,)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return record("tanh", np.tanh(a.data), (a,))


@backward_rule("tanh")
def _tanh_bw(g, node):
    y = node.out.data
    return (g * (1.0 - y * y),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    return record("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,))


@backward_rule("sigmoid")
def _sigmoid_bw(g, node):
    y = node.out.data
    return (g * y * (1.0 - y),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return record("relu", np.maximum(a.data, 0), (a,))


@backward_rule("relu")
def _relu_bw(g, node):
    return (g * (node.inputs[0].data > 0),)


def _causal_mask(n_q: int, n_k: int) -> np.ndarray:
    # query i (aligned to the end of the key axis) may see keys j <= i + n_k - n_q
    return np.tril(np.ones((n_q, n_k), dtype=bool), k=n_k - n_q)


def softmax(a, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` entry ``[..., i, j]`` is forced to exactly zero for
    ``j > i``; masked scores never enter the max or the normaliser, so their
    values cannot influence the result.
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {a.shape}")
    x = a.data
    if causal:
        mask = _causal_mask(x.shape[-2], x.shape[-1])
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return record("softmax", out, (a,))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a)


@backward_rule("softmax")
def _softmax_bw(g, node):
    y = node.out.data
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    return record("log_softmax", out, (a,))


@backward_rule("log_softmax")
def _log_softmax_bw(g, node):
    p = np.exp(node.out.data)
    return (g - p * np.sum(g, axis=-1, keepdims=True),)


# -- fused model ops ----------------------------------------------------------

def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean / unit variance, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match rows of {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return record("layer_norm", xhat * gain.data + bias.data, (a, gain, bias), xhat=xhat, inv=inv)


@backward_rule("layer_norm")
def _layer_norm_bw(g, node):
    a, gain, bias = node.inputs
    xhat, inv = node.saved["xhat"], node.saved["inv"]
    gx = g * gain.data
    d = xhat.shape[-1]
    ga = inv * (gx - gx.sum(axis=-1, keepdims=True) / d
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
    lead = tuple(range(g.ndim - 1))
    return ga, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def dropout(a, rate: float, rng) -> Tensor:
    """Inverted dropout: zero each entry with probability ``rate``, rescale the rest."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = rng.uniform(0.0, 1.0, a.shape) >= rate
    mask = keep.astype(a.dtype) / (1.0 - rate)
    return record("dropout", a.data * mask, (a,), mask=mask)


@backward_rule("dropout")
def _dropout_bw(g, node):
    return (g * node.saved["mask"],)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    return record("embedding", table.data[ids], (table,), ids=ids)


@backward_rule("embedding")
def _embedding_bw(g, node):
    (table,) = node.inputs
    out = np.zeros(table.shape, dtype=g.dtype)
    np.add.at(out, node.saved["ids"].reshape(-1), g.reshape(-1, table.shape[-1]))
    return (out,)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all entries whose target != ignore_index."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    flat_logits = logits.data.reshape(-1, logits.shape[-1])
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise UsageError("cross_entropy: every target is masked")
    z = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, flat_t[rows]]
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)
    return record("cross_entropy", loss, (logits,), logp=logp, rows=rows,
                 cols=flat_t[rows], count=count)


@backward_rule("cross_entropy")
def _cross_entropy_bw(g, node):
    (logits,) = node.inputs
    s = node.saved
    grad = np.zeros_like(s["logp"])
    grad[s["rows"]] = np.exp(s["logp"][s["rows"]])
    grad[s["rows"], s["cols"]] -= 1.0
    grad *= g / s["count"]
    return (grad.reshape(logits.shape),)
