"""Define-by-run reverse-mode autodiff on float64 numpy arrays.

Operations executed while a :class:`Tape` is active, and with at least one
operand that requires a gradient, are appended to the tape in execution order.
:func:`backward` walks the tape in reverse, which is a valid reverse
topological order because every node is recorded after its inputs exist.

Outside a tape the same functions run as plain numpy code, which is what
inference uses.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import RngStream

_local = threading.local()


class ContractError(ValueError):
    """Raised when an operation is called outside its contract (shapes, ranges)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Each node is ``(outputs, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradients to one gradient (or ``None``) per input.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class OuterGrad:
    """Weight gradient ``a.T @ b`` kept factored until the end of the backward pass.

    Parameters reused at every time step receive one of these per use; they
    are summed with a single stacked matmul instead of one dense add per use.
    """

    __slots__ = ("a", "b")

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = a.reshape(-1, a.shape[-1])
        self.b = b.reshape(-1, b.shape[-1])

    def dense(self) -> np.ndarray:
        return self.a.T @ self.b


def _record(outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...], fn: Callable) -> None:
    tape = getattr(_local, "tape", None)
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append((outputs, inputs, fn))


def _recording(*inputs: Tensor) -> bool:
    if getattr(_local, "tape", None) is None:
        return False
    for t in inputs:
        if t.requires_grad:
            return True
    return False


def backward(loss: Tensor, tape: Tape, store: "ParameterStore | None" = None) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor on the tape.

    Parameter gradients accumulate (call ``store.zero_grad()`` between steps);
    when ``store`` is given, parameters the loss does not reach get a zero grad.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    if store is not None:
        for p in store.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    # intermediate grads live in a side table so parameters keep accumulating
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for outputs, _, _ in tape.nodes:
        for o in outputs:
            produced.add(id(o))
    pending: dict[int, tuple[Tensor, list[OuterGrad]]] = {}
    for outputs, inputs, fn in reversed(tape.nodes):
        if len(outputs) == 1:
            g0 = grads.pop(id(outputs[0]), None)
            if g0 is None:
                continue
            gin = fn(g0)
        else:
            gouts = [grads.pop(id(o), None) for o in outputs]
            if all(g is None for g in gouts):
                continue
            gin = fn(*[np.zeros_like(o.data) if g is None else g for o, g in zip(outputs, gouts)])
        for t, g in zip(inputs, gin):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                if isinstance(g, OuterGrad):
                    g = g.dense()
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
            elif isinstance(g, OuterGrad):
                pending.setdefault(key, (t, []))[1].append(g)
            elif t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
    for t, parts in pending.values():
        a = parts[0].a if len(parts) == 1 else np.concatenate([p.a for p in parts])
        b = parts[0].b if len(parts) == 1 else np.concatenate([p.b for p in parts])
        dense = a.T @ b
        if t.grad is None:
            t.grad = dense
        else:
            t.grad += dense
    if id(loss) not in produced:
        loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------------------
# primitive operations


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        _record((out,), (a, b), lambda g: (g, g))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _recording(a, b):
        _record((out,), (a, b), lambda g: (g, -g))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _recording(a, b):
        _record((out,), (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    if _recording(a):
        _record((out,), (a,), lambda g: (g * s,))
    return out


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors (typically scalar losses)."""
    if not terms:
        raise ContractError("add_scalars needs at least one term")
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ContractError(f"add_scalars: shape mismatch {shape} vs {t.shape}")
    out = Tensor(np.sum([t.data for t in terms], axis=0))
    if _recording(*terms):
        _record((out,), tuple(terms), lambda g: tuple(g for _ in terms))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if _recording(a, b):
        A, B = a.data, b.data

        def fn(g):
            if A.ndim == 2 and B.ndim == 2:
                return g @ B.T, A.T @ g
            if A.ndim == 1 and B.ndim == 2:
                return B @ g, np.outer(A, g)
            if A.ndim == 2:
                return np.outer(g, B), A.T @ g
            return g * B, g * A

        _record((out,), (a, b), fn)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in); ``x`` is (in,) or (batch, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ContractError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ContractError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)
    if _recording(*inputs):
        X, W = x.data, w.data

        def fn(g):
            gx = g @ W
            gw = OuterGrad(g, X)
            if b is None:
                return gx, gw
            return gx, gw, g if g.ndim == 1 else g.sum(axis=0)

        _record((out,), inputs, fn)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ContractError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    if _recording(*tensors):
        bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

        def fn(g):
            idx = [slice(None)] * nd
            res = []
            for i in range(len(tensors)):
                idx[ax] = slice(bounds[i], bounds[i + 1])
                res.append(g[tuple(idx)])
            return res

        _record((out,), tuple(tensors), fn)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    for t in tensors:
        if t.shape != tensors[0].shape:
            raise ContractError(f"stack: shape mismatch {[t.shape for t in tensors]}")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    if _recording(*tensors):
        n = len(tensors)
        _record((out,), tuple(tensors), lambda g: [np.take(g, i, axis=axis) for i in range(n)])
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if _recording(x):
        _record((out,), (x,), lambda g: (g * (1.0 - y * y),))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    out = Tensor(y)
    if _recording(x):
        _record((out,), (x,), lambda g: (g * y * (1.0 - y),))
    return out


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ContractError(f"softmax over an empty axis (shape {x.shape})")
    y = _softmax(x.data, axis)
    out = Tensor(y)
    if _recording(x):
        _record((out,), (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ContractError(f"log_softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(y)
    if _recording(x):
        p = np.exp(y)
        _record((out,), (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))
    return out


def mean_squared(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements; ``target`` may be a constant."""
    target = as_tensor(target)
    _check_same(pred, target, "mean_squared")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    if _recording(pred, target):
        k = 2.0 / diff.size
        _record((out,), (pred, target), lambda g: (g * k * diff, -g * k * diff))
    return out


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of rows of ``logits`` against integer ``targets``.

    ``reduction`` is ``"mean"`` or ``"sum"`` over rows.
    """
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    L = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    if L.shape[0] != t.shape[0]:
        raise ContractError(f"cross_entropy: {L.shape[0]} rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= L.shape[1]):
        raise ContractError(f"cross_entropy: target ids out of range [0, {L.shape[1]})")
    z = L - L.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(t.shape[0])
    total = -logp[rows, t].sum()
    k = 1.0 / t.shape[0] if reduction == "mean" else 1.0
    out = Tensor(total * k)
    if _recording(logits):

        def fn(g):
            d = np.exp(logp)
            d[rows, t] -= 1.0
            d *= g * k
            return (d.reshape(logits.shape),)

        _record((out,), (logits,), fn)
    return out


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Convex-combination contraction ``sum_i w[..., i] * v[..., i, :]``."""
    if values.data.ndim != weights.data.ndim + 1 or values.shape[:-1] != weights.shape:
        raise ContractError(f"weighted_sum: weights {weights.shape} incompatible with values {values.shape}")
    W, V = weights.data, values.data
    out = Tensor(np.matmul(W[..., None, :], V)[..., 0, :])
    if _recording(weights, values):
        _record((out,), (weights, values),
                lambda g: (np.matmul(V, g[..., :, None])[..., 0], W[..., :, None] * g[..., None, :]))
    return out


def batched_dot(keys: Tensor, query: Tensor) -> Tensor:
    """``out[..., i] = keys[..., i, :] . query[..., :]``."""
    if keys.data.ndim != query.data.ndim + 1 or keys.shape[:-2] != query.shape[:-1] \
            or keys.shape[-1] != query.shape[-1]:
        raise ContractError(f"batched_dot: keys {keys.shape} incompatible with query {query.shape}")
    K, Q = keys.data, query.data
    out = Tensor(np.matmul(K, Q[..., :, None])[..., 0])
    if _recording(keys, query):
        _record((out,), (keys, query),
                lambda g: (g[..., :, None] * Q[..., None, :], np.matmul(g[..., None, :], K)[..., 0, :]))
    return out


def bilinear_attention(query: Tensor, w: Tensor, memory: Tensor):
    """Fused ``softmax(memory @ (query @ w))`` weights and their weighted sum of ``memory``.

    ``query`` is (batch, Q), ``w`` (Q, K), ``memory`` (batch, m, K) serving as
    both keys and values.  Returns ``(weights (batch, m), context (batch, K))``;
    numerically the same as composing matmul, batched_dot, softmax and
    weighted_sum.
    """
    q, W, M = query.data, w.data, memory.data
    if q.ndim != 2 or M.ndim != 3 or W.shape != (q.shape[1], M.shape[2]) or M.shape[0] != q.shape[0]:
        raise ContractError(f"bilinear_attention: query {q.shape}, W {W.shape}, memory {M.shape} do not conform")
    if M.shape[1] == 0:
        raise ContractError("bilinear_attention over an empty memory")
    p = q @ W
    s = np.matmul(M, p[:, :, None])[:, :, 0]
    alpha = _softmax(s, -1)
    ctx = np.matmul(alpha[:, None, :], M)[:, 0, :]
    out_w, out_c = Tensor(alpha), Tensor(ctx)
    if _recording(query, w, memory):

        def fn(g_alpha, g_ctx):
            ga = np.matmul(M, g_ctx[:, :, None])[:, :, 0] + g_alpha
            gs = alpha * (ga - (ga * alpha).sum(axis=1, keepdims=True))
            gm = alpha[:, :, None] * g_ctx[:, None, :]
            gm += gs[:, :, None] * p[:, None, :]
            gp = np.matmul(gs[:, None, :], M)[:, 0, :]
            return gp @ W.T, OuterGrad(q, gp), gm

        _record((out_w, out_c), (query, w, memory), fn)
    return out_w, out_c


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup); gradient scatters back into the selected rows only."""
    idx = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ContractError(f"take_rows: ids {idx.tolist()} out of range [0, {V})")
    out = Tensor(table.data[idx])
    if _recording(table):

        def fn(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return (gt,)

        _record((out,), (table,), fn)
    return out


def _gates(z: np.ndarray, H: int):
    return (_sigmoid(z[..., :H]), _sigmoid(z[..., H:2 * H]), np.tanh(z[..., 2 * H:3 * H]),
            _sigmoid(z[..., 3 * H:]))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor):
    """One LSTM step.  ``w`` is (4H, D+H) holding the input, forget, cell and
    output gate blocks in that order, ``b`` the matching 4H bias.

    Returns ``(h_new, c_new)``.
    """
    H = h.shape[-1]
    xh = np.concatenate([x.data, h.data], axis=-1)
    W = w.data
    i, f, gc, o = _gates(xh @ W.T + b.data, H)
    c_new = f * c.data + i * gc
    tc = np.tanh(c_new)
    h_out, c_out = Tensor(o * tc), Tensor(c_new)
    inputs = (x, h, c, w, b)
    if _recording(*inputs):
        D = x.shape[-1]
        c_prev = c.data

        def fn(gh, gcn):
            gct = gcn + gh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                gct * gc * i * (1.0 - i),
                gct * c_prev * f * (1.0 - f),
                gct * i * (1.0 - gc * gc),
                gh * tc * o * (1.0 - o),
            ], axis=-1)
            gxh = dz @ W
            gb = dz if xh.ndim == 1 else dz.sum(axis=0)
            return gxh[..., :D], gxh[..., D:], gct * f, OuterGrad(dz, xh), gb

        _record((h_out, c_out), inputs, fn)
    return h_out, c_out


def lstm_sequence(xs, w: Tensor, b: Tensor, reverse: bool = False):
    """Run an LSTM from a zero state over ``xs`` of shape (batch, n, D).

    Same gate layout as :func:`lstm_cell`.  Returns ``(hs, h_last)``: all hidden
    states in input order, shape (batch, n, H), and the state after the final
    processed step (position 0 when ``reverse``).
    """
    xs = as_tensor(xs)
    X = xs.data
    if X.ndim != 3 or X.shape[1] == 0:
        raise ContractError(f"lstm_sequence needs a nonempty (batch, n, D) input, got {X.shape}")
    B, n, D = X.shape
    W = w.data
    H = W.shape[0] // 4
    if W.shape[1] != D + H:
        raise ContractError(f"lstm_sequence: weight {W.shape} does not fit input width {D} and hidden {H}")
    steps = range(n - 1, -1, -1) if reverse else range(n)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, n, H))
    cache = []
    for t in steps:
        xh = np.concatenate([X[:, t], h], axis=1)
        i, f, gc, o = _gates(xh @ W.T + b.data, H)
        c_prev = c
        c = f * c + i * gc
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((t, xh, i, f, gc, o, c_prev, tc))
    out_hs, out_last = Tensor(hs), Tensor(h.copy())
    if _recording(xs, w, b):

        def fn(g_hs, g_last):
            gx = np.zeros_like(X)
            dzs = np.empty((n, B, 4 * H))
            xhs = np.empty((n, B, D + H))
            dh_next = g_last.copy()
            dc_next = np.zeros((B, H))
            for k in range(n - 1, -1, -1):
                t, xh, i, f, gc, o, c_prev, tc = cache[k]
                dh = g_hs[:, t] + dh_next
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dz = np.concatenate([
                    dc * gc * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - gc * gc),
                    dh * tc * o * (1.0 - o),
                ], axis=1)
                dxh = dz @ W
                gx[:, t] = dxh[:, :D]
                dh_next = dxh[:, D:]
                dc_next = dc * f
                dzs[k], xhs[k] = dz, xh
            dz_all = dzs.reshape(n * B, 4 * H)
            gw = dz_all.T @ xhs.reshape(n * B, D + H)
            return gx, gw, dz_all.sum(axis=0)

        _record((out_hs, out_last), (xs, w, b), fn)
    return out_hs, out_last


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Name -> trainable tensor registry, iterated in lexicographic name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def values(self) -> list[Tensor]:
        return [self._params[k] for k in self.names()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            p = self._params[k]
            if p.shape != tuple(arr.shape):
                raise ContractError(f"shape mismatch for {k}: {p.shape} vs {tuple(arr.shape)}")
            p.data = np.array(arr, dtype=np.float64)


class Adam:
    """Bias-corrected Adam; grads are zeroed after each step."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self) -> None:
        params = self.store.items()
        for k, p in params:
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {k!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params:
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            g *= g
            g *= 1.0 - b2
            v += g
            # p -= lr * (m / c1) / (sqrt(v / c2) + eps), reusing g as scratch
            np.multiply(v, 1.0 / c2, out=g)
            np.sqrt(g, out=g)
            g += self.eps
            np.divide(m, g, out=g)
            g *= self.lr / c1
            p.data -= g
            p.grad = None


def adam_step(store: ParameterStore, state: Adam) -> None:
    if state.store is not store:
        raise ContractError("adam_step: optimizer state belongs to a different store")
    state.step()


def grad_check(loss_fn: Callable[[], Tensor], store: ParameterStore, eps: float = 1e-5,
               n_coords: int = 20, rng: RngStream | None = None,
               names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic and build its graph from ``store``.
    Coordinates are sampled uniformly over the (optionally restricted) parameters.
    Returns ``inf`` when any loss evaluation is non-finite.
    """
    rng = rng or RngStream(0)
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        return math.inf
    backward(loss, tape, store)
    chosen = sorted(names) if names is not None else store.names()
    sizes = np.array([store[k].data.size for k in chosen])
    cum = np.cumsum(sizes)
    flat_ids = rng.randint_array(n_coords, int(cum[-1]))
    worst = 0.0
    for fid in flat_ids:
        pi = int(np.searchsorted(cum, fid, side="right"))
        p = store[chosen[pi]]
        j = int(fid - (cum[pi - 1] if pi else 0))
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        lp = loss_fn().item()
        flat[j] = orig - eps
        lm = loss_fn().item()
        flat[j] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            return math.inf
        numeric = (lp - lm) / (2.0 * eps)
        analytic = float(p.grad.reshape(-1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    store.zero_grad()
    return worst
