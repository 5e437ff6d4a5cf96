"""Dense float64 tensors with reverse-mode automatic differentiation.

Tape-based engine: every operation returns a new Tensor holding the forward
value, references to its parent tensors, and a closure that scatters the
output adjoint back into them.  ``Tensor.backward`` walks the tape in
reverse topological order.  No broadcasting rules beyond numpy's, no
fusion, no GPU.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, GraphError

CHECKPOINT_FORMAT_VERSION = 1


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class _ReluTrace:
    # When ``active`` is a list, relu appends its sign mask there.  Used by
    # finite_difference_check to spot probes that cross a kink.
    active: list | None = None


class Tensor:
    """One node of the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._bwd = None

    @staticmethod
    def _make(data, parents, bwd, name):
        t = Tensor(data)
        t._parents = tuple(parents)
        t.requires_grad = any(p.requires_grad for p in t._parents)
        t._bwd = bwd if t.requires_grad else None
        t.name = name
        return t

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar output, got shape {self.data.shape}")
        order = topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"


def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of every tensor reachable from root."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise GraphError(f"add: incompatible shapes {a.shape} + {b.shape}") from exc

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise GraphError(f"sub: incompatible shapes {a.shape} - {b.shape}") from exc

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor._make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise GraphError(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._make(out, (a, b), bwd, "matmul")


def conv2d(x, k) -> Tensor:
    """Valid-padding 2-D convolution of (C,H,W) maps with a (F,C,kh,kw) kernel."""
    x, k = _lift(x), _lift(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise GraphError(f"conv2d: need (C,H,W) and (F,C,kh,kw), got {x.shape}, {k.shape}")
    c, hh, ww = x.data.shape
    f, kc, kh, kw = k.data.shape
    if kc != c or kh > hh or kw > ww:
        raise GraphError(f"conv2d: kernel {k.shape} does not fit input {x.shape}")
    ho, wo = hh - kh + 1, ww - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    kmat = k.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).T.reshape(f, ho, wo)

    def bwd(g):
        gmat = g.reshape(f, ho * wo)
        if k.requires_grad:
            k._accum((gmat @ cols).reshape(k.data.shape))
        if x.requires_grad:
            dcols = (gmat.T @ kmat).reshape(ho, wo, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + ho, j:j + wo] += dcols[:, :, :, i, j].transpose(2, 0, 1)
            x._accum(gx)

    return Tensor._make(out, (x, k), bwd, "conv2d")


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0.0
    if _ReluTrace.active is not None:
        _ReluTrace.active.append(mask.copy())
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * mask)

    return Tensor._make(out, (x,), bwd, "relu")


def absolute(x) -> Tensor:
    """|x| composed from relu so kink handling matches relu's."""
    return add(relu(x), relu(mul(x, -1.0)))


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (1.0 - out * out))

    return Tensor._make(out, (x,), bwd, "tanh")


def sigmoid(x) -> Tensor:
    x = _lift(x)
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * out * (1.0 - out))

    return Tensor._make(out, (x,), bwd, "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x._accum(out * (g - inner))

    return Tensor._make(out, (x,), bwd, "softmax")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise GraphError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._make(out, ts, bwd, "concat")


def narrow(x, key) -> Tensor:
    """Basic-indexing slice; the adjoint scatters back into the source."""
    x = _lift(x)
    try:
        out = np.array(x.data[key])
    except IndexError as exc:
        raise GraphError(f"slice: bad index {key!r} for shape {x.shape}") from exc

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] += g
            x._accum(gx)

    return Tensor._make(out, (x,), bwd, "slice")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accum(np.broadcast_to(gg, x.data.shape))

    return Tensor._make(out, (x,), bwd, "sum")


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = out.size / x.data.size

    def bwd(g):
        if not x.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accum(np.broadcast_to(gg, x.data.shape) * scale)

    return Tensor._make(out, (x,), bwd, "mean")


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise GraphError("log: non-positive input")
    out = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g / x.data)

    return Tensor._make(out, (x,), bwd, "log")


def dropout(x, rate: float, seed: int = 0, train: bool = False) -> Tensor:
    """Inverted dropout; identity when train is False or rate is 0."""
    x = _lift(x)
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout: rate {rate} outside [0, 1)")
    keep = 1.0 - rate
    mask = (np.random.default_rng(seed).random(x.data.shape) < keep) / keep
    out = x.data * mask

    def bwd(g):
        if x.requires_grad:
            x._accum(g * mask)

    return Tensor._make(out, (x,), bwd, "dropout")


class ComputationGraph:
    """A differentiable scalar function of named parameters and inputs.

    ``build`` receives one mapping holding the parameter tensors plus any
    inputs bound at forward time, and returns the output tensor.
    """

    def __init__(self, build: Callable[[dict], Tensor], params: Mapping[str, Tensor]):
        self.build = build
        self.params = dict(params)
        for p in self.params.values():
            p.requires_grad = True
        self.output: Tensor | None = None

    def forward(self, inputs: Mapping[str, np.ndarray] | None = None) -> Tensor:
        bound: dict[str, Tensor] = dict(self.params)
        for name, value in (inputs or {}).items():
            if name in self.params:
                raise GraphError(f"input {name!r} shadows a parameter")
            bound[name] = _lift(value)
        self.output = self.build(bound)
        return self.output

    def backward(self) -> dict[str, np.ndarray]:
        """Gradient of the scalar output with respect to every parameter."""
        if self.output is None:
            raise ContractError("forward must run before backward")
        self.output.backward()
        return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in self.params.items()}


@dataclass
class GradientCheckReport:
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[str, tuple]] = field(default_factory=list)


def finite_difference_check(graph: ComputationGraph, inputs=None, h: float = 1e-5,
                            rel_floor: float = 1e-6) -> GradientCheckReport:
    """Compare reverse-mode gradients against central differences.

    Error per coordinate is |fd - ad| / max(|fd|, |ad|, rel_floor).  A
    coordinate whose +h/-h probes land on different relu sign patterns is
    reported in ``excluded`` instead of being scored.
    """
    graph.forward(inputs)
    analytic = graph.backward()

    def probe():
        trace: list = []
        _ReluTrace.active = trace
        try:
            out = graph.forward(inputs)
        finally:
            _ReluTrace.active = None
        return float(out.data), trace

    max_err = 0.0
    n_checked = 0
    excluded: list[tuple[str, tuple]] = []
    for name, p in graph.params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus, tr_plus = probe()
            flat[i] = orig - h
            f_minus, tr_minus = probe()
            flat[i] = orig
            if len(tr_plus) != len(tr_minus) or any(
                    not np.array_equal(a, b) for a, b in zip(tr_plus, tr_minus)):
                excluded.append((name, tuple(np.unravel_index(i, p.data.shape))))
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), rel_floor)
            max_err = max(max_err, err)
            n_checked += 1
    graph.forward(inputs)
    return GradientCheckReport(max_err, n_checked, excluded)


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter set."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, "Tensor | np.ndarray"]) -> "AdamState":
        def zeros(p):
            return np.zeros_like(p.data if isinstance(p, Tensor) else p)
        return cls(m={k: zeros(p) for k, p in params.items()},
                   v={k: zeros(p) for k, p in params.items()})


def adam_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                state: AdamState, lr: float, *, maximize: bool = False,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step, in place.  ``maximize`` flips to ascent."""
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(grads[name])
        if g.shape != arr.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {arr.shape} for {name!r}")
    state.step_count += 1
    bc1 = 1.0 - beta1 ** state.step_count
    bc2 = 1.0 - beta2 ** state.step_count
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if maximize:
            g = -g
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr = p.data if isinstance(p, Tensor) else p
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient set so its global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def checkpoint_blob(params: Mapping[str, "Tensor | np.ndarray"],
                    header: Mapping | None = None) -> dict:
    """JSON-ready checkpoint payload; floats round-trip bit-identically."""
    blob: dict = {"format_version": CHECKPOINT_FORMAT_VERSION,
                  "header": dict(header or {}), "params": {}}
    for name in sorted(params):
        p = params[name]
        arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} holds non-finite values")
        blob["params"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    return blob


def save_params(params: Mapping[str, "Tensor | np.ndarray"], path,
                header: Mapping | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_blob(params, header), fh, sort_keys=True)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    params = {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
              for name, entry in blob["params"].items()}
    return params, blob.get("header", {})
