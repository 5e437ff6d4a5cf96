"""Policy networks mapping a price window plus recent allocations to weights.

Three interchangeable architectures share the same contract: input is a
normalized (3, n_assets, window) price tensor together with the trailing
``memory_tail`` weight vectors from the portfolio memory, output is a
long-only weight vector from a softmax head.  All parameters are shared
across assets, so permuting the asset axis permutes the output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .market import PriceTensor

KINDS = ("cnn", "rnn", "lstm")

WEIGHT_SUM_TOL = 1e-9


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one asset")
    return np.full(n, 1.0 / n)


def check_weights(w, n: int | None = None) -> np.ndarray:
    """Validate a long-only allocation vector (non-negative, sums to one)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValidationError(f"weights must be a vector, got shape {w.shape}")
    if n is not None and w.size != n:
        raise ValidationError(f"expected {n} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite")
    if np.any(w < -1e-12):
        raise ValidationError(f"negative weight {w.min():.3e}")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValidationError(f"weights sum to {w.sum():.12f}, not 1")
    return w


class PortfolioMemory:
    """Time-indexed store of emitted weight vectors.

    Reads below the first written index return the uniform vector, so a
    fresh memory behaves as an equal-weight history.  Single writer,
    overwrite semantics.
    """

    def __init__(self, n_assets: int, tail: int = 20):
        if n_assets < 1 or tail < 1:
            raise ValueError("need n_assets >= 1 and tail >= 1")
        self.n_assets = n_assets
        self.tail = tail
        self._store: dict[int, np.ndarray] = {}
        self._uniform = uniform_weights(n_assets)

    def read(self, t: int) -> np.ndarray:
        entry = self._store.get(t)
        return self._uniform.copy() if entry is None else entry.copy()

    def read_tail(self, t: int) -> np.ndarray:
        """The ``tail`` vectors for indices t-tail .. t-1 (never index t)."""
        if t < 0:
            raise ValueError(f"need t >= 0, got {t}")
        out = np.empty((self.tail, self.n_assets))
        for row, idx in enumerate(range(t - self.tail, t)):
            entry = self._store.get(idx)
            out[row] = self._uniform if entry is None else entry
        return out

    def write(self, t: int, w) -> None:
        if t < 0:
            raise ValueError(f"need t >= 0, got {t}")
        self._store[t] = check_weights(w, self.n_assets).copy()

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class PolicySpec:
    """Architecture hyperparameters plus the named parameter tensors."""

    kind: str
    n_assets: int
    window: int = 50
    units: int = 20
    dropout: float = 0.1
    memory_tail: int = 20
    conv_maps: tuple[int, int] = (2, 20)
    input_scale: float = 20.0
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "kind": self.kind, "n_assets": self.n_assets, "window": self.window,
            "units": self.units, "dropout": self.dropout,
            "memory_tail": self.memory_tail, "conv_maps": list(self.conv_maps),
            "input_scale": self.input_scale, "seed": self.seed,
        }

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_policy(kind: str, n_assets: int, seed: int, *, window: int = 50,
                units: int = 20, memory_tail: int = 20, dropout: float = 0.1,
                conv_maps: tuple[int, int] = (2, 20),
                input_scale: float = 20.0) -> PolicySpec:
    """Deterministically initialized policy of the requested kind.

    cnn:  1x3 convolution to ``conv_maps[0]`` feature maps, then a
          1x(window-2) convolution collapsing time to ``conv_maps[1]``
          per-asset features, then a 1x1 mix over those features stacked
          with the memory tail, then softmax.
    rnn:  tanh recurrence with ``units`` hidden units over ``window``
          steps, per-asset input of the 3 price channels, shared weights;
          final hidden state to a per-asset score, mixed with the tail.
    lstm: same layout with an LSTM cell (forget-gate bias starts at 1).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown policy kind {kind!r}; expected one of {KINDS}")
    if n_assets < 2:
        raise ValueError("need n_assets >= 2")
    if window < 3:
        raise ValueError("need window >= 3")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    m1, m2 = conv_maps
    if kind == "cnn":
        params["conv1_w"] = _glorot(rng, (m1, 3, 1, 3), 3 * 3, m1 * 3)
        params["conv1_b"] = np.zeros((m1, 1, 1))
        kw = window - 2
        params["conv2_w"] = _glorot(rng, (m2, m1, 1, kw), m1 * kw, m2 * kw)
        params["conv2_b"] = np.zeros((m2, 1, 1))
        mix_in = m2 + memory_tail
        params["mix_w"] = _glorot(rng, (1, mix_in, 1, 1), mix_in, 1)
        params["mix_b"] = np.zeros((1, 1, 1))
    else:
        gates = 4 if kind == "lstm" else 1
        wx = np.vstack([_glorot(rng, (units, 3), 3, units) for _ in range(gates)])
        wh = np.vstack([_glorot(rng, (units, units), units, units) for _ in range(gates)])
        b = np.zeros((gates * units, 1))
        if kind == "lstm":
            b[units:2 * units] = 1.0  # forget gate opens at init
        params["wx"], params["wh"], params["b"] = wx, wh, b
        params["head_w"] = _glorot(rng, (1, units), units, 1)
        params["head_b"] = np.zeros((1, 1))
        mix_in = 1 + memory_tail
        params["mix_w"] = _glorot(rng, (1, mix_in), mix_in, 1)
        params["mix_b"] = np.zeros((1, 1))
    tensors = {name: Tensor(arr, requires_grad=True, name=name)
               for name, arr in params.items()}
    return PolicySpec(kind=kind, n_assets=n_assets, window=window, units=units,
                      dropout=dropout, memory_tail=memory_tail,
                      conv_maps=(m1, m2), input_scale=input_scale, seed=seed,
                      params=tensors)


def _check_forward_inputs(spec: PolicySpec, state: np.ndarray, tail: np.ndarray):
    if state.shape != (3, spec.n_assets, spec.window):
        raise ValueError(
            f"state shape {state.shape} != (3, {spec.n_assets}, {spec.window})")
    if tail.shape != (spec.memory_tail, spec.n_assets):
        raise ValueError(
            f"memory tail shape {tail.shape} != ({spec.memory_tail}, {spec.n_assets})")


def policy_graph(spec: PolicySpec, state: np.ndarray, tail: np.ndarray,
                 train: bool = False, dropout_seed: int = 0) -> Tensor:
    """Differentiable weight vector as a function of spec.params."""
    state = np.asarray(state, dtype=np.float64)
    tail = np.asarray(tail, dtype=np.float64)
    _check_forward_inputs(spec, state, tail)
    p = spec.params
    # The window is normalized around one; center it at zero and rescale so
    # daily moves reach unit order, which keeps the first layers responsive
    # (a constant-price window maps to exactly zero input).
    x = Tensor((state - 1.0) * spec.input_scale, name="state")
    if spec.kind == "cnn":
        h = ad.relu(ad.add(ad.conv2d(x, p["conv1_w"]), p["conv1_b"]))
        h = ad.relu(ad.add(ad.conv2d(h, p["conv2_w"]), p["conv2_b"]))
        mem = Tensor(tail[:, :, None], name="memory_tail")
        z = ad.concat([h, mem], axis=0)
        scores = ad.add(ad.conv2d(z, p["mix_w"]), p["mix_b"])[0, :, 0]
        return ad.softmax(scores)

    u = spec.units
    h = Tensor(np.zeros((u, spec.n_assets)))
    if spec.kind == "rnn":
        for step in range(spec.window):
            xt = x[:, :, step]
            h = ad.tanh(ad.add(ad.add(ad.matmul(p["wx"], xt), ad.matmul(p["wh"], h)), p["b"]))
    else:
        c = Tensor(np.zeros((u, spec.n_assets)))
        for step in range(spec.window):
            xt = x[:, :, step]
            gates = ad.add(ad.add(ad.matmul(p["wx"], xt), ad.matmul(p["wh"], h)), p["b"])
            i = ad.sigmoid(gates[0:u])
            f = ad.sigmoid(gates[u:2 * u])
            g = ad.tanh(gates[2 * u:3 * u])
            o = ad.sigmoid(gates[3 * u:4 * u])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
    h = ad.dropout(h, spec.dropout, seed=dropout_seed, train=train)
    scores = ad.add(ad.matmul(p["head_w"], h), p["head_b"])
    z = ad.concat([scores, Tensor(tail, name="memory_tail")], axis=0)
    mixed = ad.add(ad.matmul(p["mix_w"], z), p["mix_b"])[0, :]
    return ad.softmax(mixed)


def policy_forward(spec: PolicySpec, state, tail, train_mode: bool = False,
                   dropout_seed: int = 0) -> np.ndarray:
    """Evaluate the policy; returns a validated weight vector."""
    if isinstance(state, PriceTensor):
        state = state.values
    out = policy_graph(spec, state, tail, train=train_mode, dropout_seed=dropout_seed)
    return check_weights(out.data, spec.n_assets)


def save_policy(spec: PolicySpec, path) -> None:
    ad.save_params(spec.params, path, header=spec.header())


def load_policy(path) -> PolicySpec:
    arrays, header = ad.load_params(path)
    spec = PolicySpec(
        kind=header["kind"], n_assets=int(header["n_assets"]),
        window=int(header["window"]), units=int(header["units"]),
        dropout=float(header["dropout"]), memory_tail=int(header["memory_tail"]),
        conv_maps=tuple(header["conv_maps"]),
        input_scale=float(header["input_scale"]), seed=int(header["seed"]),
        params={name: Tensor(arr, requires_grad=True, name=name)
                for name, arr in arrays.items()},
    )
    return spec
