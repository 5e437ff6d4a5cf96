"""Policy-gradient training through the differentiable cost-aware value step.

The batch objective is the mean log cost-adjusted return over a
time-ordered window of decision indices; parameters ascend it with Adam.
The portfolio memory is written with every emitted allocation, so the
network sees its own recent positions and the cost term charges the
distance to the drifted previous allocation.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .backtest import BacktestResult, CostModel, roll_weights, run_backtest
from .errors import TrainingAborted
from .market import PriceSeries, build_price_tensor, price_relatives, series_content_hash
from .policies import (KINDS, PolicySpec, PortfolioMemory, init_policy,
                       policy_forward, policy_graph, save_policy, uniform_weights)

DEFAULT_LEARNING_RATES = {"cnn": 0.028, "rnn": 0.00028, "lstm": 0.0028}


@dataclass
class TrainConfig:
    kind: str
    learning_rate: float | None = None  # per-kind default when None
    steps: int = 50_000
    batch_size: int = 109
    window: int = 50
    cost_rate: float = 0.0005
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    checkpoint_dir: str | None = None
    stride: int | None = None  # defaults to batch_size (tiling sweep)
    grad_clip: float | None = 5.0
    units: int = 20
    memory_tail: int = 20
    dropout: float = 0.1
    conv_maps: tuple[int, int] = (2, 20)
    input_scale: float = 20.0
    memory_ablated: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LEARNING_RATES[self.kind]


@dataclass
class TrainHistory:
    """Per-completed-step diagnostics; skipped steps are listed separately."""

    rewards: list[float] = field(default_factory=list)
    param_norms: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    skipped_steps: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


def sample_sequential_batch(train_range: tuple[int, int], batch_size: int,
                            step: int, stride: int | None = None) -> list[int]:
    """Consecutive decision indices; successive steps sweep the range in
    time order and wrap back to the range start."""
    lo, hi = train_range
    span = hi - lo
    if span < batch_size:
        raise ValueError(f"range [{lo}, {hi}) shorter than batch size {batch_size}")
    if stride is None:
        stride = batch_size
    if stride < 1:
        raise ValueError("stride must be at least 1")
    positions = (span - batch_size) // stride + 1
    start = lo + (step % positions) * stride
    return list(range(start, start + batch_size))


def _dropout_seed(seed: int, step: int, t: int) -> int:
    return int(np.random.SeedSequence((seed, step, t)).generate_state(1)[0])


def batch_log_terms(spec: PolicySpec, batch, series: PriceSeries,
                    memory: PortfolioMemory, cfg: TrainConfig, step_index: int,
                    train: bool = True) -> tuple[list[Tensor], list[float]]:
    """Differentiable cost-adjusted bracket per batch index.

    Writes each emitted allocation into the memory, so later indices in
    the same batch read the earlier outputs (values only, no gradient
    through the store).
    """
    n = series.n_assets
    terms: list[Tensor] = []
    brackets: list[float] = []
    uniform_tail = np.tile(uniform_weights(n), (spec.memory_tail, 1))
    for t in batch:
        state = build_price_tensor(series, t, cfg.window).values
        tail = uniform_tail if cfg.memory_ablated else memory.read_tail(t)
        w = policy_graph(spec, state, tail, train=train,
                         dropout_seed=_dropout_seed(cfg.seed, step_index, t))
        y_next = price_relatives(series, t + 1)
        prev_rolled = roll_weights(memory.read(t - 1), price_relatives(series, t))
        gross = ad.tsum(ad.mul(w, Tensor(y_next)))
        traded = ad.tsum(ad.absolute(ad.sub(w, Tensor(prev_rolled))))
        bracket = ad.sub(gross, ad.mul(traded, cfg.cost_rate))
        brackets.append(float(bracket.data))
        terms.append(bracket)
        memory.write(t, w.data)
    return terms, brackets


def train_step(spec: PolicySpec, batch, series: PriceSeries, memory: PortfolioMemory,
               cfg: TrainConfig, adam_state: AdamState, step_index: int = 0,
               learning_rate: float | None = None) -> tuple[PolicySpec, float]:
    """One ascent step on the mean log cost-adjusted return of the batch.

    Returns the batch reward, or NaN when a non-positive bracket forces
    the step to be skipped (parameters untouched, memory still written).
    """
    lr = cfg.resolved_learning_rate() if learning_rate is None else learning_rate
    terms, brackets = batch_log_terms(spec, batch, series, memory, cfg, step_index)
    if min(brackets) <= 0.0:
        return spec, math.nan
    objective = None
    for term in terms:
        logged = ad.log(term)
        objective = logged if objective is None else ad.add(objective, logged)
    objective = ad.mul(objective, 1.0 / len(terms))
    objective.backward()
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in spec.params.items()}
    if cfg.grad_clip is not None:
        ad.clip_grad_norm(grads, cfg.grad_clip)
    ad.adam_update(spec.params, grads, adam_state, lr, maximize=True)
    return spec, float(objective.data)


def _snapshot(spec: PolicySpec) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in spec.params.items()}


def _restore(spec: PolicySpec, snapshot: dict[str, np.ndarray]) -> None:
    for name, p in spec.params.items():
        p.data = snapshot[name].copy()


def _params_finite(spec: PolicySpec) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in spec.params.values())


def train(cfg: TrainConfig, series: PriceSeries) -> tuple[PolicySpec, TrainHistory]:
    """Full training run over the tradable range of ``series``.

    Deterministic for a fixed (config, seed, data).  Emits checkpoints to
    ``cfg.checkpoint_dir`` when set; aborts with the last good parameters
    if a step produces non-finite values.
    """
    spec = init_policy(cfg.kind, series.n_assets, cfg.seed, window=cfg.window,
                       units=cfg.units, memory_tail=cfg.memory_tail,
                       dropout=cfg.dropout, conv_maps=cfg.conv_maps,
                       input_scale=cfg.input_scale)
    memory = PortfolioMemory(series.n_assets, cfg.memory_tail)
    adam_state = AdamState.for_params(spec.params)
    history = TrainHistory()
    lo, hi = cfg.window, len(series.dates) - 1
    if hi - lo < cfg.batch_size:
        raise ValueError(
            f"training range [{lo}, {hi}) shorter than batch size {cfg.batch_size}")
    lr = cfg.resolved_learning_rate()
    last_good = _snapshot(spec)
    for step in range(cfg.steps):
        started = time.perf_counter()
        batch = sample_sequential_batch((lo, hi), cfg.batch_size, step, cfg.stride)
        spec, batch_reward = train_step(spec, batch, series, memory, cfg,
                                        adam_state, step, lr)
        if not _params_finite(spec):
            _restore(spec, last_good)
            if cfg.checkpoint_dir is not None:
                save_policy(spec, os.path.join(cfg.checkpoint_dir,
                                               f"checkpoint_{cfg.kind}_last_good.json"))
            raise TrainingAborted(
                f"non-finite parameters at step {step}; restored last good state",
                spec=spec, history=history)
        if math.isnan(batch_reward):
            history.skipped_steps.append(step)
        else:
            history.rewards.append(batch_reward)
            history.param_norms.append(
                float(np.sqrt(sum(float((p.data ** 2).sum()) for p in spec.params.values()))))
            history.step_seconds.append(time.perf_counter() - started)
        last_good = _snapshot(spec)
        if (cfg.checkpoint_dir is not None and cfg.checkpoint_every > 0
                and (step + 1) % cfg.checkpoint_every == 0):
            save_policy(spec, os.path.join(cfg.checkpoint_dir,
                                           f"checkpoint_{cfg.kind}_step{step + 1:06d}.json"))
    if cfg.checkpoint_dir is not None:
        save_policy(spec, os.path.join(cfg.checkpoint_dir, f"checkpoint_{cfg.kind}.json"))
    return spec, history


def evaluate(spec: PolicySpec, series: PriceSeries, cost: CostModel,
             window: int | None = None, memory_ablated: bool = False) -> BacktestResult:
    """Deterministic evaluation pass (dropout off), memory fed online.

    The portfolio memory restarts uniform and is populated with the
    policy's own outputs as the backtest advances.  ``memory_ablated``
    replaces the memory input with uniform vectors, removing the
    network's view of its past allocations (the cost term still applies).
    """
    window = spec.window if window is None else window
    memory = PortfolioMemory(spec.n_assets, spec.memory_tail)
    uniform_tail = np.tile(uniform_weights(spec.n_assets), (spec.memory_tail, 1))

    def strategy(view: PriceSeries, t: int) -> np.ndarray:
        tail = uniform_tail if memory_ablated else memory.read_tail(t)
        state = build_price_tensor(view, t, window).values
        w = policy_forward(spec, state, tail, train_mode=False)
        memory.write(t, w)
        return w

    return run_backtest(strategy, series, cost, window)


def run_manifest(cfg: TrainConfig, series: PriceSeries,
                 final_metrics: dict | None = None) -> dict:
    """Reproducibility record: config, seed, data hash, final metrics."""
    config = {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in vars(cfg).items()}
    return {
        "config": config,
        "seed": cfg.seed,
        "data_hash": series_content_hash(series),
        "final_metrics": final_metrics,
    }
