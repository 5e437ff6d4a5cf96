"""Deep-RL and classical portfolio allocation with a shared cost-aware backtester."""

from .allocators import (MomentEstimate, QPProblem, allocation_strategy, equal_weight,
                         estimate_moments, kkt_residuals, mean_variance, min_variance,
                         qp_solve, risk_parity, risk_parity_fixed_point)
from .autodiff import (AdamState, ComputationGraph, Tensor, adam_update,
                       finite_difference_check, load_params, save_params)
from .backtest import (BacktestResult, CostModel, MetricsBlock, compute_metrics,
                       portfolio_value_step, reward, roll_weights, run_backtest)
from .market import (PriceSeries, PriceTensor, add_cash_asset, build_price_tensor,
                     ingest_ohlc, price_relatives, split_train_test, synth_gbm,
                     write_ohlc)
from .policies import (PolicySpec, PortfolioMemory, check_weights, init_policy,
                       load_policy, policy_forward, policy_graph, save_policy,
                       uniform_weights)
from .training import (TrainConfig, TrainHistory, evaluate, sample_sequential_batch,
                       train, train_step)

__version__ = "0.1.0"
