"""Classical allocation baselines over a rolling moment estimate.

Four schemes share one moment estimator (sample mean and covariance of
simple daily returns over a 50-period lookback): equal weight,
mean-variance with a baseline-return floor, equal-risk-contribution, and
long-only minimum variance.  The quadratic programs are solved by a
deterministic dense active-set method; risk parity by damped Newton on an
equivalent convex problem, cross-checkable against a fixed-point
iteration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InfeasibleError
from .market import PriceSeries
from .policies import check_weights, uniform_weights

COVARIANCE_JITTER = 1e-8

# Set by the test suite: every qp_solve call is then re-verified by the
# independent KKT residual routine.
VERIFY_KKT = False

_FEAS_TOL = 1e-9
_OPT_TOL = 1e-8


@dataclass(frozen=True)
class MomentEstimate:
    """Per-asset expected daily return and jittered return covariance."""

    mu: np.ndarray
    omega: np.ndarray
    lookback: int = 50


@dataclass(frozen=True)
class QPProblem:
    """min 0.5 w'Pw + q'w  s.t.  Aw = b,  Gw <= h  (P symmetric PSD)."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def parts(self):
        n = self.P.shape[0]
        A = np.zeros((0, n)) if self.A is None else np.atleast_2d(np.asarray(self.A, float))
        b = np.zeros(0) if self.b is None else np.atleast_1d(np.asarray(self.b, float))
        G = np.zeros((0, n)) if self.G is None else np.atleast_2d(np.asarray(self.G, float))
        h = np.zeros(0) if self.h is None else np.atleast_1d(np.asarray(self.h, float))
        if A.shape[0] != b.size or A.shape[1] != n or G.shape[0] != h.size or G.shape[1] != n:
            raise ValueError("constraint dimensions inconsistent with P")
        return np.asarray(self.P, float), np.asarray(self.q, float), A, b, G, h


def estimate_moments(series: PriceSeries, t: int, lookback: int = 50) -> MomentEstimate:
    """Sample moments of simple daily returns over (t-lookback, t]."""
    if t < lookback:
        raise ValueError(f"need t >= lookback, got t={t}, lookback={lookback}")
    if t >= len(series.dates):
        raise ValueError(f"t={t} beyond the series (length {len(series.dates)})")
    closes = series.close[t - lookback:t + 1]
    returns = closes[1:] / closes[:-1] - 1.0
    mu = returns.mean(axis=0)
    centered = returns - mu
    omega = centered.T @ centered / (lookback - 1)
    omega = 0.5 * (omega + omega.T)
    min_eig = np.linalg.eigvalsh(omega).min()
    if min_eig < -1e-10:
        raise ValueError(f"covariance not PSD before jitter (min eigenvalue {min_eig:.3e})")
    omega = omega + COVARIANCE_JITTER * np.eye(series.n_assets)
    return MomentEstimate(mu=mu, omega=omega, lookback=lookback)


def equal_weight(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need n >= 1")
    return uniform_weights(n)


def kkt_residuals(problem: QPProblem, w: np.ndarray) -> dict[str, float]:
    """Independent KKT residuals at w: primal feasibility, stationarity,
    complementary slackness, and dual feasibility (multipliers from a
    least-squares fit on the active constraints)."""
    P, q, A, b, G, h = problem.parts()
    grad = P @ w + q
    eq_violation = float(np.abs(A @ w - b).max()) if A.shape[0] else 0.0
    slack = G @ w - h if G.shape[0] else np.zeros(0)
    ineq_violation = float(slack.max()) if slack.size else 0.0
    active = slack > -1e-7 if slack.size else np.zeros(0, dtype=bool)
    C = np.vstack([A, G[active]])
    if C.shape[0]:
        mult, *_ = np.linalg.lstsq(C.T, -grad, rcond=None)
        stationarity = float(np.abs(grad + C.T @ mult).max())
        lam = mult[A.shape[0]:]
        dual_violation = float(max(0.0, -(lam.min() if lam.size else 0.0)))
        comp = float(np.abs(lam * slack[active]).max()) if lam.size else 0.0
    else:
        stationarity = float(np.abs(grad).max())
        dual_violation = 0.0
        comp = 0.0
    return {
        "primal_eq": eq_violation,
        "primal_ineq": max(ineq_violation, 0.0),
        "stationarity": stationarity,
        "dual": dual_violation,
        "complementarity": comp,
    }


def _eqp_step(P, grad, C):
    """Direction minimizing the local quadratic model subject to C p = 0."""
    n = P.shape[0]
    if C.shape[0] == 0:
        Z = np.eye(n)
    else:
        _, s, vt = np.linalg.svd(C, full_matrices=True)
        rank = int((s > 1e-12 * max(1.0, s[0] if s.size else 1.0)).sum())
        Z = vt[rank:].T
    if Z.shape[1] == 0:
        return np.zeros(n)
    H = Z.T @ P @ Z
    rhs = -(Z.T @ grad)
    pz, *_ = np.linalg.lstsq(H, rhs, rcond=None)
    return Z @ pz


def _multipliers(grad, C):
    mult, *_ = np.linalg.lstsq(C.T, -grad, rcond=None)
    return mult


def qp_solve(problem: QPProblem, x0: np.ndarray | None = None,
             max_iter: int = 10_000) -> np.ndarray:
    """Deterministic primal active-set solve of a small dense convex QP.

    Ties (blocking constraints, multipliers to drop) are broken by lowest
    index.  Raises InfeasibleError when phase 1 cannot reach the feasible
    region, ConvergenceError past the iteration cap.
    """
    P, q, A, b, G, h = problem.parts()
    n = P.shape[0]
    if not np.allclose(P, P.T, atol=1e-10):
        raise ValueError("P must be symmetric")
    x = _phase1(A, b, G, h) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    if A.shape[0] and np.abs(A @ x - b).max() > 1e-7:
        raise InfeasibleError("starting point violates the equality constraints")

    working: list[int] = []
    for _ in range(max_iter):
        C = np.vstack([A, G[working]]) if (A.shape[0] or working) else np.zeros((0, n))
        grad = P @ x + q
        p = _eqp_step(P, grad, C)
        if p.size == 0 or np.abs(p).max() <= 1e-11:
            if C.shape[0] == 0:
                break
            mult = _multipliers(grad, C)
            lam = mult[A.shape[0]:]
            if lam.size == 0 or lam.min() >= -_OPT_TOL:
                break
            drop = int(np.argmin(lam))  # most negative; argmin takes lowest index on ties
            working.pop(drop)
            continue
        alpha = 1.0
        blocking = -1
        for i in range(G.shape[0]):
            if i in working:
                continue
            gi_p = float(G[i] @ p)
            if gi_p > 1e-13:
                step = float(h[i] - G[i] @ x) / gi_p
                if step < alpha - 1e-12:
                    alpha, blocking = max(step, 0.0), i
        x = x + alpha * p
        if blocking >= 0:
            working.append(blocking)
            working.sort()
    else:
        res = kkt_residuals(problem, x)
        raise ConvergenceError(f"active set did not converge in {max_iter} iterations: {res}")

    if G.shape[0]:
        viol = G @ x - h
        if viol.size and viol.max() > _FEAS_TOL:
            res = kkt_residuals(problem, x)
            raise ConvergenceError(f"solution infeasible after convergence: {res}")
    if VERIFY_KKT:
        res = kkt_residuals(problem, x)
        if (res["primal_eq"] > _FEAS_TOL or res["primal_ineq"] > _FEAS_TOL
                or res["stationarity"] > 1e-6 or res["dual"] > 1e-6):
            raise AssertionError(f"KKT verification failed: {res}")
    return x


def _phase1(A, b, G, h):
    """Feasible point via a slack QP solved by the same active-set core."""
    n = A.shape[1] if A.shape[0] else G.shape[1]
    if A.shape[0]:
        x0, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.abs(A @ x0 - b).max() > 1e-8:
            raise InfeasibleError("equality constraints are inconsistent")
    else:
        x0 = np.zeros(n)
    if G.shape[0] == 0 or (G @ x0 - h).max() <= 0.0:
        return x0
    m = G.shape[0]
    # variables z = (x, s): min 0.5 s's  s.t.  A x = b,  G x - s <= h
    P_aug = np.zeros((n + m, n + m))
    P_aug[n:, n:] = np.eye(m)
    q_aug = np.zeros(n + m)
    A_aug = np.hstack([A, np.zeros((A.shape[0], m))]) if A.shape[0] else None
    G_aug = np.hstack([G, -np.eye(m)])
    s0 = np.maximum(G @ x0 - h, 0.0) + 1.0
    z0 = np.concatenate([x0, s0])
    aug = QPProblem(P=P_aug, q=q_aug, A=A_aug, b=b if A.shape[0] else None, G=G_aug, h=h)
    z = qp_solve(aug, x0=z0)
    x, s = z[:n], z[n:]
    worst = float(np.maximum(G @ x - h, 0.0).max())
    if worst > _FEAS_TOL or np.abs(s).max() > 1e-6:
        raise InfeasibleError(
            f"no feasible point: minimal constraint violation {worst:.3e} "
            f"(slack norm {np.abs(s).max():.3e})")
    return x


def _simplex_qp(P, q, extra_G=None, extra_h=None) -> np.ndarray:
    n = P.shape[0]
    G = -np.eye(n)
    h = np.zeros(n)
    if extra_G is not None:
        G = np.vstack([G, extra_G])
        h = np.concatenate([h, extra_h])
    problem = QPProblem(P=P, q=q, A=np.ones((1, n)), b=np.ones(1), G=G, h=h)
    w = qp_solve(problem)
    w = np.where(w < 0.0, 0.0, w)
    return check_weights(w / w.sum(), n)


def mean_variance(m: MomentEstimate, baseline_return: float | None = None) -> np.ndarray:
    """Minimum-variance weights whose expected return reaches the baseline.

    Long-only and fully invested.  The baseline defaults to the
    cross-sectional mean of the expected returns.
    """
    mu = np.asarray(m.mu, dtype=np.float64)
    n = mu.size
    mu_b = float(mu.mean()) if baseline_return is None else float(baseline_return)
    if mu_b > mu.max() + 1e-12:
        raise InfeasibleError(
            f"baseline return {mu_b:.6g} exceeds the best asset mean {mu.max():.6g}")
    return _simplex_qp(m.omega, np.zeros(n),
                       extra_G=-mu[None, :], extra_h=np.array([-mu_b]))


def min_variance(m: MomentEstimate, vol_target: float | None = None) -> np.ndarray:
    """Long-only minimum-variance weights on the simplex.

    With ``vol_target`` set, the risky allocation is scaled by
    min(1, vol_target / vol(w)) and the remainder is prepended as a cash
    component (vector then has length n+1).
    """
    n = m.omega.shape[0]
    w = _simplex_qp(2.0 * m.omega, np.zeros(n))
    if vol_target is None:
        return w
    vol = float(np.sqrt(w @ m.omega @ w))
    scale = 1.0 if vol <= vol_target else vol_target / vol
    return check_weights(np.concatenate([[1.0 - scale], scale * w]), n + 1)


def risk_parity_fixed_point(omega: np.ndarray, max_iter: int = 10_000,
                            tol: float = 1e-12) -> np.ndarray:
    """Independent fixed-point iteration: w <- normalize(var(w) / ((omega w) n))."""
    n = omega.shape[0]
    w = uniform_weights(n)
    for _ in range(max_iter):
        g = omega @ w
        var = float(w @ g)
        nxt = var / (g * n)
        nxt /= nxt.sum()
        if np.abs(nxt - w).max() < tol:
            return nxt
        w = nxt
    raise ConvergenceError(f"fixed point did not converge in {max_iter} iterations")


def risk_parity(m: MomentEstimate, max_iter: int = 10_000,
                grad_tol: float = 1e-10) -> np.ndarray:
    """Equal-risk-contribution weights on the simplex.

    Solved by damped Newton on the convex potential
    0.5 u'Ou - (1/n) sum log u over u > 0, whose normalized minimizer
    equalizes the contributions w_i (Ow)_i; this is also the zero (hence
    global minimum) of the least-squares contribution-mismatch objective.
    """
    omega = np.asarray(m.omega, dtype=np.float64)
    n = omega.shape[0]
    if np.linalg.eigvalsh(omega).min() <= 0.0:
        raise ValueError("risk parity needs a positive-definite covariance")
    sigma = np.sqrt(np.diag(omega))
    u = (1.0 / sigma)
    u /= np.sqrt(float(u @ omega @ u))  # start near the right scale
    converged = False
    for _ in range(200):
        g = omega @ u - 1.0 / (n * u)
        if np.abs(g).max() <= grad_tol * max(1.0, np.abs(omega @ u).max()):
            converged = True
            break
        H = omega + np.diag(1.0 / (n * u * u))
        step = np.linalg.solve(H, -g)
        alpha = 1.0
        phi = 0.5 * u @ omega @ u - np.log(u).sum() / n
        descent = float(g @ step)
        for _ in range(60):
            cand = u + alpha * step
            if np.all(cand > 0.0):
                phi_c = 0.5 * cand @ omega @ cand - np.log(cand).sum() / n
                if phi_c <= phi + 1e-4 * alpha * descent:
                    break
            alpha *= 0.5
        u = u + alpha * step
    w = u / u.sum()

    def rc_spread(w):
        g = omega @ w
        var = float(w @ g)
        return np.abs(w * g - var / n).max() / var

    if not converged or rc_spread(w) > 1e-8:
        # polish with the fixed-point map before giving up
        for it in range(max_iter):
            if rc_spread(w) <= 1e-10:
                break
            g = omega @ w
            w = (float(w @ g) / (g * n))
            w /= w.sum()
        if rc_spread(w) > 1e-8:
            raise ConvergenceError(
                f"risk contributions not equalized (relative spread {rc_spread(w):.3e})")
    return check_weights(w, n)


def allocation_strategy(name: str, *, lookback: int = 50,
                        baseline_return: float | None = None,
                        vol_target: float | None = None):
    """Backtest callback for one classical scheme: f(series, t) -> weights."""
    if name == "equal_weight":
        return lambda series, t: equal_weight(series.n_assets)
    if name == "mean_variance":
        return lambda series, t: mean_variance(
            estimate_moments(series, t, lookback), baseline_return)
    if name == "risk_parity":
        return lambda series, t: risk_parity(estimate_moments(series, t, lookback))
    if name == "min_variance":
        return lambda series, t: min_variance(
            estimate_moments(series, t, lookback), vol_target)
    raise ValueError(f"unknown allocation scheme {name!r}")
