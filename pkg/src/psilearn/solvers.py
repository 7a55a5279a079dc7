"""Ground-truth solvers: tabular dynamic programming and the LQG Riccati fixed point.

These are the oracles the acceptance tests and error metrics compare against,
so they favour plain, verifiable recursions over speed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonConvergenceError
from .mdp import INFINITE, FiniteMdp, TabularPolicy

DEFAULT_TOL = 1e-10
ITERATION_CAP = 10 ** 6


@dataclass(frozen=True)
class ValueTable:
    """values: (S,) stationary or (T+1, S) per time step."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def at(self, t: int) -> np.ndarray:
        return self.values if self.values.ndim == 1 else self.values[t]


def _masked_q(mdp: FiniteMdp, stage_cost: np.ndarray, next_values: np.ndarray,
              discount: float) -> np.ndarray:
    """Q(x,u) = C(x,u) + discount * E[J(y)], +inf on disallowed controls."""
    q = stage_cost + discount * (mdp.transition @ next_values)
    return np.where(mdp.allowed, q, np.inf)


def _greedy(q: np.ndarray) -> np.ndarray:
    """Lowest-index argmin per row (deterministic tie-breaking)."""
    return q.argmin(axis=1)


def finite_horizon_dp(mdp: FiniteMdp):
    """Backward recursion for J*_t; returns (ValueTable, greedy TabularPolicy)."""
    if mdp.horizon is INFINITE:
        raise ConfigError("finite_horizon_dp requires a finite horizon")
    T, S = mdp.horizon, mdp.num_states
    J = np.zeros((T + 2, S))
    controls = np.zeros((T + 1, S), dtype=int)
    for t in range(T, -1, -1):
        q = _masked_q(mdp, mdp.cost_at(t), J[t + 1], 1.0)
        controls[t] = _greedy(q)
        J[t] = q[np.arange(S), controls[t]]
    return ValueTable(J[: T + 1]), TabularPolicy.deterministic(mdp, controls)


def value_iteration(mdp: FiniteMdp, tol: float = DEFAULT_TOL):
    """Fixed point of the Bellman optimality operator (infinite horizon).

    Stops when the sup-norm residual drops below tol; raises after 10^6 sweeps.
    """
    if mdp.horizon is not INFINITE:
        raise ConfigError("value_iteration requires an infinite horizon")
    S = mdp.num_states
    J = np.zeros(S)
    for _ in range(ITERATION_CAP):
        q = _masked_q(mdp, mdp.cost, J, mdp.discount)
        Jn = q.min(axis=1)
        if np.max(np.abs(Jn - J)) < tol:
            q = _masked_q(mdp, mdp.cost, Jn, mdp.discount)
            return ValueTable(Jn), TabularPolicy.deterministic(mdp, _greedy(q))
        J = Jn
    raise NonConvergenceError(
        f"value iteration residual {np.max(np.abs(Jn - J)):.3e} after {ITERATION_CAP} sweeps")


def policy_evaluation(mdp: FiniteMdp, pi: TabularPolicy, tol: float = DEFAULT_TOL) -> ValueTable:
    """J^pi by iterating the Bellman expectation operator (stationary policies)."""
    if mdp.horizon is not INFINITE:
        raise ConfigError("policy_evaluation requires an infinite horizon")
    S = mdp.num_states
    tab = pi.at(0)
    J = np.zeros(S)
    for _ in range(ITERATION_CAP):
        q = mdp.cost + mdp.discount * (mdp.transition @ J)
        Jn = (tab * q).sum(axis=1)
        if np.max(np.abs(Jn - J)) < tol:
            return ValueTable(Jn)
        J = Jn
    raise NonConvergenceError(f"policy evaluation did not converge within {ITERATION_CAP} sweeps")


def q_function(mdp: FiniteMdp, pi: TabularPolicy, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Q^pi(x,u) = C(x,u) + gamma E[J^pi(y)]; +inf on disallowed controls."""
    J = policy_evaluation(mdp, pi, tol=tol)
    return _masked_q(mdp, mdp.cost, J.values, mdp.discount)


def finite_cost_to_go(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    """Plain expected cost-to-go V_t(x) under pi, shape (T+2, S), V_{T+1} = 0."""
    T, S = mdp.horizon, mdp.num_states
    V = np.zeros((T + 2, S))
    for t in range(T, -1, -1):
        q = mdp.cost_at(t) + (mdp.transition @ V[t + 1] if t < T else 0.0)
        V[t] = (pi.at(t) * q).sum(axis=1)
    return V


@dataclass(frozen=True)
class LqgProblem:
    """x_{t+1} ~ N(A x + b u, Sigma) with stage cost x'Qx + u'Ru."""

    A: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    discount: float = 1.0

    def __post_init__(self):
        for name in ("A", "b", "Sigma", "Q", "R"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        n = self.A.shape[0]
        b = self.b if self.b.ndim == 2 else self.b.reshape(n, -1)
        b.flags.writeable = False
        object.__setattr__(self, "b", b)
        if self.A.shape != (n, n) or self.b.shape[0] != n:
            raise ConfigError("A must be square and b conformable")
        m = self.b.shape[1]
        R = self.R.reshape(m, m)
        R.flags.writeable = False
        object.__setattr__(self, "R", R)
        for M, name in ((self.Sigma, "Sigma"), (self.Q, "Q")):
            if M.shape != (n, n):
                raise ConfigError(f"{name} must be {n}x{n}")
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise ConfigError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
            raise ConfigError("R must be positive definite")

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def lqr_solve(prob: LqgProblem, tol: float = DEFAULT_TOL, max_iter: int = 10 ** 6):
    """Discounted discrete-time Riccati fixed point by iteration from P = Q.

    Returns (K, P) with the optimal linear policy u = -K x and cost-to-go
    matrix P (noise shifts the value by a constant only).
    """
    A, b, Q, R, g = prob.A, prob.b, prob.Q, prob.R, prob.discount
    P = Q.copy()
    for _ in range(max_iter):
        Pb = P @ b
        gain = np.linalg.solve(R + g * b.T @ Pb, g * b.T @ P @ A)
        Pn = Q + g * A.T @ P @ A - g * A.T @ Pb @ gain
        Pn = 0.5 * (Pn + Pn.T)
        delta = np.max(np.abs(Pn - P))
        if not np.isfinite(delta) or delta > 1e100:
            raise NonConvergenceError("Riccati iteration diverged; (A,b) not stabilizable?")
        if delta < tol:
            K = np.linalg.solve(R + g * b.T @ Pn @ b, g * b.T @ Pn @ A)
            return K, Pn
        P = Pn
    raise NonConvergenceError(f"Riccati residual {delta:.3e} after {max_iter} iterations")


def riccati_residual(prob: LqgProblem, P: np.ndarray) -> float:
    """Sup-norm distance between P and one Riccati backup of P."""
    A, b, Q, R, g = prob.A, prob.b, prob.Q, prob.R, prob.discount
    Pb = P @ b
    gain = np.linalg.solve(R + g * b.T @ Pb, g * b.T @ P @ A)
    Pn = Q + g * A.T @ P @ A - g * A.T @ Pb @ gain
    return float(np.max(np.abs(Pn - P)))


def closed_loop_cost(prob: LqgProblem, K: np.ndarray, start_cov: np.ndarray,
                     steps: int) -> float:
    """Exact E[sum_{t<steps} x'Qx + u'Ru] under u = -Kx from x_0 ~ N(0, start_cov)."""
    K = np.atleast_2d(K)
    Qc = prob.Q + K.T @ prob.R @ K
    Acl = prob.A - prob.b @ K
    M = np.asarray(start_cov, dtype=float).copy()
    total, disc = 0.0, 1.0
    for _ in range(steps):
        total += disc * float(np.trace(Qc @ M))
        M = Acl @ M @ Acl.T + prob.Sigma
        disc *= prob.discount
    return total
