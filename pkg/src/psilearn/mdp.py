"""Finite MDPs, tabular policies and exact trajectory-level quantities.

States and controls are dense integer indices. Control sets may vary per
state through an ``allowed`` mask (disallowed controls are excluded from
policies, optimizations and log-partitions everywhere downstream).
Costs are nonnegative so that exp(-cost) is a valid per-step likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation, NonConvergenceError

ROW_TOL = 1e-12

# horizon sentinel for the infinite-horizon case
INFINITE = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP.

    transition: (S, U, S) row-stochastic for every allowed (x, u).
    cost: (S, U) stationary, or (T+1, S, U) time-varying (finite horizon only).
    horizon: int T (time steps run t = 0..T) or INFINITE (None).
    allowed: (S, U) bool mask of admissible controls; defaults to all.
    """

    num_states: int
    num_controls: int
    transition: np.ndarray
    cost: np.ndarray
    discount: float = 1.0
    horizon: int | None = INFINITE
    absorbing: frozenset = frozenset()
    allowed: np.ndarray | None = None

    def __post_init__(self):
        S, U = self.num_states, self.num_controls
        object.__setattr__(self, "transition", _readonly(self.transition))
        object.__setattr__(self, "cost", _readonly(self.cost))
        object.__setattr__(self, "absorbing", frozenset(int(a) for a in self.absorbing))
        if self.allowed is None:
            allowed = np.ones((S, U), dtype=bool)
        else:
            allowed = np.asarray(self.allowed, dtype=bool).copy()
        allowed.flags.writeable = False
        object.__setattr__(self, "allowed", allowed)
        self._validate()

    def _validate(self):
        S, U = self.num_states, self.num_controls
        if self.transition.shape != (S, U, S):
            raise ConfigError(f"transition shape {self.transition.shape} != {(S, U, S)}")
        if self.cost.ndim == 2:
            if self.cost.shape != (S, U):
                raise ConfigError(f"cost shape {self.cost.shape} != {(S, U)}")
        elif self.cost.ndim == 3:
            if self.horizon is INFINITE:
                raise ConfigError("time-varying cost requires a finite horizon")
            if self.cost.shape != (self.horizon + 1, S, U):
                raise ConfigError(
                    f"cost shape {self.cost.shape} != {(self.horizon + 1, S, U)}")
        else:
            raise ConfigError("cost must be (S,U) or (T+1,S,U)")
        if not (0.0 <= self.discount <= 1.0):
            raise ConfigError(f"discount {self.discount} outside [0, 1]")
        if self.horizon is not INFINITE and self.horizon < 0:
            raise ConfigError("finite horizon must be >= 0")
        if np.any(self.cost < 0):
            t, x, u = [int(v) for v in np.argwhere(self.cost < 0).reshape(-1)[-3:]]
            raise ConfigError(f"negative cost at entry {(t, x, u)}; costs must be >= 0")
        if not self.allowed.any(axis=1).all():
            x = int(np.flatnonzero(~self.allowed.any(axis=1))[0])
            raise ConfigError(f"state {x} has no allowed control")
        rowsum = self.transition.sum(axis=2)
        bad = self.allowed & (np.abs(rowsum - 1.0) > ROW_TOL)
        if bad.any():
            x, u = map(int, np.argwhere(bad)[0])
            raise ConfigError(
                f"transition row (x={x}, u={u}) sums to {rowsum[x, u]!r}, not 1")
        for a in self.absorbing:
            if not (0 <= a < S):
                raise ConfigError(f"absorbing state {a} out of range")
            row = self.transition[a]
            ok = row[self.allowed[a], :]
            if np.any(np.abs(ok[:, a] - 1.0) > ROW_TOL):
                raise ConfigError(f"absorbing state {a} does not self-transition w.p. 1")
        if self.horizon is INFINITE and self.discount == 1.0 and not self.absorbing:
            raise ConfigError(
                "infinite horizon with discount 1 requires a non-empty absorbing set")

    # -- helpers -------------------------------------------------------------

    @property
    def stages(self) -> int | None:
        """Number of decision stages T+1, or None for infinite horizon."""
        return None if self.horizon is INFINITE else self.horizon + 1

    def cost_at(self, t: int) -> np.ndarray:
        """Stage cost C_t(x, u); applies gamma^t for stationary discounted costs."""
        if self.cost.ndim == 3:
            return self.cost[t]
        if self.horizon is not INFINITE and self.discount != 1.0:
            return self.discount ** t * self.cost
        return self.cost

    def max_cost(self) -> float:
        return float(self.cost[..., self.allowed].max()) if self.cost.ndim == 3 \
            else float(self.cost[self.allowed].max())

    def start_distribution(self, x0) -> np.ndarray:
        """Accept a state index or a distribution vector; return a distribution."""
        if np.isscalar(x0):
            mu = np.zeros(self.num_states)
            mu[int(x0)] = 1.0
            return mu
        mu = np.asarray(x0, dtype=float)
        if mu.shape != (self.num_states,) or abs(mu.sum() - 1.0) > ROW_TOL or (mu < 0).any():
            raise ConfigError("start distribution must be a probability vector over states")
        return mu


@dataclass(frozen=True)
class TabularPolicy:
    """Per-state distribution over controls, optionally per time step.

    table: (S, U) stationary or (T+1, S, U) time-varying. Rows sum to 1 and
    are zero on disallowed controls.
    """

    table: np.ndarray
    kind: str = "stochastic"  # "stochastic" | "deterministic"

    def __post_init__(self):
        object.__setattr__(self, "table", _readonly(self.table))
        if self.table.ndim not in (2, 3):
            raise ConfigError("policy table must be (S,U) or (T+1,S,U)")
        rows = self.table.reshape(-1, self.table.shape[-1])
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL):
            i = int(np.flatnonzero(np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL)[:1] or [0])
            raise InvariantViolation(f"policy row {i} is not a distribution")
        if self.kind == "deterministic":
            if not np.all(np.isin(rows, (0.0, 1.0))):
                raise InvariantViolation("deterministic policy rows must be one-hot")

    @property
    def stationary(self) -> bool:
        return self.table.ndim == 2

    def at(self, t: int) -> np.ndarray:
        """(S, U) distribution table for time step t."""
        return self.table if self.stationary else self.table[t]

    @staticmethod
    def uniform(mdp: FiniteMdp, stages: int | None = None) -> "TabularPolicy":
        """Uniform over the allowed controls of each state."""
        tab = mdp.allowed / mdp.allowed.sum(axis=1, keepdims=True)
        if stages is not None:
            tab = np.repeat(tab[None], stages, axis=0)
        return TabularPolicy(tab)

    @staticmethod
    def deterministic(mdp: FiniteMdp, controls: np.ndarray) -> "TabularPolicy":
        """controls: (S,) or (T+1, S) int control indices."""
        controls = np.asarray(controls, dtype=int)
        tab = np.zeros(controls.shape + (mdp.num_controls,))
        np.put_along_axis(tab, controls[..., None], 1.0, axis=-1)
        return TabularPolicy(tab, kind="deterministic")


@dataclass(frozen=True)
class TransitionSample:
    """One observed (x, u, cost, y) transition."""

    x: int
    u: int
    cost: float
    y: int

    def __post_init__(self):
        if self.cost < 0:
            raise ConfigError(f"observed cost {self.cost} must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    """States x_0..x_T and controls u_0..u_T (one control per stage)."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=int))
        object.__setattr__(self, "controls", np.asarray(self.controls, dtype=int))
        if self.states.shape != self.controls.shape or self.states.ndim != 1:
            raise ConfigError("states and controls must be 1-d and equally long")

    def __len__(self):
        return len(self.states)


# -- operations ---------------------------------------------------------------

def task_log_likelihood(mdp: FiniteMdp, t: int, x: int, u: int) -> float:
    """log P(task succeeded at step t | x, u) = -C_t(x, u); always <= 0."""
    S, U = mdp.num_states, mdp.num_controls
    if not (0 <= x < S and 0 <= u < U):
        raise IndexError(f"(x={x}, u={u}) out of range for ({S}, {U})")
    return -float(mdp.cost_at(t)[x, u])


def _stage_costs(mdp: FiniteMdp, pi: TabularPolicy, mu0: np.ndarray, stages: int):
    """Forward propagation; yields (t, mu_t, joint_t) with joint = mu * pi."""
    mu = mu0
    for t in range(stages):
        joint = mu[:, None] * pi.at(t)
        yield t, mu, joint
        mu = np.einsum("xu,xuy->y", joint, mdp.transition)


GAMMA1_MASS_TOL = 1e-12
GAMMA1_CAP = 10 ** 6
TAIL_EPS = 1e-10


def truncation_horizon(mdp: FiniteMdp, eps: float = TAIL_EPS) -> int:
    """Stages after which the discounted tail is below eps (gamma < 1)."""
    cmax = mdp.max_cost()
    if cmax == 0.0 or mdp.discount == 0.0:
        return 1
    g = mdp.discount
    return int(np.ceil(np.log(eps * (1.0 - g) / cmax) / np.log(g))) + 1


def expected_cost(mdp: FiniteMdp, pi: TabularPolicy, x0) -> float:
    """Exact expected total (discounted) cost from x0 under pi.

    Finite horizons propagate state-control marginals for T+1 stages.
    Infinite horizons truncate with tail <= 1e-10 (gamma < 1) or run until
    the non-absorbing mass vanishes (gamma = 1, proper policies).
    """
    mu0 = mdp.start_distribution(x0)
    if mdp.horizon is not INFINITE:
        return float(sum((joint * mdp.cost_at(t)).sum()
                         for t, _, joint in _stage_costs(mdp, pi, mu0, mdp.stages)))
    if mdp.discount < 1.0:
        T = truncation_horizon(mdp)
        total, mu, disc = 0.0, mu0, 1.0
        for _ in range(T):
            joint = mu[:, None] * pi.at(0)
            total += disc * float((joint * mdp.cost).sum())
            mu = np.einsum("xu,xuy->y", joint, mdp.transition)
            disc *= mdp.discount
        return total
    # gamma = 1 with absorbing states
    absorbing = np.zeros(mdp.num_states, dtype=bool)
    absorbing[list(mdp.absorbing)] = True
    pos_cost_absorbing = absorbing & (np.where(mdp.allowed, mdp.cost, 0.0).max(axis=1) > 0)
    total, mu = 0.0, mu0
    for it in range(GAMMA1_CAP):
        if mu[~absorbing].sum() < GAMMA1_MASS_TOL:
            return total
        if mu[pos_cost_absorbing].sum() > GAMMA1_MASS_TOL:
            raise NonConvergenceError(
                "mass absorbed at positive-cost states; undiscounted cost diverges")
        joint = mu[:, None] * pi.at(0)
        total += float((joint * mdp.cost).sum())
        mu = np.einsum("xu,xuy->y", joint, mdp.transition)
    raise NonConvergenceError(
        f"non-absorbing mass {mu[~absorbing].sum():.3e} after {GAMMA1_CAP} steps; "
        "policy looks improper")


def trajectory_log_density(mdp: FiniteMdp, pi: TabularPolicy, traj: Trajectory) -> float:
    """log q_pi(trajectory | x_0); -inf if any policy or transition factor is 0."""
    if mdp.stages is not None and len(traj) != mdp.stages:
        raise ConfigError(f"trajectory length {len(traj)} != stages {mdp.stages}")
    logp = 0.0
    for t in range(len(traj)):
        x, u = traj.states[t], traj.controls[t]
        p = pi.at(t)[x, u]
        if p == 0.0:
            return -np.inf
        logp += np.log(p)
        if t + 1 < len(traj):
            ptrans = mdp.transition[x, u, traj.states[t + 1]]
            if ptrans == 0.0:
                return -np.inf
            logp += np.log(ptrans)
    return float(logp)


def posterior_log_weight(mdp: FiniteMdp, traj: Trajectory) -> float:
    """Unnormalized posterior log weight relative to q_pi: minus the total cost."""
    return float(sum(task_log_likelihood(mdp, t, traj.states[t], traj.controls[t])
                     for t in range(len(traj))))
