"""KL-divergence policy iteration: exact duality evaluation, the closed-form
KL minimizer, backward soft-value sweeps and stationary soft-value iteration.

The soft value psibar(x) = log sum_u exp psi(x,u) is always recomputed with a
max-subtracted log-sum-exp; psi entries for suboptimal controls drift toward
-inf, so a relative floor keeps the table NaN-free without touching the policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantViolation, SupportViolation
from .mdp import INFINITE, FiniteMdp, TabularPolicy, expected_cost
from .solvers import finite_cost_to_go, value_iteration

PSI_FLOOR = 700.0
COST_INCREASE_TOL = 1e-9


def masked_logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """log sum exp that tolerates -inf entries (all -inf rows stay -inf)."""
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        out = safe.squeeze(axis) + np.log(np.exp(a - safe).sum(axis=axis))
    return np.where(np.isfinite(m.squeeze(axis)), out, -np.inf)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True)
class PsiTable:
    """Energy table psi(x, u), stationary (S, U) or per time step (T+1, S, U).

    Disallowed controls carry -inf. The log-partition and the Boltzmann policy
    are derived on demand, never cached.
    """

    psi: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.psi, dtype=float).copy()
        p.flags.writeable = False
        object.__setattr__(self, "psi", p)
        if self.psi.ndim not in (2, 3):
            raise ConfigError("psi must be (S,U) or (T+1,S,U)")
        if np.isneginf(masked_logsumexp(self.psi)).any():
            raise ConfigError("psi has a state with no finite entry")

    def log_partition(self) -> np.ndarray:
        """psibar(x) = log sum_u exp psi(x, u); per state (and time step)."""
        return masked_logsumexp(self.psi, axis=-1)

    def policy(self) -> TabularPolicy:
        return TabularPolicy(np.exp(self.psi - self.log_partition()[..., None]))

    def greedy_controls(self) -> np.ndarray:
        return self.psi.argmax(axis=-1)

    @staticmethod
    def from_policy(pi: TabularPolicy) -> "PsiTable":
        """psi = log pi, so the log-partition is 0 and the derived policy is pi."""
        return PsiTable(_log(pi.table))

    @staticmethod
    def zeros(mdp: FiniteMdp, stages: int | None = None) -> "PsiTable":
        psi = np.where(mdp.allowed, 0.0, -np.inf)
        if stages is not None:
            psi = np.repeat(psi[None], stages, axis=0)
        return PsiTable(psi)


@dataclass(frozen=True)
class UpdateSchedule:
    """Policy-update schedule for iterate_policies.

    kind "full_backward_sweep": every iteration re-derives all time slices.
    kind "asynchronous": iteration i updates the single time step times[i %
    len(times)]. tail "expected" uses the exact cost-to-go of the current
    policy (the restricted argmin, monotone for any visiting order); tail
    "soft" reuses the persisted log-partition messages (single-slice version
    of the backward sweep; monotone across whole backward passes only).
    kind "stationary_value_style": synchronous stationary sweeps on an
    infinite-horizon problem.
    """

    kind: str = "full_backward_sweep"
    times: tuple = ()
    tail: str = "expected"

    KINDS = ("full_backward_sweep", "asynchronous", "stationary_value_style")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "asynchronous" and not self.times:
            raise ConfigError("asynchronous schedule needs at least one time step")
        if self.tail not in ("expected", "soft"):
            raise ConfigError(f"unknown tail mode {self.tail!r}")
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))

    @staticmethod
    def full_sweep() -> "UpdateSchedule":
        return UpdateSchedule("full_backward_sweep")

    @staticmethod
    def asynchronous(times, tail: str = "expected") -> "UpdateSchedule":
        return UpdateSchedule("asynchronous", tuple(times), tail)

    @staticmethod
    def stationary() -> "UpdateSchedule":
        return UpdateSchedule("stationary_value_style")


@dataclass(frozen=True)
class KlReport:
    """Exact divergence bookkeeping for a controlled-vs-posterior pair.

    kl = log_evidence + relaxed_cost + E[log pi] (the last term is zero for
    deterministic policies, which is the Theorem-1 identity).
    """

    kl: float
    expected_cost: float
    relaxed_cost: float
    log_evidence: float


def kl_controlled_vs_posterior(mdp: FiniteMdp, pi: TabularPolicy,
                               pi0: TabularPolicy, x0) -> KlReport:
    """KL(q_pi || p_pi0) plus the cost/evidence terms of the duality identity.

    Forward marginal propagation gives the divergence and cost sums exactly;
    the evidence log P(all steps succeed | x0; pi0) comes from a backward
    sum-product pass in log space.
    """
    if mdp.horizon is INFINITE:
        raise ConfigError("kl_controlled_vs_posterior requires a finite horizon")
    T = mdp.horizon
    mu = mdp.start_distribution(x0)
    kl_local = 0.0
    cost = 0.0
    relaxed = 0.0
    for t in range(T + 1):
        tab, tab0 = pi.at(t), pi0.at(t)
        joint = mu[:, None] * tab
        viol = (joint > 0) & (tab0 == 0.0)
        if viol.any():
            x, u = map(int, np.argwhere(viol)[0])
            raise SupportViolation(t, x, u)
        ct = mdp.cost_at(t)
        cost += float((joint * ct).sum())
        mask = joint > 0
        relaxed += float((joint * ct)[mask].sum() - (joint * _log(tab0))[mask].sum())
        kl_local += float((joint * (_log(tab) - _log(tab0)))[mask].sum())
        mu = np.einsum("xu,xuy->y", joint, mdp.transition)
    log_evidence = evidence_log_prob(mdp, pi0, x0)
    return KlReport(kl=kl_local + cost + log_evidence, expected_cost=cost,
                    relaxed_cost=relaxed, log_evidence=log_evidence)


def evidence_log_prob(mdp: FiniteMdp, pi0: TabularPolicy, x0) -> float:
    """log P(task succeeds at every step | x0; pi0) by backward sum-product."""
    T, S = mdp.horizon, mdp.num_states
    g = np.zeros(S)
    for t in range(T, -1, -1):
        if t < T:
            m = g.max()
            trans = m + _log(mdp.transition @ np.exp(g - m))
        else:
            trans = np.zeros((S, mdp.num_controls))
        a = _log(pi0.at(t)) - mdp.cost_at(t) + trans
        g = masked_logsumexp(a, axis=1)
    mu0 = mdp.start_distribution(x0)
    m = g[mu0 > 0].max()
    return float(m + np.log(np.dot(mu0, np.exp(g - m))))


def kl_minimizer_closed_form(prior: np.ndarray, channel: np.ndarray,
                             obs_loglik: np.ndarray):
    """Closed-form minimizer of KL(q(a)P(b|a) || P(a)P(b|a)exp{loglik(b)}).

    Returns (q_star, min_kl) with q_star(a) proportional to
    prior(a) * exp(sum_b P(b|a) loglik(b)) and min_kl = -log of the total
    unnormalized mass.
    """
    prior = np.asarray(prior, dtype=float)
    channel = np.asarray(channel, dtype=float)
    obs_loglik = np.asarray(obs_loglik, dtype=float)
    if abs(prior.sum() - 1.0) > 1e-9 or (prior < 0).any():
        raise ConfigError("prior must be a distribution over a")
    # 0 * -inf := 0 so impossible channel branches cannot poison the sum
    contrib = np.where(channel > 0, channel * obs_loglik, 0.0)
    s = contrib.sum(axis=1)
    logw = _log(prior) + s
    m = logw.max()
    if not np.isfinite(m):
        raise ConfigError("all posterior mass vanished; nothing to normalize")
    log_z = m + np.log(np.exp(logw - m).sum())
    return np.exp(logw - log_z), float(-log_z)


def psi_backward_sweep(mdp: FiniteMdp, pi_prev: TabularPolicy) -> PsiTable:
    """Full backward recursion for the relaxed KL minimizer (finite horizon).

    psi_t(x,u) = log pi_prev(u|x) - C_t(x,u) + E_y[psibar_{t+1}(y)], with
    psibar_{T+1} = 0. The derived Boltzmann policy is the next iterate of the
    policy chain.
    """
    if mdp.horizon is INFINITE:
        raise ConfigError("psi_backward_sweep requires a finite horizon")
    T, S, U = mdp.horizon, mdp.num_states, mdp.num_controls
    psi = np.empty((T + 1, S, U))
    psibar_next = np.zeros(S)
    for t in range(T, -1, -1):
        logp = _log(pi_prev.at(t))
        psi[t] = np.where(mdp.allowed, logp - mdp.cost_at(t), -np.inf)
        if t < T:
            psi[t] += np.where(mdp.allowed, mdp.transition @ psibar_next, 0.0)
        psibar_next = masked_logsumexp(psi[t], axis=1)
        if np.isneginf(psibar_next).any():
            x = int(np.flatnonzero(np.isneginf(psibar_next))[0])
            raise SupportViolation(t, x, None,
                                   f"prior policy has empty support at (t={t}, x={x})")
    return PsiTable(psi)


def _async_slice_expected(mdp, pi_tables, t_hat):
    """Exact restricted argmin at one time step: Boltzmann tilt of the current
    slice against C_t + E[plain cost-to-go of the current policy]."""
    T = mdp.horizon
    V = finite_cost_to_go(mdp, TabularPolicy(np.stack(pi_tables)))
    tail = mdp.transition @ V[t_hat + 1] if t_hat < T else 0.0
    logit = np.where(mdp.allowed, _log(pi_tables[t_hat]) - mdp.cost_at(t_hat) - tail, -np.inf)
    return np.exp(logit - masked_logsumexp(logit, axis=1)[:, None])


def iterate_policies(mdp: FiniteMdp, pi0: TabularPolicy, schedule: UpdateSchedule,
                     iters: int, x0=0):
    """Run the KL policy iteration and record exact expected costs.

    Returns a list of (TabularPolicy, expected_cost) of length iters + 1,
    starting with (pi0, cost(pi0)). Raises InvariantViolation if any recorded
    cost increases by more than 1e-9, which would indicate a broken update.
    """
    if schedule.kind == "stationary_value_style":
        if mdp.horizon is not INFINITE:
            raise ConfigError("stationary schedule requires an infinite horizon")
        return _iterate_stationary(mdp, pi0, iters, x0)
    if mdp.horizon is INFINITE:
        raise ConfigError("finite-horizon schedules require a finite horizon")
    T = mdp.horizon
    if pi0.stationary:
        pi0 = TabularPolicy(np.repeat(pi0.table[None], T + 1, axis=0), kind=pi0.kind)
    bad = mdp.allowed & ~np.all(pi0.table > 0, axis=0)
    if bad.any():
        x, u = map(int, np.argwhere(bad)[0])
        raise SupportViolation(None, x, u, f"pi0 must be strictly positive; zero at (x={x}, u={u})")

    seq = [(pi0, expected_cost(mdp, pi0, x0))]
    pi = pi0
    use_soft = schedule.kind == "asynchronous" and schedule.tail == "soft"
    soft_psi = _log(pi0.table) if use_soft else None
    for i in range(iters):
        if schedule.kind == "full_backward_sweep":
            pi = psi_backward_sweep(mdp, pi).policy()
        else:
            t_hat = schedule.times[i % len(schedule.times)]
            if not 0 <= t_hat <= T:
                raise ConfigError(f"schedule time {t_hat} outside [0, {T}]")
            if schedule.tail == "expected":
                tables = [pi.at(t).copy() for t in range(T + 1)]
                tables[t_hat] = _async_slice_expected(mdp, tables, t_hat)
                pi = TabularPolicy(np.stack(tables))
            else:
                soft_psi = psi_async_soft_update(mdp, soft_psi, t_hat)
                pi = PsiTable(soft_psi).policy()
        cost = expected_cost(mdp, pi, x0)
        if cost > seq[-1][1] + COST_INCREASE_TOL:
            raise InvariantViolation(
                f"expected cost rose from {seq[-1][1]!r} to {cost!r} at iteration {i}")
        seq.append((pi, cost))
    return seq


def psi_async_soft_update(mdp: FiniteMdp, psi: np.ndarray, t_hat: int) -> np.ndarray:
    """Single-time-step version of the backward sweep on a persisted table.

    Reuses the stored log-partition of the slice below instead of the exact
    cost-to-go of the current policy; a backward pass over all time steps
    therefore reproduces the full sweep table slice for slice.
    """
    T = mdp.horizon
    psibar = masked_logsumexp(psi, axis=2)
    tail = mdp.transition @ psibar[t_hat + 1] if t_hat < T else 0.0
    out = psi.copy()
    out[t_hat] = np.where(mdp.allowed,
                          (psi[t_hat] - psibar[t_hat][:, None])
                          - mdp.cost_at(t_hat) + tail, -np.inf)
    return out


def _iterate_stationary(mdp, pi0, sweeps, x0):
    psi = PsiTable.from_policy(pi0)
    seq = [(pi0, expected_cost(mdp, pi0, x0))]
    for i in range(sweeps):
        psi = psi_value_iteration(mdp, psi, 1, divergence_check=False)
        pi = psi.policy()
        cost = expected_cost(mdp, pi, x0)
        if cost > seq[-1][1] + COST_INCREASE_TOL:
            raise InvariantViolation(
                f"expected cost rose from {seq[-1][1]!r} to {cost!r} at sweep {i}")
        seq.append((pi, cost))
    return seq


def psi_value_iteration(mdp: FiniteMdp, psi_init: PsiTable, sweeps: int,
                        divergence_check: bool = True) -> PsiTable:
    """Synchronous stationary soft-value sweeps.

    psi <- psi - psibar(x) - C(x,u) + gamma E_y[psibar(y)] per sweep. After
    convergence psibar tracks -J* up to a state-independent constant; a
    diagnostic fires if range(psibar + J*) grows for 100 consecutive sweeps.
    """
    if mdp.horizon is not INFINITE:
        raise ConfigError("psi_value_iteration requires an infinite horizon")
    if mdp.cost.ndim != 2:
        raise ConfigError("psi_value_iteration requires a stationary cost")
    psi = psi_init.psi.copy()
    if psi.ndim != 2:
        raise ConfigError("stationary sweeps need a stationary psi table")
    j_star = value_iteration(mdp)[0].values if divergence_check else None
    prev_range, growing = np.inf, 0
    for sweep in range(sweeps):
        psibar = masked_logsumexp(psi, axis=1)
        update = -psibar[:, None] - mdp.cost + mdp.discount * (mdp.transition @ psibar)
        psi = np.where(mdp.allowed, psi + update, -np.inf)
        psibar_new = masked_logsumexp(psi, axis=1)
        psi = np.where(mdp.allowed, np.maximum(psi, (psibar_new - PSI_FLOOR)[:, None]),
                       -np.inf)
        if divergence_check:
            shifted = psibar_new + j_star
            cur_range = float(shifted.max() - shifted.min())
            growing = growing + 1 if cur_range > prev_range else 0
            prev_range = cur_range
            if growing >= 100:
                raise InvariantViolation(
                    f"range(psibar + J*) grew for 100 consecutive sweeps "
                    f"(now {cur_range:.3e}); soft-value iteration is diverging")
    return PsiTable(psi)
