"""Curvature-aware major step: natural gradient under a mean-KL budget.

The Fisher matrix is the Hessian of the batch-mean KL between the frozen
collection-time policy and the current one, evaluated at the collection-time
parameters.  It is never formed; CG only sees Fisher-vector products.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Tuple, Union

import numpy as np

from trpoppo.autodiff import Graph, ParamVector, evaluate, hessian_vector_product, value_and_gradient
from trpoppo.networks import (
    PolicyNet,
    build_policy,
    clamp_log_std,
    graph_kl,
    graph_log_prob,
    kl_divergence,
    policy_forward,
)
from trpoppo.rollout import TrajectoryBatch


class DegenerateDirection(ArithmeticError):
    """g . d <= 0: the CG direction is not an ascent direction."""


class CGDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrustRegionConfig:
    delta: float = 0.01
    damping: float = 0.1
    cg_iters: int = 10
    cg_tol: float = 1e-10
    eps_guard: float = 1e-8
    ls_backtracks: int = 10
    ls_accept_ratio: float = 0.1
    ls_shrink: float = 0.5

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.cg_tol <= 0 or self.eps_guard <= 0:
            raise ValueError("cg_tol and eps_guard must be > 0")
        if self.ls_backtracks < 0 or not 0.0 < self.ls_shrink < 1.0:
            raise ValueError("invalid line-search schedule")


@dataclass
class NaturalStepReport:
    g_norm: float = 0.0
    d_norm: float = 0.0
    g_dot_d: float = 0.0
    alpha: float = 0.0
    kl_after: float = 0.0
    surrogate_before: float = 0.0
    surrogate_after: float = 0.0
    backtracks_used: int = 0
    cg_residual: float = 0.0
    accepted: bool = False
    skipped: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


class _PolicyGraphs(NamedTuple):
    graph: Graph
    pg_objective: object
    surrogate: object
    mean_kl: object


@lru_cache(maxsize=None)
def _policy_graphs(obs_dim: int, act_dim: int, hidden: Tuple[int, ...]) -> _PolicyGraphs:
    g = Graph()
    obs = g.input("obs", (None, obs_dim))
    actions = g.input("actions", (None, act_dim))
    logp_old = g.input("logp_old", (None,))
    adv = g.input("adv", (None,))
    old_mean = g.input("old_mean", (None, act_dim))
    old_log_std = g.input("old_log_std", (act_dim,))
    shell = PolicyNet(obs_dim, act_dim, hidden, ParamVector.from_arrays({}))
    mean, log_std = build_policy(g, shell, obs)
    logp = graph_log_prob(mean, log_std, actions)
    pg_objective = (logp * adv).mean()
    surrogate = ((logp - logp_old).exp() * adv).mean()
    mean_kl = graph_kl(old_mean, old_log_std, mean, log_std).mean()
    return _PolicyGraphs(g, pg_objective, surrogate, mean_kl)


def policy_graphs(policy: PolicyNet) -> _PolicyGraphs:
    return _policy_graphs(policy.obs_dim, policy.act_dim, tuple(policy.hidden))


def _batch_feed(batch: TrajectoryBatch, policy_old: Optional[PolicyNet] = None) -> dict:
    if len(batch) == 0:
        raise ValueError("empty batch")
    feed = {"obs": batch.obs, "actions": batch.actions, "logp_old": batch.log_probs}
    if batch.advantages is not None:
        feed["adv"] = batch.advantages
    if policy_old is not None:
        dist = policy_forward(policy_old, batch.obs)
        feed["old_mean"] = dist.mean
        feed["old_log_std"] = dist.log_std
    return feed


def surrogate_gradient(batch: TrajectoryBatch, policy_old: PolicyNet) -> ParamVector:
    """(1/T) sum_t grad log pi(a_t|s_t) * A_t at the collection parameters."""
    if batch.advantages is None:
        raise ValueError("advantages have not been computed")
    pg = policy_graphs(policy_old)
    _, grad = value_and_gradient(pg.graph, pg.pg_objective, policy_old.params, _batch_feed(batch))
    return grad


def surrogate_value(batch: TrajectoryBatch, policy: PolicyNet) -> float:
    """Importance-weighted surrogate mean(ratio * A) against stored log-probs."""
    pg = policy_graphs(policy)
    return float(evaluate(pg.graph, pg.surrogate, policy.params, _batch_feed(batch)))


def mean_kl(batch: TrajectoryBatch, policy_old: PolicyNet, policy_new: PolicyNet) -> float:
    """Measured batch-mean KL(pi_old || pi_new), closed form, no graph involved."""
    return float(np.mean(kl_divergence(policy_forward(policy_old, batch.obs), policy_forward(policy_new, batch.obs))))


def fisher_vector_product(
    batch: TrajectoryBatch,
    policy_old: PolicyNet,
    v: ParamVector,
    damping: float = 0.0,
    feed: Optional[dict] = None,
) -> ParamVector:
    """(H + damping * I) v with H the mean-KL Hessian at the old parameters."""
    policy_old.params.check_layout(v)
    pg = policy_graphs(policy_old)
    if feed is None:
        feed = _batch_feed(batch, policy_old)
    hv = hessian_vector_product(pg.graph, pg.mean_kl, policy_old.params, v, feed)
    if damping:
        return hv.with_values(hv.values + damping * v.values)
    return hv


Vector = Union[np.ndarray, ParamVector]


def conjugate_gradient(
    apply_H: Callable[[np.ndarray], np.ndarray],
    g: Vector,
    iters: int = 10,
    tol: float = 1e-10,
    callback: Optional[Callable[[int, float], None]] = None,
) -> Tuple[Vector, float]:
    """Matrix-free Krylov solve of H d = g starting at d = 0.

    Uses the conjugate-residual recurrence: same search space and cost as
    plain CG, but each iterate minimizes ||g - H d|| over the Krylov space,
    so the residual norm never increases.  Plain CG only guarantees that for
    the H-norm of the error.

    Stops once the residual norm drops to ``tol`` or after ``iters``
    iterations.  ``apply_H`` receives and returns flat arrays.  ``callback``
    sees (iteration, residual norm), starting with iteration 0.
    Returns (d, final residual norm).
    """
    as_pv = isinstance(g, ParamVector)
    b = np.array(g.values if as_pv else g, dtype=np.float64)

    def op(v: np.ndarray, k: int) -> np.ndarray:
        out = np.asarray(apply_H(v), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise CGDivergence(f"non-finite operator output at CG iteration {k}")
        return out

    x = np.zeros_like(b)
    r = b.copy()
    res = float(np.sqrt(r @ r))
    if callback is not None:
        callback(0, res)
    if res > tol:
        Hr = op(r, 0)
        rHr = float(r @ Hr)
        p, Hp = r.copy(), Hr.copy()
        for k in range(1, iters + 1):
            if rHr <= 0:
                raise CGDivergence(f"operator not positive definite at CG iteration {k} (r.Hr={rHr:.3e})")
            step = rHr / float(Hp @ Hp)
            x += step * p
            r -= step * Hp
            res = float(np.sqrt(r @ r))
            if callback is not None:
                callback(k, res)
            if res <= tol or k == iters:
                break
            Hr = op(r, k)
            rHr_new = float(r @ Hr)
            beta = rHr_new / rHr
            p = r + beta * p
            Hp = Hr + beta * Hp
            rHr = rHr_new
    if as_pv:
        return g.with_values(x), res
    return x, res


def natural_step(g: Vector, d: Vector, config: TrustRegionConfig) -> Tuple[float, Vector]:
    """alpha = sqrt(2 delta / (g.d + eps)); returns (alpha, alpha * d)."""
    gv = g.values if isinstance(g, ParamVector) else np.asarray(g)
    dv = d.values if isinstance(d, ParamVector) else np.asarray(d)
    gd = float(gv @ dv)
    if not gd > 0.0:
        raise DegenerateDirection(f"g.d = {gd:.3e} is not positive")
    alpha = float(np.sqrt(2.0 * config.delta / (gd + config.eps_guard)))
    if isinstance(d, ParamVector):
        return alpha, d.with_values(alpha * dv)
    return alpha, alpha * dv


class LineSearchResult(NamedTuple):
    policy: PolicyNet
    backtracks: int
    kl: float
    surrogate: float
    accepted: bool


def line_search(
    policy_old: PolicyNet,
    delta_theta: ParamVector,
    batch: TrajectoryBatch,
    config: TrustRegionConfig,
    g: Optional[ParamVector] = None,
    surrogate_before: Optional[float] = None,
) -> LineSearchResult:
    """Backtrack theta_old + shrink^k * step until KL <= delta and the surrogate
    improves by at least ``ls_accept_ratio`` of the linear prediction."""
    step = delta_theta.values
    if not np.all(np.isfinite(step)):
        raise ValueError("non-finite step")
    if surrogate_before is None:
        surrogate_before = surrogate_value(batch, policy_old)
    if not np.any(step):
        return LineSearchResult(policy_old, 0, 0.0, surrogate_before, False)
    if g is None:
        g = surrogate_gradient(batch, policy_old)
    predicted = float(g.values @ step)
    theta = policy_old.params.values
    scale = 1.0
    for k in range(config.ls_backtracks + 1):
        candidate = policy_old.with_params(
            clamp_log_std(policy_old.params.with_values(theta + scale * step))
        )
        kl = mean_kl(batch, policy_old, candidate)
        surr = surrogate_value(batch, candidate)
        improve = surr - surrogate_before
        if kl <= config.delta and improve >= config.ls_accept_ratio * scale * predicted and improve >= 0:
            return LineSearchResult(candidate, k, kl, surr, True)
        scale *= config.ls_shrink
    return LineSearchResult(policy_old, config.ls_backtracks, 0.0, surrogate_before, False)


def trpo_step(policy: PolicyNet, batch: TrajectoryBatch, config: TrustRegionConfig) -> Tuple[PolicyNet, NaturalStepReport]:
    """One full major step. Returns the old policy unchanged when skipped."""
    report = NaturalStepReport()
    g = surrogate_gradient(batch, policy)
    report.g_norm = float(np.linalg.norm(g.values))
    report.surrogate_before = surrogate_value(batch, policy)
    report.surrogate_after = report.surrogate_before
    if report.g_norm == 0.0:
        report.skipped = "zero_gradient"
        return policy, report

    feed = _batch_feed(batch, policy)
    pg = policy_graphs(policy)
    layout = policy.params.layout
    damping = config.damping

    def apply_H(v: np.ndarray) -> np.ndarray:
        hv = hessian_vector_product(pg.graph, pg.mean_kl, policy.params, ParamVector(v, layout), feed)
        return hv.values + damping * v

    try:
        d, residual = conjugate_gradient(apply_H, g, config.cg_iters, config.cg_tol)
    except CGDivergence as exc:
        report.skipped = f"cg: {exc}"
        return policy, report
    report.d_norm = float(np.linalg.norm(d.values))
    report.g_dot_d = float(g.values @ d.values)
    report.cg_residual = residual
    try:
        alpha, delta_theta = natural_step(g, d, config)
    except DegenerateDirection:
        report.skipped = "degenerate_direction"
        return policy, report
    report.alpha = alpha
    result = line_search(policy, delta_theta, batch, config, g=g, surrogate_before=report.surrogate_before)
    report.backtracks_used = result.backtracks
    report.accepted = result.accepted
    if not result.accepted:
        report.skipped = "line_search_failed"
        return policy, report
    report.kl_after = result.kl
    report.surrogate_after = result.surrogate
    return result.policy, report
