"""Winner-takes-all loss family over mixture forecasts.

All losses accept a batched forecast and return batch-mean scalars.
Per-sample winners are selected on detached values and enter the graph
as constant one-hot masks, which makes non-winner gradients exactly
zero rather than merely small.

The flat family (winner-takes-all, its epsilon relaxation, and the
evolving top-n variant) shares one assignment-weight code path, so the
degenerate settings epsilon=0 and n=1 reproduce plain winner-takes-all
bit for bit.

The hierarchical loss combines a group-level term over moment-matched
meta-components (summed over all groups, each with its own
classification term) with a within-group winner-takes-all term scaled
by the winning group's total weight, blended by gamma. Optional
consistency terms penalize divergence between a snapshot of the
assignment posterior and the current one.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .mixture import HierarchicalMixture, MixtureForecast, meta_mode_stats
from .tensor import Tensor, logsumexp, neg, repeat_axis, reshape, tmean, tsum

__all__ = [
    "LossConfig",
    "LossReport",
    "per_mode_error",
    "wta_loss",
    "eps_wta_loss",
    "ewta_loss",
    "ewta_schedule",
    "l_meta",
    "l_mwta",
    "select_winner_meta",
    "posterior_snapshot",
    "kl_terms",
    "hwta_loss",
    "compute_loss",
]

_ZERO = 0.0


@dataclass
class LossConfig:
    """Configuration for compute_loss; defaults follow the reference recipe."""

    kind: str = "hwta"
    gamma: float = 0.6
    epsilon: float = 0.05
    ewta_n_init: int = 6
    ewta_milestones: Sequence[int] = field(default_factory=list)
    winner_metric: str = "nll"
    normalized_meta_stats: bool = False
    mwta_prefactor_grad: bool = False
    use_kl_terms: bool = True

    def __post_init__(self):
        if self.kind not in ("wta", "eps_wta", "ewta", "hwta"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.winner_metric not in ("nll", "l2"):
            raise ConfigError(f"unknown winner metric {self.winner_metric!r}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigError(f"epsilon must be in [0, 1), got {self.epsilon}")


@dataclass
class LossReport:
    """Scalar loss plus its decomposition; unused terms are 0.0.

    total always equals the configured combination of the terms (for
    the hierarchical loss: gamma*(meta + kl_meta) + (1-gamma)*(mwta +
    kl_mwta)).
    """

    total: Tensor
    meta_term: Tensor | float = _ZERO
    mwta_term: Tensor | float = _ZERO
    kl_meta_term: Tensor | float = _ZERO
    kl_mwta_term: Tensor | float = _ZERO
    winner_index: np.ndarray | None = None
    winner_meta_index: np.ndarray | None = None

    def term_values(self) -> dict[str, float]:
        def val(x):
            return float(x.data) if isinstance(x, Tensor) else float(x)

        return {
            "total": val(self.total),
            "meta_term": val(self.meta_term),
            "mwta_term": val(self.mwta_term),
            "kl_meta": val(self.kl_meta_term),
            "kl_mwta": val(self.kl_mwta_term),
        }


def per_mode_error(y, m: MixtureForecast, metric: str = "nll") -> Tensor:
    """Per-mode regression error, shape (..., n_modes).

    "nll": negative log density of y under the mode.
    "l2": squared displacement summed over coordinates, averaged over steps.
    """
    if metric == "nll":
        return neg(m.mode_log_densities(y))
    if metric == "l2":
        from .mixture import _as_const, _insert_mode_axes
        y_c = _as_const(_insert_mode_axes(y, 1), m.mus.shape)
        d = y_c - m.mus
        return tmean(tsum(d * d, axis=-1), axis=-1)
    raise ConfigError(f"unknown per-mode metric {metric!r}")


def _mean_all(t: Tensor) -> Tensor:
    return tmean(t) if t.ndim > 0 else t


def _assignment_total(m: MixtureForecast, errors: Tensor, mask: np.ndarray) -> Tensor:
    combined = errors + neg(m.log_weights())
    return _mean_all(tsum(combined * Tensor(mask), axis=-1))


def _one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[idx]


def wta_loss(y, m: MixtureForecast, metric: str = "nll") -> LossReport:
    """Winner-only loss: the best mode's error plus its classification term."""
    errors = per_mode_error(y, m, metric)
    winner = np.argmin(errors.data, axis=-1)
    mask = _one_hot(winner, m.n_modes)
    return LossReport(total=_assignment_total(m, errors, mask), winner_index=winner)


def eps_wta_loss(y, m: MixtureForecast, epsilon: float, metric: str = "nll") -> LossReport:
    """Relaxed winner-takes-all: winner weighted 1-eps, losers share eps equally."""
    errors = per_mode_error(y, m, metric)
    winner = np.argmin(errors.data, axis=-1)
    k = m.n_modes
    if k > 1:
        mask = np.full(errors.shape, epsilon / (k - 1))
        np.put_along_axis(mask, winner[..., None], 1.0 - epsilon, axis=-1)
    else:
        mask = np.ones(errors.shape)
    return LossReport(total=_assignment_total(m, errors, mask), winner_index=winner)


def ewta_loss(y, m: MixtureForecast, n: int, metric: str = "nll") -> LossReport:
    """Mean loss of the n best modes per sample."""
    if not (1 <= n <= m.n_modes):
        raise ConfigError(f"ewta_loss: n={n} must be in [1, {m.n_modes}]")
    errors = per_mode_error(y, m, metric)
    order = np.argsort(errors.data, axis=-1, kind="stable")
    top = order[..., :n]
    mask = np.zeros(errors.shape)
    np.put_along_axis(mask, top, 1.0 / n, axis=-1)
    return LossReport(total=_assignment_total(m, errors, mask), winner_index=order[..., 0])


def ewta_schedule(epoch: int, milestones: Sequence[int], n_init: int = 6) -> int:
    """Top-n for a given epoch: drop by one at each passed milestone, floor 1."""
    ms = sorted(milestones)
    return max(1, n_init - bisect_right(ms, epoch))


def _meta_log_density(y, h: HierarchicalMixture, normalized: bool) -> Tensor:
    """Log density of y under each group's meta-component, shape (..., K_meta)."""
    from .mixture import _as_const, _insert_mode_axes, _laplace_ld
    stats = meta_mode_stats(h, normalized=normalized)
    y_c = _as_const(_insert_mode_axes(y, 1), stats.mu_bar.shape)
    return _laplace_ld(y_c, stats.mu_bar, stats.b_bar)


def select_winner_meta(y, h: HierarchicalMixture, normalized: bool = False) -> np.ndarray:
    """Index of the group whose meta-component gives y the highest density.

    Ties resolve to the lowest index. Selection is on values only and
    never differentiated through.
    """
    return np.argmax(_meta_log_density(y, h, normalized).data, axis=-1)


def l_meta(y, h: HierarchicalMixture, normalized: bool = False) -> Tensor:
    """Group-level term, per sample: sum over all groups of
    (-log group weight - log meta-component density)."""
    meta_ld = _meta_log_density(y, h, normalized)
    return tsum(neg(h.meta_log_weights()) + neg(meta_ld), axis=-1)


def l_mwta(y, h: HierarchicalMixture, winner_meta: np.ndarray | None = None,
           prefactor_grad: bool = False, normalized: bool = False) -> tuple[Tensor, np.ndarray]:
    """Within-group term, per sample.

    Sums (-log joint weight - log mode density) over the winning
    group's modes and scales by the reciprocal of that group's total
    weight. The reciprocal is detached unless prefactor_grad is set.
    Returns (per-sample values, winner index).
    """
    if winner_meta is None:
        winner_meta = select_winner_meta(y, h, normalized)
    per_mode = neg(h.log_weights()) + neg(h.mode_log_densities(y))
    group_sums = tsum(per_mode, axis=-1)
    mask = Tensor(_one_hot(winner_meta, h.n_meta))
    selected = tsum(group_sums * mask, axis=-1)
    meta_w = tsum(h.meta_weights() * mask, axis=-1)
    prefactor = (Tensor(1.0) / meta_w) if prefactor_grad else Tensor(1.0 / meta_w.data)
    return selected * prefactor, winner_meta


def posterior_snapshot(y, h: HierarchicalMixture) -> np.ndarray:
    """Detached joint assignment posterior p(mode | y), shape (..., K_meta, K_sub).

    Capture this before an optimizer step to serve as the fixed Q of
    the consistency terms on the following step.
    """
    s = (h.log_weights() + h.mode_log_densities(y)).data
    flat = s.reshape(s.shape[:-2] + (-1,))
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    post = e / e.sum(axis=-1, keepdims=True)
    return post.reshape(s.shape)


def kl_terms(y, h: HierarchicalMixture, previous_responsibilities: np.ndarray,
             winner_meta: np.ndarray | None = None,
             normalized: bool = False) -> tuple[Tensor, Tensor]:
    """Consistency penalties between a posterior snapshot and the current posterior.

    The group-level term is KL(Q_meta || current group posterior)
    scaled by 1/(K_meta*K_sub); the within-group term is
    KL(Q_within_winner || current within-winner posterior) scaled by
    1/K_sub. Q is constant; gradients flow through the current
    posterior only. Both are per-sample tensors.
    """
    prev = np.asarray(previous_responsibilities, dtype=np.float64)
    mode_shape = h.weights.shape
    if prev.shape != mode_shape:
        raise ShapeError(f"previous responsibilities {prev.shape} must match mode axes {mode_shape}")
    if np.any(prev < 0.0) or np.max(np.abs(prev.sum(axis=(-2, -1)) - 1.0)) > 1e-6:
        raise ContractError("previous responsibilities must form a joint simplex")
    if winner_meta is None:
        winner_meta = select_winner_meta(y, h, normalized)

    k_total = h.n_meta * h.n_sub
    s = h.log_weights() + h.mode_log_densities(y)
    flat = reshape(s, s.shape[:-2] + (k_total,))
    log_post = reshape(flat - _keep_last(logsumexp(flat, axis=-1), k_total), s.shape)
    log_meta_post = logsumexp(log_post, axis=-1)

    q_meta = prev.sum(axis=-1)
    q_meta_logq = np.sum(np.where(q_meta > 0.0, q_meta * np.log(np.where(q_meta > 0.0, q_meta, 1.0)), 0.0), axis=-1)
    cross_meta = tsum(log_meta_post * Tensor(q_meta), axis=-1)
    kl_meta = (Tensor(q_meta_logq) - cross_meta) * Tensor(1.0 / k_total)

    mask = _one_hot(winner_meta, h.n_meta)
    q_win = np.take_along_axis(prev, winner_meta[..., None, None], axis=-2)[..., 0, :]
    q_tot = q_win.sum(axis=-1, keepdims=True)
    if np.any(q_tot <= 0.0):
        raise ContractError("snapshot posterior of the winning group has zero mass")
    q_win = q_win / q_tot
    # current conditional log posterior within the winning group
    mask_e = np.repeat(mask[..., None], h.n_sub, axis=-1)
    log_cond_win = tsum(log_post * Tensor(mask_e), axis=-2) - _keep_last_np(
        tsum(log_meta_post * Tensor(mask), axis=-1), h.n_sub)
    q_win_logq = np.sum(np.where(q_win > 0.0, q_win * np.log(np.where(q_win > 0.0, q_win, 1.0)), 0.0), axis=-1)
    cross_win = tsum(log_cond_win * Tensor(q_win), axis=-1)
    kl_mwta = (Tensor(q_win_logq) - cross_win) * Tensor(1.0 / h.n_sub)
    return kl_meta, kl_mwta


def _keep_last(t: Tensor, n: int) -> Tensor:
    return repeat_axis(reshape(t, t.shape + (1,)), -1, n)


def _keep_last_np(t: Tensor, n: int) -> Tensor:
    return _keep_last(t, n)


def hwta_loss(y, h: HierarchicalMixture, gamma: float,
              previous_responsibilities: np.ndarray | None = None,
              normalized: bool = False, prefactor_grad: bool = False) -> LossReport:
    """Hierarchical winner-takes-all loss, batch-meaned.

    total = gamma * (meta + kl_meta) + (1 - gamma) * (mwta + kl_mwta).
    The consistency terms are zero when no posterior snapshot is given.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    winner_meta = select_winner_meta(y, h, normalized)
    meta_term = _mean_all(l_meta(y, h, normalized))
    mwta_vals, _ = l_mwta(y, h, winner_meta, prefactor_grad, normalized)
    mwta_term = _mean_all(mwta_vals)
    if previous_responsibilities is not None:
        kl_m, kl_w = kl_terms(y, h, previous_responsibilities, winner_meta, normalized)
        kl_meta_term: Tensor | float = _mean_all(kl_m)
        kl_mwta_term: Tensor | float = _mean_all(kl_w)
        total = (meta_term + kl_meta_term) * gamma + (mwta_term + kl_mwta_term) * (1.0 - gamma)
    else:
        kl_meta_term = _ZERO
        kl_mwta_term = _ZERO
        total = meta_term * gamma + mwta_term * (1.0 - gamma)
    return LossReport(total=total, meta_term=meta_term, mwta_term=mwta_term,
                      kl_meta_term=kl_meta_term, kl_mwta_term=kl_mwta_term,
                      winner_meta_index=winner_meta)


def compute_loss(y, forecast, config: LossConfig, epoch: int = 0,
                 previous_responsibilities: np.ndarray | None = None) -> LossReport:
    """Dispatch on config.kind; the flat family flattens a hierarchical forecast."""
    if config.kind == "hwta":
        if not isinstance(forecast, HierarchicalMixture):
            raise ConfigError("hwta loss needs a hierarchical forecast")
        prev = previous_responsibilities if config.use_kl_terms else None
        return hwta_loss(y, forecast, config.gamma, prev,
                         normalized=config.normalized_meta_stats,
                         prefactor_grad=config.mwta_prefactor_grad)
    m = forecast.flatten() if isinstance(forecast, HierarchicalMixture) else forecast
    if config.kind == "wta":
        return wta_loss(y, m, config.winner_metric)
    if config.kind == "eps_wta":
        return eps_wta_loss(y, m, config.epsilon, config.winner_metric)
    n = ewta_schedule(epoch, config.ewta_milestones, config.ewta_n_init)
    return ewta_loss(y, m, min(n, m.n_modes), config.winner_metric)
