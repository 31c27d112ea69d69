"""Laplace mixture forecasts, flat and hierarchical.

A forecast over a 2-d trajectory of t_pred steps is a mixture of modes;
each mode places an independent Laplace distribution on every
coordinate of every step (mean mu, scale b). The hierarchical variant
arranges K_meta * K_sub modes in K_meta groups sharing one joint weight
simplex; each group can be summarized by a single moment-matched
meta-component.

All value types hold autodiff tensors and accept optional leading batch
axes: a mode's mu has shape (..., t_pred, 2) and weights have shape
(..., n_modes). Ground-truth trajectories enter as constants.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    absolute,
    exp,
    log,
    logsumexp,
    maximum,
    mul,
    neg,
    repeat_axis,
    reshape,
    slice_axis,
    softmax,
    sqrt,
    sub,
    tsum,
)

__all__ = [
    "B_MIN",
    "LaplaceComponent",
    "MixtureForecast",
    "HierarchicalMixture",
    "MetaModeStats",
    "laplace_log_density",
    "mixture_nll",
    "responsibilities",
    "meta_mode_stats",
    "meta_stats_from_raw",
    "meta_mixture",
    "write_forecast_csv",
    "read_forecast_csv",
]

B_MIN = 1e-4
SIMPLEX_TOL = 1e-9


def _as_const(y, shape) -> Tensor:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    try:
        return Tensor(np.broadcast_to(arr, shape).copy())
    except ValueError:
        raise ShapeError(f"target shape {arr.shape} does not broadcast to forecast shape {shape}")


def _check_scales(b: Tensor) -> None:
    if np.any(b.data < B_MIN):
        raise ContractError(f"Laplace scales must be >= {B_MIN}, got min {float(np.min(b.data)):.3e}")


def _check_simplex(w: np.ndarray, axes: tuple[int, ...]) -> None:
    if np.any(w < 0.0):
        raise ContractError("mixture weights must be non-negative")
    sums = np.sum(w, axis=axes)
    if np.max(np.abs(sums - 1.0)) > SIMPLEX_TOL:
        raise ContractError(
            f"mixture weights must sum to 1 within {SIMPLEX_TOL}, worst sum {float(sums.flat[np.argmax(np.abs(sums - 1.0))]):.12f}")


@dataclass
class LaplaceComponent:
    """One mode: per-coordinate independent Laplace distribution.

    mu and b have shape (..., t_pred, 2); every b entry is >= B_MIN.
    """

    mu: Tensor
    b: Tensor

    def __post_init__(self):
        if self.mu.shape != self.b.shape:
            raise ShapeError(f"component mu {self.mu.shape} and b {self.b.shape} must match")
        _check_scales(self.b)


def _expand_like(w: Tensor, target_shape) -> Tensor:
    """Repeat trailing (t, 2) axes onto a per-mode weight tensor."""
    t, c = target_shape[-2], target_shape[-1]
    out = reshape(w, w.shape + (1, 1))
    out = repeat_axis(out, -2, t)
    return repeat_axis(out, -1, c)


class MixtureForecast:
    """A flat mixture of n_modes Laplace components with one weight simplex.

    Built either from raw positive weights or from unnormalized logits;
    when logits are given, weights and log-weights are derived through a
    stable log-softmax so near-zero weights never produce log(0). The
    logits-to-weights graph is recorded at construction, so build the
    forecast inside the tape when logit gradients are needed.
    """

    def __init__(self, mus: Tensor, bs: Tensor, weights: Tensor | None = None,
                 logits: Tensor | None = None):
        if mus.shape != bs.shape:
            raise ShapeError(f"mus {mus.shape} and bs {bs.shape} must match")
        if mus.ndim < 3:
            raise ShapeError(f"mus must be (..., n_modes, t_pred, 2), got {mus.shape}")
        if (weights is None) == (logits is None):
            raise ContractError("exactly one of weights/logits must be given")
        _check_scales(bs)
        self.mus = mus
        self.bs = bs
        self.logits = logits
        if logits is not None:
            if logits.shape != mus.shape[:-2]:
                raise ShapeError(f"logits {logits.shape} must match mode axes {mus.shape[:-2]}")
            self._log_weights = sub(logits, _lse_last(logits, keep=True))
            self.weights = exp(self._log_weights)
        else:
            if weights.shape != mus.shape[:-2]:
                raise ShapeError(f"weights {weights.shape} must match mode axes {mus.shape[:-2]}")
            _check_simplex(weights.data, axes=(-1,))
            self.weights = weights
            self._log_weights = None

    @property
    def n_modes(self) -> int:
        return self.mus.shape[-3]

    @property
    def t_pred(self) -> int:
        return self.mus.shape[-2]

    def log_weights(self) -> Tensor:
        if self._log_weights is not None:
            return self._log_weights
        return log(self.weights)

    @property
    def components(self) -> list[LaplaceComponent]:
        out = []
        ax = self.mus.ndim - 3
        for k in range(self.n_modes):
            mu = reshape(slice_axis(self.mus, ax, k, k + 1), self.mus.shape[:-3] + self.mus.shape[-2:])
            b = reshape(slice_axis(self.bs, ax, k, k + 1), self.bs.shape[:-3] + self.bs.shape[-2:])
            out.append(LaplaceComponent(mu, b))
        return out

    def mode_log_densities(self, y) -> Tensor:
        """Per-mode log density of trajectory y, shape (..., n_modes)."""
        y_c = _as_const(_insert_mode_axes(y, 1), self.mus.shape)
        return _laplace_ld(y_c, self.mus, self.bs)


def _insert_mode_axes(y, n_axes: int) -> np.ndarray:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    idx = (Ellipsis,) + (None,) * n_axes + (slice(None), slice(None))
    return arr[idx]


def _laplace_ld(y_c: Tensor, mus: Tensor, bs: Tensor) -> Tensor:
    per_coord = neg(log(mul(bs, Tensor(2.0)))) - absolute(sub(y_c, mus)) / bs
    return tsum(per_coord, axis=(-2, -1))


def _lse_last(t: Tensor, keep: bool = False) -> Tensor:
    out = logsumexp(t, axis=-1)
    if keep:
        out = repeat_axis(reshape(out, out.shape + (1,)), -1, t.shape[-1])
    return out


class HierarchicalMixture:
    """K_meta groups of K_sub modes sharing one joint weight simplex.

    Joint weights have shape (..., K_meta, K_sub) and sum to 1 over both
    mode axes together; a group's meta-weight is the sum of its row.
    """

    def __init__(self, mus: Tensor, bs: Tensor, weights: Tensor | None = None,
                 logits: Tensor | None = None):
        if mus.shape != bs.shape:
            raise ShapeError(f"mus {mus.shape} and bs {bs.shape} must match")
        if mus.ndim < 4:
            raise ShapeError(f"mus must be (..., K_meta, K_sub, t_pred, 2), got {mus.shape}")
        if (weights is None) == (logits is None):
            raise ContractError("exactly one of weights/logits must be given")
        _check_scales(bs)
        self.mus = mus
        self.bs = bs
        self.logits = logits
        mode_shape = mus.shape[:-2]
        if logits is not None:
            if logits.shape != mode_shape:
                raise ShapeError(f"logits {logits.shape} must match mode axes {mode_shape}")
            flat = reshape(logits, logits.shape[:-2] + (self.n_meta * self.n_sub,))
            lw = sub(flat, _lse_last(flat, keep=True))
            self._log_weights = reshape(lw, logits.shape)
            self.weights = exp(self._log_weights)
        else:
            if weights.shape != mode_shape:
                raise ShapeError(f"weights {weights.shape} must match mode axes {mode_shape}")
            _check_simplex(weights.data, axes=(-2, -1))
            self.weights = weights
            self._log_weights = None

    @property
    def n_meta(self) -> int:
        return self.mus.shape[-4]

    @property
    def n_sub(self) -> int:
        return self.mus.shape[-3]

    @property
    def t_pred(self) -> int:
        return self.mus.shape[-2]

    def log_weights(self) -> Tensor:
        if self._log_weights is not None:
            return self._log_weights
        return log(self.weights)

    def meta_weights(self) -> Tensor:
        """Per-group total weight, shape (..., K_meta)."""
        return tsum(self.weights, axis=-1)

    def meta_log_weights(self) -> Tensor:
        return logsumexp(self.log_weights(), axis=-1)

    def flatten(self) -> MixtureForecast:
        """The equivalent flat mixture of K_meta*K_sub modes (row-major mode order)."""
        lead = self.mus.shape[:-4]
        k = self.n_meta * self.n_sub
        mus = reshape(self.mus, lead + (k,) + self.mus.shape[-2:])
        bs = reshape(self.bs, lead + (k,) + self.bs.shape[-2:])
        if self.logits is not None:
            return MixtureForecast(mus, bs, logits=reshape(self.logits, lead + (k,)))
        return MixtureForecast(mus, bs, weights=reshape(self.weights, lead + (k,)))

    def mode_log_densities(self, y) -> Tensor:
        """Per-mode log density of trajectory y, shape (..., K_meta, K_sub)."""
        y_c = _as_const(_insert_mode_axes(y, 2), self.mus.shape)
        return _laplace_ld(y_c, self.mus, self.bs)


@dataclass
class MetaModeStats:
    """Moment-matched Laplace summary of each group, shape (..., K_meta, t_pred, 2)."""

    mu_bar: Tensor
    b_bar: Tensor


def laplace_log_density(y, component: LaplaceComponent) -> Tensor:
    """Log density of trajectory y under one mode; scalar for unbatched inputs.

    Per coordinate: -log(2b) - |y - mu| / b, summed over steps and
    coordinates.
    """
    y_c = _as_const(y, component.mu.shape)
    return _laplace_ld(y_c, component.mu, component.b)


def mixture_nll(y, m: MixtureForecast) -> Tensor:
    """Negative log density of y under the mixture (stable log-sum-exp)."""
    return neg(logsumexp(m.log_weights() + m.mode_log_densities(y), axis=-1))


def responsibilities(y, m: MixtureForecast) -> Tensor:
    """Posterior p(mode | y), shape (..., n_modes); rows sum to 1."""
    return softmax(m.log_weights() + m.mode_log_densities(y), axis=-1)


def meta_stats_from_raw(weights: Tensor, mus: Tensor, bs: Tensor,
                        normalized: bool = False, b_min: float = B_MIN) -> MetaModeStats:
    """Meta-component moments from raw (..., K_meta, K_sub) joint weights.

    Default is the verbatim formulation: the joint weights enter the
    mean unnormalized with a 1/K_sub factor, and the squared-scale sum
    is unweighted. The normalized variant re-weights by the
    within-group conditional w = pi / pi_group and matches the mixture
    variance exactly (2*b_bar^2 = group variance). Both clamp b_bar^2
    at b_min^2 before the square root.
    """
    k_sub = mus.shape[-3]
    w_e = _expand_like(weights, mus.shape)
    if not normalized:
        mu_bar = tsum(w_e * mus, axis=-3) * Tensor(1.0 / k_sub)
        second = tsum(bs * bs * 2.0 + mus * mus, axis=-3) * Tensor(1.0 / (2.0 * k_sub))
        b_sq = second - mu_bar * mu_bar
    else:
        group_tot = tsum(weights, axis=-1, keepdims=True)
        cond = weights / repeat_axis(group_tot, -1, k_sub)
        c_e = _expand_like(cond, mus.shape)
        mu_bar = tsum(c_e * mus, axis=-3)
        second = tsum(c_e * (bs * bs + mus * mus * 0.5), axis=-3)
        b_sq = second - mu_bar * mu_bar * 0.5
    b_bar = sqrt(maximum(b_sq, b_min * b_min))
    return MetaModeStats(mu_bar=mu_bar, b_bar=b_bar)


def meta_mode_stats(h: HierarchicalMixture, normalized: bool = False) -> MetaModeStats:
    """Meta-component moments for every group of the hierarchy."""
    return meta_stats_from_raw(h.weights, h.mus, h.bs, normalized=normalized)


def meta_mixture(h: HierarchicalMixture, normalized: bool = False) -> MixtureForecast:
    """The K_meta-mode mixture of meta-components with renormalized group weights."""
    stats = meta_mode_stats(h, normalized=normalized)
    meta_w = h.meta_weights()
    total = tsum(meta_w, axis=-1, keepdims=True)
    w = meta_w / repeat_axis(total, -1, h.n_meta)
    return MixtureForecast(stats.mu_bar, stats.b_bar, weights=w)


_DUMP_HEADER = ["scene_id", "meta_index", "mode_index", "weight", "t",
                "mu_x", "mu_y", "b_x", "b_y"]


def write_forecast_csv(path, scene_forecasts) -> None:
    """Dump per-scene forecasts to CSV.

    ``scene_forecasts`` is an iterable of (scene_id, forecast) where the
    forecast is an unbatched HierarchicalMixture or MixtureForecast (a
    flat mixture dumps with meta_index 0). Floats are written with
    shortest round-trip formatting so output is byte-stable.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_DUMP_HEADER)
        for scene_id, fc in scene_forecasts:
            if isinstance(fc, HierarchicalMixture):
                mus, bs, w = fc.mus.data, fc.bs.data, fc.weights.data
            else:
                mus = fc.mus.data[None]
                bs = fc.bs.data[None]
                w = fc.weights.data[None]
            if mus.ndim != 4:
                raise ShapeError(f"forecast dump needs unbatched forecasts, got mu shape {mus.shape}")
            for ks in range(mus.shape[0]):
                for kp in range(mus.shape[1]):
                    for t in range(mus.shape[2]):
                        writer.writerow([scene_id, ks, kp, repr(float(w[ks, kp])), t,
                                         repr(float(mus[ks, kp, t, 0])), repr(float(mus[ks, kp, t, 1])),
                                         repr(float(bs[ks, kp, t, 0])), repr(float(bs[ks, kp, t, 1]))])


def read_forecast_csv(path) -> dict[str, HierarchicalMixture]:
    """Inverse of write_forecast_csv; returns scene_id -> HierarchicalMixture."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _DUMP_HEADER:
            raise ContractError(f"unexpected forecast CSV header: {header}")
        for row in reader:
            rows.setdefault(row[0], []).append(row)
    out = {}
    for scene_id, scene_rows in rows.items():
        ks = max(int(r[1]) for r in scene_rows) + 1
        kp = max(int(r[2]) for r in scene_rows) + 1
        tp = max(int(r[4]) for r in scene_rows) + 1
        mus = np.zeros((ks, kp, tp, 2))
        bs = np.zeros((ks, kp, tp, 2))
        w = np.zeros((ks, kp))
        for r in scene_rows:
            i, j, t = int(r[1]), int(r[2]), int(r[4])
            w[i, j] = float(r[3])
            mus[i, j, t] = [float(r[5]), float(r[6])]
            bs[i, j, t] = [float(r[7]), float(r[8])]
        out[scene_id] = HierarchicalMixture(Tensor(mus), Tensor(bs), weights=Tensor(w))
    return out
