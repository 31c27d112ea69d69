"""Displacement and likelihood metrics over mixture forecasts.

All metrics are pure numpy evaluation: forecasts are reduced to
(means, scales, weights) arrays and never touch the autodiff tape.
Mode confidence ordering is by descending weight; ties break toward the
lower mode index (and lower member index first for pooled forecasts
that carry one).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError
from .mixture import HierarchicalMixture, MixtureForecast

__all__ = [
    "forecast_arrays",
    "confidence_order",
    "made_k",
    "mfde_k",
    "nll_k",
    "MetricReport",
    "evaluate_forecasts",
    "metrics_table",
    "write_metrics_csv",
]


def forecast_arrays(forecast) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(means, scales, weights) as numpy arrays, modes on the first axis."""
    if isinstance(forecast, HierarchicalMixture):
        forecast = forecast.flatten()
    if isinstance(forecast, MixtureForecast):
        mus, bs, w = forecast.mus.data, forecast.bs.data, forecast.weights.data
    else:  # aggregated forecasts expose plain arrays
        mus, bs, w = np.asarray(forecast.trajectories), np.asarray(forecast.scales), np.asarray(forecast.weights)
    if mus.ndim != 3:
        raise ContractError(f"metrics need an unbatched forecast, got mean shape {mus.shape}")
    return mus, bs, w


def confidence_order(weights: np.ndarray) -> np.ndarray:
    """Mode indices sorted by descending weight, ties toward lower index."""
    return np.argsort(-np.asarray(weights), kind="stable")


def _top_k(forecast, k: int):
    mus, bs, w = forecast_arrays(forecast)
    if not (1 <= k <= len(w)):
        raise ContractError(f"top-k with k={k} out of range for {len(w)} modes")
    order = confidence_order(w)[:k]
    return mus[order], bs[order], w[order]


def _best_by_endpoint(y: np.ndarray, mus: np.ndarray) -> int:
    end_d = np.linalg.norm(mus[:, -1] - y[-1], axis=-1)
    return int(np.argmin(end_d))


def made_k(y, forecast, k: int) -> float:
    """Displacement averaged over steps for the best of the k most confident modes.

    Best = closest final position to the target's final position.
    """
    y = np.asarray(y, dtype=np.float64)
    mus, _, _ = _top_k(forecast, k)
    best = _best_by_endpoint(y, mus)
    return float(np.mean(np.linalg.norm(mus[best] - y, axis=-1)))


def mfde_k(y, forecast, k: int) -> float:
    """Final-position displacement for the best of the k most confident modes."""
    y = np.asarray(y, dtype=np.float64)
    mus, _, _ = _top_k(forecast, k)
    best = _best_by_endpoint(y, mus)
    return float(np.linalg.norm(mus[best, -1] - y[-1]))


def nll_k(y, forecast, k: int) -> float:
    """Mixture NLL of the k most confident modes with weights renormalized."""
    y = np.asarray(y, dtype=np.float64)
    mus, bs, w = _top_k(forecast, k)
    w = w / w.sum()
    # per-mode log density: sum over steps/coords of -log(2b) - |y - mu| / b
    ld = -np.sum(np.log(2.0 * bs) + np.abs(y - mus) / bs, axis=(-2, -1))
    s = np.log(w) + ld
    m = s.max()
    return float(-(m + np.log(np.sum(np.exp(s - m)))))


@dataclass
class MetricReport:
    """Scene-averaged metrics plus the model accounting columns."""

    made_1: float
    made_6: float
    mfde_1: float
    mfde_6: float
    nll_3: float
    nll_6: float
    n_scenes: int
    n_params: int | None = None
    macs: int | None = None

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def evaluate_forecasts(pairs, n_params: int | None = None, macs: int | None = None) -> MetricReport:
    """Mean metrics over (target, forecast) pairs.

    Forecasts with fewer than 6 modes use all modes for the k=6 columns
    (and likewise for k=3).
    """
    acc = {"made_1": [], "made_6": [], "mfde_1": [], "mfde_6": [], "nll_3": [], "nll_6": []}
    n = 0
    for y, fc in pairs:
        _, _, w = forecast_arrays(fc)
        k6, k3 = min(6, len(w)), min(3, len(w))
        acc["made_1"].append(made_k(y, fc, 1))
        acc["made_6"].append(made_k(y, fc, k6))
        acc["mfde_1"].append(mfde_k(y, fc, 1))
        acc["mfde_6"].append(mfde_k(y, fc, k6))
        acc["nll_3"].append(nll_k(y, fc, k3))
        acc["nll_6"].append(nll_k(y, fc, k6))
        n += 1
    if n == 0:
        raise ContractError("evaluate_forecasts: no scenes")
    return MetricReport(
        made_1=float(np.mean(acc["made_1"])), made_6=float(np.mean(acc["made_6"])),
        mfde_1=float(np.mean(acc["mfde_1"])), mfde_6=float(np.mean(acc["mfde_6"])),
        nll_3=float(np.mean(acc["nll_3"])), nll_6=float(np.mean(acc["nll_6"])),
        n_scenes=n, n_params=n_params, macs=macs)


_TABLE_COLS = ["mADE_1", "mADE_6", "mFDE_1", "mFDE_6", "NLL_3", "NLL_6", "#Prm", "MAC"]


def metrics_table(reports: dict[str, MetricReport]) -> str:
    """Fixed-width text table, one row per named report."""
    name_w = max(len(n) for n in reports) + 2
    header = "model".ljust(name_w) + "".join(c.rjust(10) for c in _TABLE_COLS)
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        cells = [f"{r.made_1:.4f}", f"{r.made_6:.4f}", f"{r.mfde_1:.4f}", f"{r.mfde_6:.4f}",
                 f"{r.nll_3:.3f}", f"{r.nll_6:.3f}",
                 "-" if r.n_params is None else str(r.n_params),
                 "-" if r.macs is None else f"{r.macs / 1e6:.2f}M"]
        lines.append(name.ljust(name_w) + "".join(c.rjust(10) for c in cells))
    return "\n".join(lines)


def write_metrics_csv(path, rows: list[dict], append: bool = False) -> None:
    """Write metric rows; append mode adds rows without rewriting the header."""
    keys = list(rows[0].keys())
    mode = "a" if append else "w"
    write_header = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        if write_header:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
