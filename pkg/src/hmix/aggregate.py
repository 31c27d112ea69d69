"""Combining per-member mixture forecasts into a single 6-mode forecast.

Four strategies share the same input convention (a list of unbatched
per-member forecasts for one scene) and the same output record:

* top-k pooling of the most confident modes,
* robust pooling scored by cross-member log density,
* endpoint clustering with k-means,
* compression of hierarchical forecasts to their meta modes.

Pooled modes are always ordered member-major (member 0 mode 0, member 0
mode 1, ...), so stable sorts break weight ties toward the lower member
index and then the lower mode index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .mixture import B_MIN, HierarchicalMixture, MixtureForecast, meta_mixture
from .metrics import confidence_order
from .tensor import Tensor

__all__ = [
    "AggregatedForecast",
    "pool_members",
    "topk_aggregate",
    "rip_aggregate",
    "kmeans",
    "kmeans_endpoints",
    "meta_compress",
    "aggregate",
    "similarity_matrix",
]


@dataclass
class AggregatedForecast:
    """Plain-array forecast produced by an aggregation strategy."""

    trajectories: np.ndarray  # (k, t, 2)
    scales: np.ndarray        # (k, t, 2)
    weights: np.ndarray       # (k,), simplex
    method: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.trajectories.shape != self.scales.shape or self.trajectories.ndim != 3:
            raise ContractError(
                f"aggregated forecast shapes disagree: {self.trajectories.shape} vs {self.scales.shape}")
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ContractError("aggregated weights must form a simplex")

    @property
    def n_modes(self) -> int:
        return self.trajectories.shape[0]

    def to_mixture(self) -> MixtureForecast:
        return MixtureForecast(Tensor(self.trajectories), Tensor(np.maximum(self.scales, B_MIN)),
                               weights=Tensor(self.weights))


def _flat(member) -> MixtureForecast:
    return member.flatten() if isinstance(member, HierarchicalMixture) else member


def pool_members(members) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack all member modes; weights are divided by the member count.

    Returns (mus, bs, weights, member_index, mode_index) with modes in
    member-major order.
    """
    if not members:
        raise ContractError("pool_members: empty member list")
    flats = [_flat(m) for m in members]
    t = flats[0].t_pred
    if any(f.t_pred != t or f.mus.data.ndim != 3 for f in flats):
        raise ContractError("pool_members: members must be unbatched with a common horizon")
    mus = np.concatenate([f.mus.data for f in flats], axis=0)
    bs = np.concatenate([f.bs.data for f in flats], axis=0)
    w = np.concatenate([f.weights.data for f in flats], axis=0) / len(flats)
    member_idx = np.concatenate([np.full(f.n_modes, i) for i, f in enumerate(flats)])
    mode_idx = np.concatenate([np.arange(f.n_modes) for f in flats])
    return mus, bs, w, member_idx, mode_idx


def topk_aggregate(members, k: int = 6) -> AggregatedForecast:
    """Keep the k most confident pooled modes and renormalize their weights."""
    mus, bs, w, member_idx, mode_idx = pool_members(members)
    if k > len(w):
        raise ContractError(f"topk_aggregate: k={k} exceeds {len(w)} pooled modes")
    order = confidence_order(w)[:k]
    w_top = w[order]
    return AggregatedForecast(mus[order], bs[order], w_top / w_top.sum(), "topk",
                              extras={"member_index": member_idx[order], "mode_index": mode_idx[order]})


def _member_log_density(member: MixtureForecast, trajs: np.ndarray) -> np.ndarray:
    """log mixture density of each candidate trajectory under one member."""
    mus, bs, w = member.mus.data, member.bs.data, member.weights.data
    # (n_cand, 1, t, 2) against (K, t, 2)
    ld = -np.sum(np.log(2.0 * bs) + np.abs(trajs[:, None] - mus) / bs, axis=(-2, -1))
    s = np.log(np.maximum(w, 1e-300)) + ld
    m = s.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(s - m), axis=-1, keepdims=True)))[:, 0]


def rip_aggregate(members, k: int = 6, score: str = "average") -> AggregatedForecast:
    """Keep pooled modes that all members agree are plausible.

    Each pooled mean trajectory is scored by its log density under every
    member's mixture; the mode score is the average (or the minimum, the
    more pessimistic variant) across members, and the kept modes are
    reweighted proportionally to exp(score).
    """
    if score not in ("average", "min"):
        raise ContractError(f"rip_aggregate: unknown score {score!r}")
    mus, bs, _, member_idx, mode_idx = pool_members(members)
    flats = [_flat(m) for m in members]
    per_member = np.stack([_member_log_density(f, mus) for f in flats], axis=0)  # (M, n_cand)
    scores = per_member.mean(axis=0) if score == "average" else per_member.min(axis=0)
    if k > len(scores):
        raise ContractError(f"rip_aggregate: k={k} exceeds {len(scores)} pooled modes")
    order = np.argsort(-scores, kind="stable")[:k]
    kept = scores[order]
    w = np.exp(kept - kept.max())
    return AggregatedForecast(mus[order], bs[order], w / w.sum(), f"rip_{score}",
                              extras={"scores": kept, "member_index": member_idx[order],
                                      "mode_index": mode_idx[order]})


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's iteration with distance-squared seeding.

    Returns (centroids, labels, objective trace). The trace records the
    sum of squared distances after each assignment step and is
    non-increasing. A cluster that loses all points keeps its previous
    centroid. Assignment ties go to the lower cluster index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not (1 <= k <= n):
        raise ContractError(f"kmeans: k={k} out of range for {n} points")
    # seeding: first centre uniform, then proportional to squared distance
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with a centre
            centroids[j:] = centroids[0]
            break
        probs = np.cumsum(d2 / total)
        centroids[j] = points[int(np.searchsorted(probs, rng.random(), side="right").clip(0, n - 1))]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=int)
    trace: list[float] = []
    for _ in range(max_iter):
        dist = np.sum((points[:, None] - centroids[None]) ** 2, axis=-1)
        new_labels = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(n), new_labels].sum()))
        if trace and len(trace) > 1 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
            # empty cluster: centroid stays where it was
    return centroids, labels, trace


def kmeans_endpoints(members, k: int = 6, rng: np.random.Generator | None = None,
                     max_iter: int = 100) -> AggregatedForecast:
    """Cluster pooled mode endpoints and merge each cluster into one mode.

    Cluster trajectories and scales are weight-weighted means of the
    cluster's modes; the cluster weight is the summed pooled weight. If
    fewer than k clusters end up non-empty, the heaviest output mode is
    split into two half-weight copies until k modes exist.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    mus, bs, w, _, _ = pool_members(members)
    k_eff = min(k, len(w))
    _, labels, trace = kmeans(mus[:, -1, :], k_eff, rng, max_iter=max_iter)

    trajs, scales, weights = [], [], []
    for j in range(k_eff):
        mask = labels == j
        if not mask.any():
            continue
        wj = w[mask]
        total = wj.sum()
        share = wj / total if total > 0 else np.full(mask.sum(), 1.0 / mask.sum())
        trajs.append(np.tensordot(share, mus[mask], axes=1))
        scales.append(np.tensordot(share, bs[mask], axes=1))
        weights.append(total if total > 0 else 0.0)
    trajs, scales = list(trajs), list(scales)
    weights = list(np.asarray(weights) / np.sum(weights))
    while len(trajs) < k:  # split the heaviest mode into two half-weight copies
        i = int(np.argmax(weights))
        weights[i] = weights[i] / 2.0
        trajs.append(trajs[i].copy())
        scales.append(scales[i].copy())
        weights.append(weights[i])
    order = confidence_order(np.asarray(weights))
    return AggregatedForecast(np.stack(trajs)[order], np.stack(scales)[order],
                              np.asarray(weights)[order], "kmeans",
                              extras={"objective_trace": trace})


def meta_compress(members, k: int = 6, normalized: bool = False) -> AggregatedForecast:
    """Pool the members' meta modes and keep the k most confident."""
    metas = []
    for m in members:
        if not isinstance(m, HierarchicalMixture):
            raise ContractError("meta_compress needs hierarchical forecasts")
        metas.append(meta_mixture(m, normalized=normalized))
    mus = np.concatenate([f.mus.data for f in metas], axis=0)
    bs = np.concatenate([f.bs.data for f in metas], axis=0)
    w = np.concatenate([f.weights.data for f in metas], axis=0) / len(metas)
    trajs, scales, weights = list(mus), list(bs), list(w)
    while len(trajs) < k:
        i = int(np.argmax(weights))
        weights[i] = weights[i] / 2.0
        trajs.append(trajs[i].copy())
        scales.append(scales[i].copy())
        weights.append(weights[i])
    mus, bs, w = np.stack(trajs), np.stack(scales), np.asarray(weights)
    order = confidence_order(w)[:k]
    w_top = w[order]
    return AggregatedForecast(mus[order], bs[order], w_top / w_top.sum(), "meta")


_METHODS = ("topk", "rip", "rip_min", "kmeans", "meta")


def aggregate(members, method: str, k: int = 6,
              rng: np.random.Generator | None = None) -> AggregatedForecast:
    """Dispatch by method name; see the strategy functions for semantics."""
    if method == "topk":
        return topk_aggregate(members, k)
    if method == "rip":
        return rip_aggregate(members, k, score="average")
    if method == "rip_min":
        return rip_aggregate(members, k, score="min")
    if method == "kmeans":
        return kmeans_endpoints(members, k, rng=rng)
    if method == "meta":
        return meta_compress(members, k)
    raise ContractError(f"unknown aggregation method {method!r}, expected one of {_METHODS}")


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        mask = q > 0.0
        out[mask] -= q[mask] * np.log2(q[mask])
    return out


def similarity_matrix(scene_members, k: int = 6,
                      seed: int = 0) -> tuple[np.ndarray, float]:
    """Co-membership rates of pooled modes under per-scene endpoint clustering.

    ``scene_members`` is a list over scenes, each entry the per-member
    forecast list for that scene. Entry (i, j) of the returned matrix is
    the fraction of scenes where pooled modes i and j (member-major
    indexing) land in the same endpoint cluster. The score is the mean
    binary entropy of the off-diagonal entries: low entropy means the
    members agree on a stable mode structure.
    """
    if not scene_members:
        raise ContractError("similarity_matrix: no scenes")
    streams = np.random.SeedSequence(seed).spawn(len(scene_members))
    mat = None
    for scene, ss in zip(scene_members, streams):
        mus, _, _, _, _ = pool_members(scene)
        n = len(mus)
        if mat is None:
            mat = np.zeros((n, n))
        elif mat.shape[0] != n:
            raise ContractError("similarity_matrix: pooled mode count varies across scenes")
        _, labels, _ = kmeans(mus[:, -1, :], min(k, n), np.random.Generator(np.random.PCG64(ss)))
        mat += (labels[:, None] == labels[None, :]).astype(np.float64)
    mat /= len(scene_members)
    off = ~np.eye(len(mat), dtype=bool)
    return mat, float(_binary_entropy(mat[off]).mean())
