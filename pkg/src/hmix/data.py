"""Datasets: the drifting-quadrant toy distribution, a synthetic
intersection scene generator, and the scene CSV format.

All randomness flows through numpy Generators over the PCG64 bit
generator so every dataset is reproducible across platforms from its
recorded seed. Draw order within a sample is fixed and documented next
to each generator.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ParseError

__all__ = [
    "ToySample",
    "toy_sample",
    "toy_dataset",
    "toy_arrays",
    "write_toy_csv",
    "load_toy_csv",
    "TrajectoryScene",
    "IntersectionConfig",
    "synth_intersection",
    "write_scene_csv",
    "load_csv_scenes",
    "SceneNormalization",
    "normalize",
    "scene_features",
    "features_and_targets",
    "write_manifest",
    "read_manifest",
]

log = logging.getLogger("hmix")

GENERATOR_VERSION = 1

# half-open quadrant boxes in sampling order; the drift parameter t
# moves probability mass from the main diagonal (q0, q3) to the
# anti-diagonal (q1, q2)
_QUADRANTS = np.array([
    [[-1.0, 0.0], [-1.0, 0.0]],  # x in [-1,0), y in [-1,0)
    [[-1.0, 0.0], [0.0, 1.0]],
    [[0.0, 1.0], [-1.0, 0.0]],
    [[0.0, 1.0], [0.0, 1.0]],
])


@dataclass(frozen=True)
class ToySample:
    t: float
    point: tuple[float, float]


def _quadrant_probs(t: float) -> np.ndarray:
    return np.array([(1.0 - t) / 2.0, t / 2.0, t / 2.0, (1.0 - t) / 2.0])


def toy_sample(t: float, rng: np.random.Generator) -> ToySample:
    """One point from the drifting four-quadrant distribution.

    Draw order: quadrant (inverse CDF in index order), then x, then y,
    each uniform half-open within the chosen box.
    """
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"toy_sample: t must be in [0, 1], got {t}")
    cdf = np.cumsum(_quadrant_probs(t))
    q = int(np.searchsorted(cdf, rng.random(), side="right").clip(0, 3))
    (x_lo, x_hi), (y_lo, y_hi) = _QUADRANTS[q]
    x = rng.uniform(x_lo, x_hi)
    y = rng.uniform(y_lo, y_hi)
    return ToySample(t=float(t), point=(float(x), float(y)))


def toy_dataset(n: int, rng: np.random.Generator) -> list[ToySample]:
    """n samples with t ~ Uniform[0,1); per sample: t first, then the point."""
    out = []
    for _ in range(n):
        t = rng.random()
        out.append(toy_sample(t, rng))
    return out


def toy_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """(inputs (n, 1), targets (n, 1, 2)) ready for a t_pred=1 forecaster."""
    x = np.array([[s.t] for s in samples], dtype=np.float64)
    y = np.array([[list(s.point)] for s in samples], dtype=np.float64)
    return x, y


def write_toy_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y"])
        for s in samples:
            w.writerow([repr(s.t), repr(s.point[0]), repr(s.point[1])])


def load_toy_csv(path) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "x", "y"]:
            raise ParseError(f"{path}: line 1: expected header t,x,y, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                t, x, y = (float(v) for v in row)
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            xs.append([t])
            ys.append([[x, y]])
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)


# -- trajectory scenes -------------------------------------------------------

@dataclass
class TrajectoryScene:
    """One forecasting scene: A agents over t_obs past and t_pred future steps.

    Positions are meters; valid masks mark observed (agent, timestep)
    cells. The focal agent must be fully observed on both segments.
    """

    scene_id: str
    past: np.ndarray          # (A, t_obs, 2)
    future: np.ndarray        # (A, t_pred, 2)
    focal_index: int
    valid_past: np.ndarray    # (A, t_obs) bool
    valid_future: np.ndarray  # (A, t_pred) bool

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        self.valid_past = np.asarray(self.valid_past, dtype=bool)
        self.valid_future = np.asarray(self.valid_future, dtype=bool)
        if self.past.ndim != 3 or self.future.ndim != 3:
            raise ContractError(f"scene {self.scene_id}: past/future must be (A, T, 2)")
        if self.past.shape[1] < 1 or self.future.shape[1] < 1:
            raise ContractError(f"scene {self.scene_id}: needs t_obs >= 1 and t_pred >= 1")
        if not (0 <= self.focal_index < self.past.shape[0]):
            raise ContractError(f"scene {self.scene_id}: focal index {self.focal_index} out of range")
        if not (self.valid_past[self.focal_index].all() and self.valid_future[self.focal_index].all()):
            raise ContractError(f"scene {self.scene_id}: focal agent must be fully observed")
        observed = np.concatenate([
            self.past[self.valid_past], self.future[self.valid_future]])
        if not np.isfinite(observed).all():
            raise ContractError(f"scene {self.scene_id}: observed coordinates must be finite")

    @property
    def n_agents(self) -> int:
        return self.past.shape[0]

    @property
    def t_obs(self) -> int:
        return self.past.shape[1]

    @property
    def t_pred(self) -> int:
        return self.future.shape[1]


@dataclass(frozen=True)
class IntersectionConfig:
    """Synthetic four-way intersection scenes.

    The focal agent drives toward the junction at a constant speed and
    then continues straight or turns along a constant-curvature quarter
    arc; neighbors follow independent straight lines. Gaussian noise is
    added to every waypoint after the exact geometry is laid out.
    """

    t_obs: int = 10
    t_pred: int = 12
    dt: float = 0.4
    speed_range: tuple[float, float] = (4.0, 9.0)
    branch_probs: tuple[float, float, float] = (0.5, 0.25, 0.25)  # straight, left, right
    noise_std: float = 0.05
    n_neighbors: int = 5
    neighbor_box: float = 25.0

    def __post_init__(self):
        if self.t_obs < 2 or self.t_pred < 1:
            raise ConfigError(f"need t_obs >= 2 and t_pred >= 1, got {self.t_obs}/{self.t_pred}")
        probs = np.asarray(self.branch_probs, dtype=np.float64)
        if probs.shape != (3,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"branch_probs must be a 3-way simplex, got {self.branch_probs}")
        if self.speed_range[0] <= 0 or self.speed_range[1] < self.speed_range[0]:
            raise ConfigError(f"bad speed_range {self.speed_range}")
        if self.dt <= 0 or self.noise_std < 0 or self.n_neighbors < 0:
            raise ConfigError("dt must be positive, noise_std and n_neighbors non-negative")


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _focal_track(cfg: IntersectionConfig, branch: int, speed: float,
                 approach: float) -> np.ndarray:
    """Noise-free waypoints (t_obs + t_pred, 2); junction center at the origin.

    The agent reaches the origin exactly at the last observed step, so
    the branch decision is entirely in the future segment.
    """
    step = speed * cfg.dt
    n_total = cfg.t_obs + cfg.t_pred
    heading = np.array([np.cos(approach), np.sin(approach)])
    pts = np.empty((n_total, 2))
    for i in range(cfg.t_obs):
        pts[i] = heading * step * (i - (cfg.t_obs - 1))
    if branch == 0:  # straight
        for j in range(1, cfg.t_pred + 1):
            pts[cfg.t_obs - 1 + j] = heading * step * j
    else:
        # quarter turn spread evenly over the future steps
        sign = 1.0 if branch == 1 else -1.0
        delta = sign * (np.pi / 2.0) / cfg.t_pred
        pos = pts[cfg.t_obs - 1].copy()
        ang = approach
        for j in range(cfg.t_pred):
            ang += delta
            pos = pos + np.array([np.cos(ang), np.sin(ang)]) * step
            pts[cfg.t_obs + j] = pos
    return pts


def synth_intersection(n_scenes: int, rng: np.random.Generator,
                       config: IntersectionConfig | None = None) -> list[TrajectoryScene]:
    """Generate scenes; per scene the draw order is branch, speed, approach
    angle, neighbor states, then one noise block for all waypoints."""
    cfg = config if config is not None else IntersectionConfig()
    probs = np.cumsum(np.asarray(cfg.branch_probs))
    scenes = []
    n_total = cfg.t_obs + cfg.t_pred
    for s in range(n_scenes):
        branch = int(np.searchsorted(probs, rng.random(), side="right").clip(0, 2))
        speed = rng.uniform(*cfg.speed_range)
        approach = rng.uniform(0.0, 2.0 * np.pi)
        tracks = [_focal_track(cfg, branch, speed, approach)]
        for _ in range(cfg.n_neighbors):
            start = rng.uniform(-cfg.neighbor_box, cfg.neighbor_box, size=2)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            nb_speed = rng.uniform(*cfg.speed_range)
            direction = np.array([np.cos(heading), np.sin(heading)])
            steps = np.arange(n_total)[:, None] * nb_speed * cfg.dt
            tracks.append(start + direction * steps)
        pts = np.stack(tracks)  # (A, n_total, 2)
        if cfg.noise_std > 0:
            pts = pts + rng.normal(0.0, cfg.noise_std, size=pts.shape)
        n_agents = 1 + cfg.n_neighbors
        scenes.append(TrajectoryScene(
            scene_id=f"scene{s:05d}",
            past=pts[:, :cfg.t_obs], future=pts[:, cfg.t_obs:],
            focal_index=0,
            valid_past=np.ones((n_agents, cfg.t_obs), dtype=bool),
            valid_future=np.ones((n_agents, cfg.t_pred), dtype=bool)))
    return scenes


SCENE_CSV_HEADER = ["scene_id", "agent_id", "is_focal", "timestep", "x", "y"]


def write_scene_csv(path, scenes) -> None:
    """One row per observed (agent, timestep); timesteps 0..T-1 span past+future."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCENE_CSV_HEADER)
        for scene in scenes:
            pts = np.concatenate([scene.past, scene.future], axis=1)
            valid = np.concatenate([scene.valid_past, scene.valid_future], axis=1)
            for a in range(scene.n_agents):
                for ts in range(pts.shape[1]):
                    if not valid[a, ts]:
                        continue
                    w.writerow([scene.scene_id, a, int(a == scene.focal_index), ts,
                                repr(float(pts[a, ts, 0])), repr(float(pts[a, ts, 1]))])


def load_csv_scenes(path, t_obs: int) -> list[TrajectoryScene]:
    """Parse the scene CSV; rows after index t_obs-1 form the future segment.

    Malformed rows raise a parse error naming the line; a scene whose
    focal track is absent or has gaps is skipped with a warning.
    """
    if t_obs < 1:
        raise ConfigError(f"t_obs must be >= 1, got {t_obs}")
    # scene -> agent -> {timestep: (x, y)}, plus the focal flags seen
    tracks: dict[str, dict[str, dict[int, tuple[float, float]]]] = {}
    focal_flags: dict[str, dict[str, bool]] = {}
    order: list[str] = []
    max_ts: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCENE_CSV_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(SCENE_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ParseError(f"{path}: line {lineno}: expected 6 fields, got {len(row)}")
            sid, aid, focal_s, ts_s, x_s, y_s = row
            try:
                focal = int(focal_s)
                ts = int(ts_s)
                x, y = float(x_s), float(y_s)
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            if focal not in (0, 1) or ts < 0:
                raise ParseError(f"{path}: line {lineno}: bad is_focal/timestep {focal_s},{ts_s}")
            if sid not in tracks:
                tracks[sid] = {}
                focal_flags[sid] = {}
                max_ts[sid] = 0
                order.append(sid)
            tracks[sid].setdefault(aid, {})[ts] = (x, y)
            prev = focal_flags[sid].setdefault(aid, bool(focal))
            if prev != bool(focal):
                raise ParseError(f"{path}: line {lineno}: agent {aid} changes is_focal")
            max_ts[sid] = max(max_ts[sid], ts)

    scenes = []
    for sid in order:
        t_total = max_ts[sid] + 1
        if t_total <= t_obs:
            log.warning("scene %s: only %d timesteps for t_obs=%d; skipped", sid, t_total, t_obs)
            continue
        t_pred = t_total - t_obs
        agent_ids = list(tracks[sid].keys())  # file order
        focal_ids = [a for a in agent_ids if focal_flags[sid][a]]
        if len(focal_ids) != 1:
            log.warning("scene %s: %d focal tracks; skipped", sid, len(focal_ids))
            continue
        n = len(agent_ids)
        past = np.zeros((n, t_obs, 2))
        future = np.zeros((n, t_pred, 2))
        vp = np.zeros((n, t_obs), dtype=bool)
        vf = np.zeros((n, t_pred), dtype=bool)
        for i, aid in enumerate(agent_ids):
            for ts, (xx, yy) in tracks[sid][aid].items():
                if ts < t_obs:
                    past[i, ts] = (xx, yy)
                    vp[i, ts] = True
                elif ts < t_total:
                    future[i, ts - t_obs] = (xx, yy)
                    vf[i, ts - t_obs] = True
        fi = agent_ids.index(focal_ids[0])
        if not (vp[fi].all() and vf[fi].all()):
            log.warning("scene %s: focal track has gaps; skipped", sid)
            continue
        scenes.append(TrajectoryScene(scene_id=sid, past=past, future=future,
                                      focal_index=fi, valid_past=vp, valid_future=vf))
    return scenes


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class SceneNormalization:
    """Rigid transform into the focal frame: translate then rotate by -angle."""

    translation: tuple[float, float]
    angle: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        rot = _rotation(-self.angle)
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.translation)) @ rot.T

    def invert(self, points: np.ndarray) -> np.ndarray:
        rot = _rotation(self.angle)
        return np.asarray(points, dtype=np.float64) @ rot.T + np.asarray(self.translation)


def _focal_heading(past_focal: np.ndarray) -> float:
    """Heading of the last observed displacement; falls back to the most
    recent nonzero displacement, else 0 (identity rotation)."""
    for i in range(past_focal.shape[0] - 1, 0, -1):
        d = past_focal[i] - past_focal[i - 1]
        if np.linalg.norm(d) > 0.0:
            return float(np.arctan2(d[1], d[0]))
    return 0.0


def normalize(scene: TrajectoryScene, max_agents: int = 6) -> tuple[TrajectoryScene, SceneNormalization]:
    """Center and rotate the scene on the focal agent's last observed state.

    After the transform the focal agent sits at the origin heading +x.
    At most max_agents agents are retained (focal always first), chosen
    and ordered by distance to the origin at the last observed step;
    agents unobserved at that step sort last.
    """
    focal_past = scene.past[scene.focal_index]
    trans = tuple(float(v) for v in focal_past[-1])
    norm = SceneNormalization(translation=trans, angle=_focal_heading(focal_past))

    past = norm.apply(scene.past.reshape(-1, 2)).reshape(scene.past.shape)
    future = norm.apply(scene.future.reshape(-1, 2)).reshape(scene.future.shape)

    last = past[:, -1, :]
    dist = np.linalg.norm(last, axis=-1)
    dist = np.where(scene.valid_past[:, -1], dist, np.inf)
    dist[scene.focal_index] = -1.0  # focal first regardless of ties
    keep = np.argsort(dist, kind="stable")[:max_agents]

    out = TrajectoryScene(
        scene_id=scene.scene_id,
        past=past[keep], future=future[keep],
        focal_index=0,
        valid_past=scene.valid_past[keep], valid_future=scene.valid_future[keep])
    return out, norm


# -- model features ----------------------------------------------------------

def feature_dim(n_neighbors: int) -> int:
    return 5 + 3 * n_neighbors


def scene_features(scene: TrajectoryScene, n_neighbors: int = 5) -> np.ndarray:
    """Per-timestep features (t_obs, 5 + 3*n_neighbors) in the focal frame.

    Layout: focal position (2), focal displacement since the previous
    step (2), time fraction (1), then per neighbor slot its relative
    position (2) and a validity flag (1); absent slots are zero. The
    scene must already be normalized (focal first).
    """
    t_obs = scene.t_obs
    feats = np.zeros((t_obs, feature_dim(n_neighbors)))
    focal = scene.past[scene.focal_index]
    feats[:, 0:2] = focal
    feats[1:, 2:4] = focal[1:] - focal[:-1]
    feats[:, 4] = np.arange(t_obs) / max(t_obs - 1, 1)
    others = [a for a in range(scene.n_agents) if a != scene.focal_index]
    for slot, a in enumerate(others[:n_neighbors]):
        base = 5 + 3 * slot
        valid = scene.valid_past[a]
        feats[valid, base:base + 2] = (scene.past[a] - focal)[valid]
        feats[:, base + 2] = valid.astype(np.float64)
    return feats


def features_and_targets(scenes, n_neighbors: int = 5,
                         max_agents: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Normalize every scene and stack (features, focal future) arrays."""
    if not scenes:
        raise ContractError("features_and_targets: no scenes")
    xs, ys = [], []
    for scene in scenes:
        ns, _ = normalize(scene, max_agents=max_agents)
        xs.append(scene_features(ns, n_neighbors))
        ys.append(ns.future[ns.focal_index])
    return np.stack(xs), np.stack(ys)


# -- manifests ---------------------------------------------------------------

def write_manifest(path, payload: dict) -> None:
    record = {"generator_version": GENERATOR_VERSION, **payload}
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
