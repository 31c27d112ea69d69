"""Optimization loop: Adam, milestone lr decay, clipping, logs, checkpoints.

The loop is deterministic given its seed: shuffling, member seeding and
every floating-point reduction are fixed, and log floats are written
with repr() so two runs with the same seed produce byte-identical CSV
logs. Training logs are append-only so long sweeps can be tailed and
resumed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DomainError, TrainingAborted
from .losses import LossConfig, compute_loss, ewta_schedule, posterior_snapshot
from .models import model_from_config
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "Adam",
    "clip_global_norm",
    "TrainResult",
    "train",
    "train_deep",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = 1

LOG_COLUMNS = ["epoch", "total", "meta_term", "mwta_term", "kl_meta", "kl_mwta",
               "n_ewta", "lr", "val_made_1", "clipped"]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 7.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0
    # "batch": assignment snapshot from the current batch before the step
    # (the consistency terms then vanish exactly at the evaluation point);
    # "lagged": snapshot under the previous step's parameters, which keeps
    # them active as a proximal pull between consecutive steps.
    kl_snapshot: str = "batch"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size must be >= 1, got {self.epochs}/{self.batch_size}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("invalid Adam hyperparameters")
        if not (0 < self.lr_decay <= 1):
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.kl_snapshot not in ("batch", "lagged"):
            raise ConfigError(f"kl_snapshot must be batch/lagged, got {self.kl_snapshot!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** bisect_right(sorted(self.lr_milestones), epoch)


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @staticmethod
    def zeros(shapes) -> "AdamState":
        return AdamState(step=0, m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes])


def adam_step(values, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure, returns new arrays."""
    if len(values) != len(grads) or len(values) != len(state.m):
        raise ContractError("adam_step: mismatched parameter/gradient/state lengths")
    t = state.step + 1
    new_m, new_v, new_values = [], [], []
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for val, g, m, v in zip(values, grads, state.m, state.v):
        if g.shape != val.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} != param shape {val.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_values.append(val - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_values, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """In-place wrapper around adam_step for a fixed parameter list."""

    def __init__(self, params, cfg: TrainConfig, state: AdamState | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.state = state if state is not None else AdamState.zeros([p.shape for p in self.params])

    def step(self, grads, lr: float) -> None:
        values = [p.data for p in self.params]
        new_values, self.state = adam_step(values, grads, self.state, lr,
                                           self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        for p, nv in zip(self.params, new_values):
            p.data = nv


def clip_global_norm(grads, max_norm: float) -> tuple[list[np.ndarray], float, bool]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    sq = 0.0
    for g in grads:
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if norm > max_norm > 0:
        scale = max_norm / norm
        return [g * scale for g in grads], norm, True
    return list(grads), norm, False


@dataclass
class TrainResult:
    rows: list[dict]
    best_epoch: int
    best_val: float
    best_path: str | None = None
    final_path: str | None = None
    log_path: str | None = None


def _pool_top1_displacement(members, y: np.ndarray) -> float:
    """Mean per-step displacement of the pooled most-confident mode."""
    weights = np.concatenate([h.flatten().weights.data for h in members], axis=-1)
    mus = np.concatenate([h.flatten().mus.data for h in members], axis=-3)
    best = np.argmax(weights, axis=-1)
    sel = np.take_along_axis(mus, best[..., None, None, None], axis=-3)[..., 0, :, :]
    return float(np.mean(np.linalg.norm(sel - y, axis=-1)))


def validation_made1(model, x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    vals, counts = [], []
    for lo in range(0, len(x), chunk):
        xb, yb = x[lo:lo + chunk], y[lo:lo + chunk]
        vals.append(_pool_top1_displacement(model.forward(xb), yb))
        counts.append(len(xb))
    return float(np.average(vals, weights=counts))


def _n_assigned(loss_cfg: LossConfig, head_modes: int, head_sub: int, epoch: int) -> int:
    """Value for the n_ewta log column: modes receiving assignment weight."""
    if loss_cfg.kind == "ewta":
        return min(ewta_schedule(epoch, loss_cfg.ewta_milestones, loss_cfg.ewta_n_init), head_modes)
    if loss_cfg.kind == "wta":
        return 1
    if loss_cfg.kind == "eps_wta":
        return head_modes
    return head_sub  # hwta trains the winning group's sub-modes


def _append_log(path: str, row: dict) -> None:
    empty = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if empty:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _abort_dump(out_dir, xb, yb, epoch, step, reason) -> str | None:
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"abort_epoch{epoch}_step{step}.npz")
    np.savez(path, x=xb, y=yb, epoch=np.array(epoch), step=np.array(step),
             reason=np.array(str(reason)))
    return path


def _member_snapshots(model, params, lagged_values, xb, yb):
    """Posterior snapshots under the lagged parameter values (restores params)."""
    current = [p.data for p in params]
    for p, lv in zip(params, lagged_values):
        p.data = lv
    try:
        return [posterior_snapshot(yb, h) for h in model.forward(xb)]
    finally:
        for p, cv in zip(params, current):
            p.data = cv


def train(model, train_data, val_data, loss_cfg: LossConfig, tcfg: TrainConfig,
          out_dir: str | None = None, log_name: str = "train_log.csv",
          checkpoint_prefix: str = "model", run_config: dict | None = None) -> TrainResult:
    """Optimize one model (single or packed); returns the per-epoch log rows.

    Packed models average the per-member losses. The best checkpoint is
    the epoch with the lowest validation top-1 displacement.
    """
    x, y = np.asarray(train_data[0], dtype=np.float64), np.asarray(train_data[1], dtype=np.float64)
    xv, yv = np.asarray(val_data[0], dtype=np.float64), np.asarray(val_data[1], dtype=np.float64)
    if len(x) != len(y) or len(xv) != len(yv):
        raise ContractError("train: inputs and targets must have matching lengths")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, log_name) if out_dir is not None else None

    params = model.parameters()
    opt = Adam(params, tcfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(tcfg.seed)))
    want_kl = loss_cfg.kind == "hwta" and loss_cfg.use_kl_terms
    lagged = [p.data.copy() for p in params] if (want_kl and tcfg.kl_snapshot == "lagged") else None

    rows: list[dict] = []
    best_val, best_epoch = np.inf, -1
    best_path = os.path.join(out_dir, f"{checkpoint_prefix}_best.npz") if out_dir else None
    final_path = os.path.join(out_dir, f"{checkpoint_prefix}_final.npz") if out_dir else None

    n = len(x)
    head_modes = head_sub = None
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        perm = rng.permutation(n)
        sums = {"total": 0.0, "meta_term": 0.0, "mwta_term": 0.0, "kl_meta": 0.0, "kl_mwta": 0.0}
        clipped_batches = 0
        for step, lo in enumerate(range(0, n, tcfg.batch_size)):
            idx = perm[lo:lo + tcfg.batch_size]
            xb, yb = x[idx], y[idx]
            try:
                snapshots = None
                if want_kl and lagged is not None:
                    snapshots = _member_snapshots(model, params, lagged, xb, yb)
                    lagged = [p.data.copy() for p in params]
                with Tape() as tape:
                    members = model.forward(xb)
                    if head_modes is None:
                        head_modes = members[0].n_meta * members[0].n_sub
                        head_sub = members[0].n_sub
                    reports = []
                    for i, h in enumerate(members):
                        prev = None
                        if want_kl:
                            prev = snapshots[i] if snapshots is not None else posterior_snapshot(yb, h)
                        reports.append(compute_loss(yb, h, loss_cfg, epoch,
                                                    previous_responsibilities=prev))
                    total = reports[0].total
                    for r in reports[1:]:
                        total = total + r.total
                    if len(reports) > 1:
                        total = total * (1.0 / len(reports))
                    if not np.isfinite(total.data):
                        raise DomainError("non-finite loss")
                    tape.backward(total, params=params)
            except DomainError as e:
                dump = _abort_dump(out_dir, xb, yb, epoch, step, e)
                err = TrainingAborted(
                    f"non-finite values at epoch {epoch} step {step}: {e}")
                err.dump_path = dump
                raise err from e
            grads = [p.adjoint for p in params]
            grads, _, was_clipped = clip_global_norm(grads, tcfg.clip_norm)
            clipped_batches += int(was_clipped)
            opt.step(grads, lr)
            scale = len(idx) / n
            for key, val in zip(sums, _mean_report_terms(reports)):
                sums[key] += val * scale

        val_made1 = validation_made1(model, xv, yv)
        row = {"epoch": epoch, **{k: float(v) for k, v in sums.items()},
               "n_ewta": _n_assigned(loss_cfg, head_modes, head_sub, epoch),
               "lr": lr, "val_made_1": val_made1, "clipped": clipped_batches}
        rows.append(row)
        if log_path is not None:
            _append_log(log_path, row)
        if val_made1 < best_val:
            best_val, best_epoch = val_made1, epoch
            if best_path is not None:
                save_checkpoint(best_path, model, opt.state, tcfg.seed, run_config)
    if final_path is not None:
        save_checkpoint(final_path, model, opt.state, tcfg.seed, run_config)
    return TrainResult(rows=rows, best_epoch=best_epoch, best_val=float(best_val),
                       best_path=best_path if out_dir else None,
                       final_path=final_path, log_path=log_path)


def _mean_report_terms(reports) -> tuple[float, float, float, float, float]:
    ts = [r.term_values() for r in reports]
    keys = ("total", "meta_term", "mwta_term", "kl_meta", "kl_mwta")
    return tuple(float(np.mean([t[k] for t in ts])) for k in keys)


def train_deep(ensemble, train_data, val_data, loss_cfg: LossConfig, tcfg: TrainConfig,
               out_dir: str | None = None, run_config: dict | None = None) -> list[TrainResult]:
    """Train each ensemble member independently with spawned seeds.

    After training, every member is restored to its best-epoch
    parameters and one combined ensemble checkpoint is written.
    """
    results = []
    seeds = np.random.SeedSequence(tcfg.seed).generate_state(len(ensemble.models))
    for i, member in enumerate(ensemble.models):
        member_cfg = _replace_seed(tcfg, int(seeds[i]))
        res = train(member, train_data, val_data, loss_cfg, member_cfg, out_dir=out_dir,
                    log_name=f"train_log_m{i}.csv", checkpoint_prefix=f"member{i}",
                    run_config=run_config)
        if res.best_path is not None:
            best_model, _ = load_checkpoint(res.best_path)
            for p, q in zip(member.parameters(), best_model.parameters()):
                p.data = q.data
        results.append(res)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "model_final.npz"), ensemble, None,
                        tcfg.seed, run_config)
    return results


def _replace_seed(tcfg: TrainConfig, seed: int) -> TrainConfig:
    import dataclasses
    return dataclasses.replace(tcfg, seed=seed)


# -- checkpoint container ---------------------------------------------------

def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path: str, model, opt_state: AdamState | None, seed: int,
                    run_config: dict | None = None) -> str:
    """Versioned npz container: config JSON + hash, parameters, optimizer state."""
    cfg = {"format_version": CHECKPOINT_FORMAT, "model": model.config_dict(),
           "run": run_config or {}, "seed": int(seed)}
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    arrays: dict[str, np.ndarray] = {
        "meta": np.array(blob),
        "hash": np.array(hashlib.sha256(blob.encode("utf-8")).hexdigest()),
    }
    for i, p in enumerate(model.parameters()):
        arrays[f"param_{i:04d}"] = p.data
    if opt_state is not None:
        arrays["adam_step"] = np.array(opt_state.step)
        for i, (m, v) in enumerate(zip(opt_state.m, opt_state.v)):
            arrays[f"adam_m_{i:04d}"] = m
            arrays[f"adam_v_{i:04d}"] = v
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str):
    """Rebuild the model and restore parameters; returns (model, meta dict).

    The stored config hash is verified against the stored config; a
    mismatch means the container was corrupted or edited.
    """
    with np.load(path, allow_pickle=False) as z:
        blob = str(z["meta"][()])
        stored_hash = str(z["hash"][()])
        if hashlib.sha256(blob.encode("utf-8")).hexdigest() != stored_hash:
            raise ConfigError(f"checkpoint {path}: config hash mismatch")
        cfg = json.loads(blob)
        if cfg.get("format_version") != CHECKPOINT_FORMAT:
            raise ConfigError(
                f"checkpoint {path}: unsupported format version {cfg.get('format_version')}")
        model = model_from_config(cfg["model"])
        params = model.parameters()
        for i, p in enumerate(params):
            key = f"param_{i:04d}"
            if key not in z:
                raise ContractError(f"checkpoint {path}: missing array {key}")
            arr = np.asarray(z[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(
                    f"checkpoint {path}: {key} shape {arr.shape} != model shape {p.shape}")
            p.data = arr
        adam = None
        if "adam_step" in z:
            adam = AdamState(step=int(z["adam_step"][()]),
                             m=[np.asarray(z[f"adam_m_{i:04d}"]) for i in range(len(params))],
                             v=[np.asarray(z[f"adam_v_{i:04d}"]) for i in range(len(params))])
    return model, {"config": cfg, "hash": stored_hash, "adam": adam}
