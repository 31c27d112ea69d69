"""Trainable forecasters that emit hierarchical Laplace mixtures.

Two models share one head convention (raw vector -> mixture): a small
fully-connected network for the low-dimensional toy task and a grouped
transformer encoder whose G groups realize G packed ensemble members in
a single network. Deep ensembles wrap M independent models behind the
same forward protocol: every model's forward returns one
HierarchicalMixture per member.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (GroupedAttention, GroupedLinear, GroupedNorm, WidthPlan,
                     resolve_width)
from .mixture import B_MIN, HierarchicalMixture
from .tensor import Tensor, relu, reshape, slice_axis, softplus

__all__ = [
    "HeadSpec",
    "split_head",
    "MLPForecaster",
    "TransformerConfig",
    "GroupedTransformerForecaster",
    "DeepEnsemble",
    "EnsembleSpec",
    "build_ensemble",
    "model_from_config",
]


@dataclass(frozen=True)
class HeadSpec:
    """Mixture layout emitted by a forecaster head.

    A flat K-mode forecast is the degenerate case n_meta=1, n_sub=K.
    """

    n_meta: int
    n_sub: int
    t_pred: int = 1

    def __post_init__(self):
        if min(self.n_meta, self.n_sub, self.t_pred) < 1:
            raise ConfigError(f"HeadSpec fields must be >= 1, got {self}")

    @property
    def n_modes(self) -> int:
        return self.n_meta * self.n_sub

    @property
    def out_dim(self) -> int:
        # per mode: t_pred * (2 means + 2 raw scales), plus one logit
        return self.n_modes * (4 * self.t_pred) + self.n_modes


def split_head(raw: Tensor, spec: HeadSpec) -> HierarchicalMixture:
    """Raw head vector (..., out_dim) -> mixture with strictly positive scales."""
    if raw.shape[-1] != spec.out_dim:
        raise ShapeError(f"head emitted {raw.shape[-1]} values, spec wants {spec.out_dim}")
    lead = raw.shape[:-1]
    mode_shape = lead + (spec.n_meta, spec.n_sub, spec.t_pred, 2)
    sz = spec.n_modes * spec.t_pred * 2
    mus = reshape(slice_axis(raw, -1, 0, sz), mode_shape)
    raw_b = reshape(slice_axis(raw, -1, sz, 2 * sz), mode_shape)
    bs = softplus(raw_b) + Tensor(B_MIN)
    logits = reshape(slice_axis(raw, -1, 2 * sz, 2 * sz + spec.n_modes),
                     lead + (spec.n_meta, spec.n_sub))
    return HierarchicalMixture(mus, bs, logits=logits)


def _seed_rng(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(ss))


class MLPForecaster:
    """Three dense layers (hidden width 50, ReLU) feeding a mixture head."""

    def __init__(self, in_dim: int, head: HeadSpec, hidden: int = 50, seed: int = 0):
        self.in_dim = in_dim
        self.head_spec = head
        self.hidden = hidden
        self.seed = seed
        rng = _seed_rng(seed)
        self.l1 = GroupedLinear(in_dim, hidden, 1, rng=rng)
        self.l2 = GroupedLinear(hidden, hidden, 1, rng=rng)
        self.l3 = GroupedLinear(hidden, head.out_dim, 1, rng=rng)

    @property
    def members(self) -> int:
        return 1

    def forward(self, x) -> list[HierarchicalMixture]:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input feature dim {x.shape[-1]} != expected {self.in_dim}")
        h = relu(self.l1(x))
        h = relu(self.l2(h))
        return [split_head(self.l3(h), self.head_spec)]

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return self.l1.parameters() + self.l2.parameters() + self.l3.parameters()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def mac_count(self, n_rows: int = 1) -> int:
        return sum(l.mac_count(n_rows) for l in (self.l1, self.l2, self.l3))

    def config_dict(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden": self.hidden,
                "seed": self.seed, "head": dataclasses.asdict(self.head_spec)}


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture of the grouped encoder.

    in_features is the per-timestep feature count fed to the embedding;
    groups is the number of packed members hosted by the network.
    """

    in_features: int
    t_obs: int
    head: HeadSpec
    base_dim: int = 32
    alpha: float = 1.0
    groups: int = 1
    heads: int = 2
    n_blocks: int = 2
    ffn_mult: int = 4

    def __post_init__(self):
        if min(self.in_features, self.t_obs, self.base_dim, self.groups,
               self.heads, self.n_blocks, self.ffn_mult) < 1:
            raise ConfigError(f"TransformerConfig fields must be >= 1: {self}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


class GroupedTransformerForecaster:
    """Encoder over observed timesteps hosting G packed members.

    The input sequence is replicated G times along the feature axis so
    every member sees the same scene; from there on every layer is
    grouped, so member g's output is a function of group-g parameters
    only. Blocks are post-norm: x <- norm(x + attn(x)), then
    x <- norm(x + ffn(x)); the last timestep's representation feeds a
    grouped head emitting one mixture per member.
    """

    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.width_plan: WidthPlan = resolve_width(cfg.base_dim, cfg.alpha, cfg.groups, cfg.heads)
        d, g = self.width_plan.dim, cfg.groups
        rng = _seed_rng(seed)
        self.embed = GroupedLinear(g * cfg.in_features, d, g, rng=rng)
        self.blocks = []
        for _ in range(cfg.n_blocks):
            self.blocks.append({
                "attn": GroupedAttention(d, g, cfg.heads, rng=rng),
                "norm1": GroupedNorm(d, g),
                "ffn1": GroupedLinear(d, cfg.ffn_mult * d, g, rng=rng),
                "ffn2": GroupedLinear(cfg.ffn_mult * d, d, g, rng=rng),
                "norm2": GroupedNorm(d, g),
            })
        self.head = GroupedLinear(d, g * cfg.head.out_dim, g, rng=rng)

    @property
    def members(self) -> int:
        return self.cfg.groups

    def forward(self, features) -> list[HierarchicalMixture]:
        x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2:] != (self.cfg.t_obs, self.cfg.in_features):
            raise ShapeError(
                f"features must be (..., {self.cfg.t_obs}, {self.cfg.in_features}), got {x.shape}")
        reps = (1,) * (x.ndim - 1) + (self.cfg.groups,)
        h = self.embed(Tensor(np.tile(x, reps)))
        for blk in self.blocks:
            h = blk["norm1"](h + blk["attn"](h, h, h))
            h = blk["norm2"](h + blk["ffn2"](relu(blk["ffn1"](h))))
        last = reshape(slice_axis(h, -2, self.cfg.t_obs - 1, self.cfg.t_obs),
                       h.shape[:-2] + (self.width_plan.dim,))
        raw = self.head(last)
        out_dim = self.cfg.head.out_dim
        return [split_head(slice_axis(raw, -1, g * out_dim, (g + 1) * out_dim), self.cfg.head)
                for g in range(self.cfg.groups)]

    __call__ = forward

    def _layers(self):
        yield self.embed
        for blk in self.blocks:
            for name in ("attn", "norm1", "ffn1", "ffn2", "norm2"):
                yield blk[name]
        yield self.head

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self._layers():
            out.extend(layer.parameters())
        return out

    def member_masks(self, g: int) -> list[np.ndarray]:
        """Boolean ownership masks aligned with parameters(): True = member g's elements."""
        if not (0 <= g < self.cfg.groups):
            raise ConfigError(f"member index {g} out of range for {self.cfg.groups} groups")
        out = []
        for layer in self._layers():
            out.extend(layer.member_masks(g))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def mac_count(self) -> int:
        """Multiply-accumulates for one scene forward pass (matmul MACs only)."""
        t = self.cfg.t_obs
        total = self.embed.mac_count(t)
        for blk in self.blocks:
            total += blk["attn"].mac_count(t)
            total += blk["ffn1"].mac_count(t) + blk["ffn2"].mac_count(t)
        return total + self.head.mac_count(1)

    def config_dict(self) -> dict:
        cfg = dataclasses.asdict(self.cfg)
        cfg["head"] = dataclasses.asdict(self.cfg.head)
        # spawned SeedSequence seeds are not serializable; the ensemble's
        # root seed (recorded by the wrapper) is what reproduces them
        seed = self.seed if isinstance(self.seed, (int, np.integer)) else -1
        return {"kind": "transformer", "seed": int(seed), "config": cfg}


class DeepEnsemble:
    """M independent models presented behind the single-model protocol."""

    def __init__(self, models: list, seed: int = 0):
        if not models:
            raise ConfigError("DeepEnsemble needs at least one model")
        self.models = models
        self.seed = seed

    @property
    def members(self) -> int:
        return sum(m.members for m in self.models)

    def forward(self, features) -> list[HierarchicalMixture]:
        out = []
        for m in self.models:
            out.extend(m.forward(features))
        return out

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        out = []
        for m in self.models:
            out.extend(m.parameters())
        return out

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.models)

    def mac_count(self) -> int:
        return sum(m.mac_count() for m in self.models)

    def config_dict(self) -> dict:
        base = self.models[0].config_dict()
        return {"kind": "deep", "seed": self.seed, "n_models": len(self.models), "member": base}


@dataclass(frozen=True)
class EnsembleSpec:
    """How to build an M-member ensemble from a base architecture.

    DEEP trains M separate networks; PACKED hosts M members as G=M
    groups of a single network whose width is scaled by alpha.
    """

    style: str = "single"
    members: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        if self.style not in ("single", "deep", "packed"):
            raise ConfigError(f"ensemble style must be single/deep/packed, got {self.style!r}")
        if self.members < 1:
            raise ConfigError(f"members must be >= 1, got {self.members}")
        if self.style == "single" and self.members != 1:
            raise ConfigError("single style requires members=1")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


def build_ensemble(spec: EnsembleSpec, base: TransformerConfig, seed: int = 0):
    """Build the model(s) for an ensemble spec from a groups=1 base config."""
    if base.groups != 1:
        raise ConfigError("base config must have groups=1; packing is applied here")
    if spec.style == "packed":
        cfg = dataclasses.replace(base, groups=spec.members, alpha=spec.alpha)
        return GroupedTransformerForecaster(cfg, seed=seed)
    cfg = dataclasses.replace(base, alpha=spec.alpha)
    children = np.random.SeedSequence(seed).spawn(spec.members)
    models = [GroupedTransformerForecaster(cfg, seed=ss) for ss in children]
    if spec.style == "single":
        return models[0]
    return DeepEnsemble(models, seed=seed)


def _head_from_dict(d: dict) -> HeadSpec:
    return HeadSpec(n_meta=int(d["n_meta"]), n_sub=int(d["n_sub"]), t_pred=int(d["t_pred"]))


def model_from_config(cfg: dict):
    """Rebuild a model skeleton from config_dict output (values come from the checkpoint)."""
    kind = cfg.get("kind")
    if kind == "mlp":
        return MLPForecaster(int(cfg["in_dim"]), _head_from_dict(cfg["head"]),
                             hidden=int(cfg["hidden"]), seed=int(cfg["seed"]))
    if kind == "transformer":
        c = dict(cfg["config"])
        c["head"] = _head_from_dict(c["head"])
        return GroupedTransformerForecaster(TransformerConfig(**c),
                                            seed=max(0, int(cfg["seed"])))
    if kind == "deep":
        member = cfg["member"]
        base = dict(member["config"])
        base["head"] = _head_from_dict(base["head"])
        spec = EnsembleSpec(style="deep", members=int(cfg["n_models"]),
                            alpha=float(base["alpha"]))
        base["alpha"] = 1.0
        base["groups"] = 1
        return build_ensemble(spec, TransformerConfig(**base), seed=int(cfg["seed"]))
    raise ConfigError(f"unknown model kind {kind!r}")
