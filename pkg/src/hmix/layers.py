"""Grouped (block-diagonal) network layers.

A grouped layer with G groups is G independent sub-layers stacked on
the feature axis: features [g*D/G, (g+1)*D/G) of the output depend only
on the same slice of the input and on group g's weights. Stacking such
layers end to end keeps the G paths fully isolated, which is what lets
one network carry G ensemble members.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    concat,
    group_norm,
    matmul,
    mul,
    row_add,
    row_mul,
    slice_axis,
    softmax,
    swap_last_axes,
)

__all__ = [
    "GroupedLinear",
    "GroupedAttention",
    "GroupedNorm",
    "WidthPlan",
    "resolve_width",
    "param_count",
    "mac_count",
]


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GroupedLinear:
    """Linear map whose weight is block-diagonal with G equal blocks.

    Equivalent to G independent dense layers of width (in_dim/G ->
    out_dim/G) applied to the G feature slices. With G=1 this is a
    plain dense layer. Parameter count is in_dim*out_dim/G (+ out_dim
    bias).
    """

    def __init__(self, in_dim: int, out_dim: int, groups: int,
                 bias: bool = True, rng: np.random.Generator | None = None):
        if in_dim % groups != 0 or out_dim % groups != 0:
            raise ConfigError(
                f"GroupedLinear: dims ({in_dim}, {out_dim}) must be divisible by groups={groups}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.groups = groups
        gi, go = in_dim // groups, out_dim // groups
        rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
        self.blocks = [Tensor(_uniform_init(rng, gi, (gi, go)), requires_grad=True)
                       for _ in range(groups)]
        self.bias = Tensor(_uniform_init(rng, gi, (out_dim,)), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        gi = self.in_dim // self.groups
        outs = []
        for g in range(self.groups):
            xg = slice_axis(x, -1, g * gi, (g + 1) * gi)
            outs.append(matmul(xg, self.blocks[g]))
        out = concat(outs, axis=-1) if self.groups > 1 else outs[0]
        if self.bias is not None:
            out = row_add(out, self.bias)
        return out

    __call__ = forward

    def as_block_diagonal(self) -> np.ndarray:
        """Dense (in_dim, out_dim) matrix equal to this layer's map (ignores bias)."""
        gi, go = self.in_dim // self.groups, self.out_dim // self.groups
        dense = np.zeros((self.in_dim, self.out_dim))
        for g in range(self.groups):
            dense[g * gi:(g + 1) * gi, g * go:(g + 1) * go] = self.blocks[g].data
        return dense

    def parameters(self) -> list[Tensor]:
        return list(self.blocks) + ([self.bias] if self.bias is not None else [])

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def mac_count(self, n_rows: int) -> int:
        return n_rows * self.in_dim * self.out_dim // self.groups

    def member_masks(self, g: int) -> list[np.ndarray]:
        """Boolean masks over parameters() marking elements owned by group g."""
        masks = [np.full(b.shape, i == g) for i, b in enumerate(self.blocks)]
        if self.bias is not None:
            go = self.out_dim // self.groups
            m = np.zeros(self.out_dim, dtype=bool)
            m[g * go:(g + 1) * go] = True
            masks.append(m)
        return masks


class GroupedNorm:
    """Per-group feature normalization with a learned affine map.

    Each group slice is normalized to zero mean / unit variance over its
    features (layernorm restricted to the slice), then scaled and
    shifted. Scale and shift are full-width vectors, so each group owns
    its own affine parameters and group isolation is preserved.
    """

    def __init__(self, dim: int, groups: int, eps: float = 1e-5):
        if dim % groups != 0:
            raise ConfigError(f"GroupedNorm: dim {dim} not divisible by groups={groups}")
        self.dim = dim
        self.groups = groups
        self.eps = eps
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return row_add(row_mul(group_norm(x, self.groups, self.eps), self.scale), self.shift)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [self.scale, self.shift]

    def param_count(self) -> int:
        return 2 * self.dim

    def mac_count(self, n_rows: int) -> int:
        return 0

    def member_masks(self, g: int) -> list[np.ndarray]:
        gd = self.dim // self.groups
        m = np.zeros(self.dim, dtype=bool)
        m[g * gd:(g + 1) * gd] = True
        return [m, m.copy()]


class GroupedAttention:
    """Multi-head attention split into G independent groups.

    Group g attends over its own feature slice of width d/G using H
    heads of width d/(G*H); head outputs are concatenated per group,
    groups are concatenated, and a grouped output projection mixes each
    group's heads. Identical, bit for bit, to running G standalone
    width-d/G multi-head attention modules side by side on the slices.
    """

    def __init__(self, embed_dim: int, groups: int, heads: int,
                 out_bias: bool = True, rng: np.random.Generator | None = None):
        if embed_dim % (groups * heads) != 0:
            raise ConfigError(
                f"GroupedAttention: embed_dim {embed_dim} not divisible by groups*heads={groups * heads}")
        self.embed_dim = embed_dim
        self.groups = groups
        self.heads = heads
        self.d_group = embed_dim // groups
        self.d_head = embed_dim // (groups * heads)
        rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))

        def w():
            return Tensor(_uniform_init(rng, self.d_group, (self.d_group, self.d_head)),
                          requires_grad=True)

        self.w_query = [[w() for _ in range(heads)] for _ in range(groups)]
        self.w_key = [[w() for _ in range(heads)] for _ in range(groups)]
        self.w_value = [[w() for _ in range(heads)] for _ in range(groups)]
        self.out_proj = GroupedLinear(embed_dim, embed_dim, groups, bias=out_bias, rng=rng)

    def forward(self, query: Tensor, key: Tensor, value: Tensor,
                key_mask: np.ndarray | None = None,
                dropout_p: float = 0.0,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Attention over the second-to-last axis; inputs are (..., n, embed_dim).

        key_mask, when given, is a boolean array broadcastable to the
        score shape (..., n_q, n_kv); True marks positions to ignore.
        """
        scale = 1.0 / np.sqrt(self.d_head)
        groups_out = []
        for g in range(self.groups):
            lo, hi = g * self.d_group, (g + 1) * self.d_group
            qg = slice_axis(query, -1, lo, hi)
            kg = slice_axis(key, -1, lo, hi)
            vg = slice_axis(value, -1, lo, hi)
            heads_out = []
            for h in range(self.heads):
                qh = matmul(qg, self.w_query[g][h])
                kh = matmul(kg, self.w_key[g][h])
                vh = matmul(vg, self.w_value[g][h])
                scores = mul(matmul(qh, swap_last_axes(kh)), Tensor(scale))
                if key_mask is not None:
                    penalty = np.where(np.broadcast_to(key_mask, scores.shape), -1e9, 0.0)
                    scores = scores + Tensor(penalty)
                probs = softmax(scores, axis=-1)
                if dropout_p > 0.0 and dropout_rng is not None:
                    keep = dropout_rng.random(probs.shape) >= dropout_p
                    probs = probs * Tensor(keep / (1.0 - dropout_p))
                heads_out.append(matmul(probs, vh))
            groups_out.append(concat(heads_out, axis=-1) if self.heads > 1 else heads_out[0])
        merged = concat(groups_out, axis=-1) if self.groups > 1 else groups_out[0]
        return self.out_proj(merged)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        params = []
        for table in (self.w_query, self.w_key, self.w_value):
            for row in table:
                params.extend(row)
        params.extend(self.out_proj.parameters())
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def mac_count(self, n_q: int, n_kv: int | None = None) -> int:
        n_kv = n_q if n_kv is None else n_kv
        proj = self.groups * self.heads * self.d_group * self.d_head * (n_q + 2 * n_kv)
        scores = self.groups * self.heads * n_q * n_kv * self.d_head * 2
        return proj + scores + self.out_proj.mac_count(n_q)

    def member_masks(self, g: int) -> list[np.ndarray]:
        masks = []
        for table in (self.w_query, self.w_key, self.w_value):
            for gi, row in enumerate(table):
                masks.extend(np.full(w.shape, gi == g) for w in row)
        masks.extend(self.out_proj.member_masks(g))
        return masks


@dataclass(frozen=True)
class WidthPlan:
    """Resolved embedding width for a grouped transformer."""

    base_dim: int
    alpha: float
    groups: int
    heads: int
    dim: int

    def __post_init__(self):
        if self.dim % (self.groups * self.heads) != 0:
            raise ConfigError(f"WidthPlan: dim {self.dim} not divisible by {self.groups * self.heads}")


def resolve_width(base_dim: int, alpha: float, groups: int, heads: int) -> WidthPlan:
    """Smallest multiple of groups*heads that is >= alpha * base_dim."""
    if base_dim <= 0 or alpha <= 0 or groups <= 0 or heads <= 0:
        raise ConfigError(
            f"resolve_width: arguments must be positive, got ({base_dim}, {alpha}, {groups}, {heads})")
    unit = groups * heads
    target = alpha * base_dim
    dim = int(np.ceil(target / unit - 1e-12)) * unit
    if dim < target - 1e-9:
        dim += unit
    return WidthPlan(base_dim=base_dim, alpha=alpha, groups=groups, heads=heads, dim=dim)


def param_count(module) -> int:
    """Total number of learnable scalars in a layer or model."""
    return sum(p.size for p in module.parameters())


def mac_count(module, *shape_args) -> int:
    """Multiply-accumulate count for one forward pass; matmul MACs only."""
    return module.mac_count(*shape_args)
