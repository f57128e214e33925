"""Deformable multiscale cross-attention fusion.

Aligns a frozen semantic feature map to an encoder feature map through
sparse, offset-predicted bilinear sampling, then injects the aggregated
context back with per-channel scale/shift/gate modulation. Offsets and
modulation start at zero, so a freshly built stage is the identity on the
encoder features while gradients still reach every predictor weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv1x1, Linear, init_bias, init_weight
from .tensor import OpTape, ShapeError, Tensor


@dataclass(frozen=True)
class DmcafConfig:
    dim: int = 64      # shared attention dimension
    heads: int = 4
    points: int = 4    # sampling points per query per head
    stride: int = 2    # query-grid reduction per stage

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def reference_points(hq: int, wq: int, ht: int | None = None, wt: int | None = None) -> np.ndarray:
    """Query cell centers mapped to normalized [-1,1] target coordinates.

    Returns [hq, wq, 2] with (x, y) order; entries are strictly inside the
    square. ht/wt document the target grid; the normalized convention makes
    the mapping independent of its size.
    """
    xs = 2.0 * (np.arange(wq) + 0.5) / wq - 1.0
    ys = 2.0 * (np.arange(hq) + 0.5) / hq - 1.0
    grid = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)
    return grid


def aggregate_context(
    v: Tensor,
    p_ref: np.ndarray,
    offsets: Tensor,
    weights: Tensor,
    heads: int,
    tape: OpTape | None = None,
) -> Tensor:
    """Per head h: sum_k A_h^(k)(x) * V_h(p_ref(x) + dp_h^(k)(x)), heads concatenated.

    v [B,d,Ht,Wt]; p_ref [Hq,Wq,2]; offsets [B,H,K,Hq,Wq,2];
    weights [B,H,Hq,Wq,K]. Returns [B,d,Hq,Wq]. Cost is linear in K.
    """
    B, d, _, _ = v.shape
    if d % heads:
        raise ShapeError(f"value channels {d} not divisible by heads {heads}")
    if offsets.ndim != 6 or offsets.shape[1] != heads or offsets.shape[5] != 2:
        raise ShapeError(f"offsets must be [B,H,K,Hq,Wq,2], got {offsets.shape}")
    if weights.shape != offsets.shape[:2] + offsets.shape[3:5] + (offsets.shape[2],):
        raise ShapeError(f"weights shape {weights.shape} inconsistent with offsets {offsets.shape}")
    K = offsets.shape[2]
    hq, wq = offsets.shape[3], offsets.shape[4]
    P = hq * wq
    dh = d // heads
    ref_flat = Tensor(np.broadcast_to(p_ref.reshape(1, P, 2), (B, P, 2)).copy())
    off_flat = T.reshape(offsets, (B, heads, K, P, 2), tape)
    w_flat = T.reshape(weights, (B, heads, P, K), tape)
    head_outputs = []
    for h in range(heads):
        vh = T.slice_axis(v, 1, h * dh, (h + 1) * dh, tape)
        off_h = T.take_index(off_flat, 1, h, tape)   # [B,K,P,2]
        w_h = T.take_index(w_flat, 1, h, tape)       # [B,P,K]
        acc = None
        for k in range(K):
            coords = T.add(T.take_index(off_h, 1, k, tape), ref_flat, tape)
            sampled = T.bilinear_sample(vh, coords, tape)          # [B,dh,P]
            term = T.scale_cols(sampled, T.take_index(w_h, 2, k, tape), tape)
            acc = term if acc is None else T.add(acc, term, tape)
        head_outputs.append(acc)
    ctx = T.concat(head_outputs, 1, tape)
    return T.reshape(ctx, (B, d, hq, wq), tape)


class FusionStage:
    """All weights for fusing one encoder stage with its semantic feature map."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_t: int, cfg: DmcafConfig):
        self.cfg = cfg
        self.c_in = c_in
        self.c_t = c_t
        self.q_proj = Conv1x1(rng, c_in, cfg.dim)
        self.v_proj = Conv1x1(rng, c_t, cfg.dim)
        # zero-init predictors: offsets at the reference points, uniform A
        self.offset_head = Conv1x1(rng, cfg.dim, cfg.heads * cfg.points * 2, zero_init=True)
        self.attn_head = Conv1x1(rng, cfg.dim, cfg.heads * cfg.points, zero_init=True)
        self.back_proj = Conv1x1(rng, cfg.dim, c_in)
        self.psi_hidden = Linear(rng, c_in, c_in, gain=2.0)
        self.psi_out = Linear(rng, c_in, 3 * c_in, zero_init=True)
        # tanh-bounded offsets scaled by half the [-1,1] grid extent
        self.offset_range = Tensor(np.array(1.0))

    def named_params(self, prefix: str):
        out = []
        out += self.q_proj.named_params(prefix + ".q_proj")
        out += self.v_proj.named_params(prefix + ".v_proj")
        out += self.offset_head.named_params(prefix + ".offset_head")
        out += self.attn_head.named_params(prefix + ".attn_head")
        out += self.back_proj.named_params(prefix + ".back_proj")
        out += self.psi_hidden.named_params(prefix + ".psi_hidden")
        out += self.psi_out.named_params(prefix + ".psi_out")
        out.append((prefix + ".offset_range", self.offset_range))
        return out

    def pool_and_project_queries(self, u: Tensor, tape: OpTape | None = None) -> Tensor:
        """Stride-s average pooling then projection into the attention space."""
        s = self.cfg.stride
        B, C, H, W = u.shape
        if H % s or W % s:
            raise ShapeError(f"stride {s} does not divide stage spatial size ({H},{W})")
        pooled = u if s == 1 else T.avg_pool(u, s, tape)
        return self.q_proj(pooled, tape)

    def predict_offsets_weights(self, q: Tensor, tape: OpTape | None = None):
        """Offsets [B,H,K,Hq,Wq,2] (tanh-bounded, range-scaled) and softmax weights [B,H,Hq,Wq,K]."""
        cfg = self.cfg
        B, _, hq, wq = q.shape
        raw_off = self.offset_head(q, tape)
        bounded = T.mul_scalar(T.tanh(raw_off, tape), self.offset_range, tape)
        off = T.reshape(bounded, (B, cfg.heads, cfg.points, 2, hq, wq), tape)
        off = T.moveaxis(off, 3, 5, tape)  # [B,H,K,Hq,Wq,2]
        raw_a = self.attn_head(q, tape)
        a = T.reshape(raw_a, (B, cfg.heads, cfg.points, hq, wq), tape)
        a = T.moveaxis(a, 2, 4, tape)  # [B,H,Hq,Wq,K]
        return off, T.softmax(a, tape)

    def film_inject(self, u: Tensor, ctx: Tensor, tape: OpTape | None = None) -> Tensor:
        """Back-project, upsample, pool into per-channel (gamma, beta, alpha), fuse."""
        B, C, H, W = u.shape
        if ctx.shape[0] != B:
            raise ShapeError(f"context batch {ctx.shape[0]} vs encoder batch {B}")
        back = self.back_proj(ctx, tape)
        up = T.bilinear_upsample(back, H, W, tape)
        pooled = T.global_avg_pool(up, tape)
        hidden = T.relu(self.psi_hidden(pooled, tape), tape)
        gba = self.psi_out(hidden, tape)
        gamma = T.slice_axis(gba, 1, 0, C, tape)
        beta = T.slice_axis(gba, 1, C, 2 * C, tape)
        alpha = T.slice_axis(gba, 1, 2 * C, 3 * C, tape)
        scaled = T.scale_channels(u, T.add_const(gamma, 1.0, tape), tape)
        gated = T.scale_channels(up, alpha, tape)
        return T.shift_channels(T.add(scaled, gated, tape), beta, tape)

    def forward(self, u: Tensor, d: Tensor, tape: OpTape | None = None) -> Tensor:
        if u.shape[1] != self.c_in:
            raise ShapeError(f"encoder channels {u.shape[1]} vs stage c_in {self.c_in}")
        if d.shape[1] != self.c_t:
            raise ShapeError(f"semantic channels {d.shape[1]} vs stage c_t {self.c_t}")
        q = self.pool_and_project_queries(u, tape)
        v = self.v_proj(d, tape)
        off, attn = self.predict_offsets_weights(q, tape)
        p_ref = reference_points(q.shape[2], q.shape[3], v.shape[2], v.shape[3])
        ctx = aggregate_context(v, p_ref, off, attn, self.cfg.heads, tape)
        return self.film_inject(u, ctx, tape)
