"""Dense tensor type, reverse-mode op tape, and the classical layer primitives.

Every operation takes an optional ``tape``; when given, a backward closure is
recorded so that ``tape.backward(loss)`` accumulates gradients into the
``.grad`` buffers of all participating tensors in exact reverse execution
order. Forward math is vectorized numpy in float64; per-element loops exist
only in the test oracles.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch; the message names the offending axis."""


class Tensor:
    """Dense row-major N-D array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: Optional[np.ndarray] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class OpTape:
    """Ordered record of executed ops; backward replays them in reverse.

    A tape belongs to a single training step. Op outputs (non-leaf tensors)
    have their grads owned by the tape: ``backward`` clears them before
    seeding, so leaf tensors accumulate while a replay from zeroed leaf grads
    is bit-identical (all closures are deterministic numpy code).
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[str, Tensor, Callable[[], None]]] = []

    def record(self, name: str, out: Tensor, backward: Callable[[], None]) -> None:
        self._records.append((name, out, backward))

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [name for name, _, _ in self._records]

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward seed must be a scalar tensor")
        for _, out, _ in self._records:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for _, _, fn in reversed(self._records):
            fn()


def _out_grad(out: Tensor) -> Optional[np.ndarray]:
    return out.grad


# ---------------------------------------------------------------------------
# convolutions and pooling
# ---------------------------------------------------------------------------

def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None, tape: Optional[OpTape] = None) -> Tensor:
    """Pointwise channel mix: out[b,o,h,w] = bias[o] + sum_c w[o,c] x[b,c,h,w]."""
    if x.ndim != 4:
        raise ShapeError(f"conv1x1 input must be 4-D [B,C,H,W], got {x.shape}")
    if w.ndim != 2:
        raise ShapeError(f"conv1x1 weight must be 2-D [Cout,Cin], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv1x1 channel axis mismatch: input Cin={x.shape[1]} vs weight Cin={w.shape[1]}"
        )
    out_d = np.einsum("oc,bchw->bohw", w.data, x.data)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1 bias axis: expected ({w.shape[0]},), got {b.shape}")
        out_d = out_d + b.data[None, :, None, None]
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, np.einsum("oc,bohw->bchw", w.data, g))
            _accum(w, np.einsum("bohw,bchw->oc", g, x.data))
            if b is not None:
                _accum(b, g.sum(axis=(0, 2, 3)))
        tape.record("conv1x1", out, bw)
    return out


def depthwise_conv3x3(x: Tensor, dw: Tensor, stride: int = 1, tape: Optional[OpTape] = None) -> Tensor:
    """Per-channel 3x3 convolution, zero padding 1, stride 1 or 2."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if dw.shape != (C, 3, 3):
        raise ShapeError(f"depthwise kernel axis: expected ({C},3,3), got {dw.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"spatial size collapsed below 1 after stride: H={H}, W={W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out_d = np.zeros((B, C, Ho, Wo))
    for u in range(3):
        for v in range(3):
            win = xp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride]
            out_d += dw.data[None, :, u:u + 1, v:v + 1] * win
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gxp = np.zeros_like(xp)
            gdw = np.zeros_like(dw.data)
            for u in range(3):
                for v in range(3):
                    win = xp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride]
                    gdw[:, u, v] += (g * win).sum(axis=(0, 2, 3))
                    gxp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += (
                        dw.data[None, :, u:u + 1, v:v + 1] * g
                    )
            _accum(x, gxp[:, :, 1:1 + H, 1:1 + W])
            _accum(dw, gdw)
        tape.record("depthwise_conv3x3", out, bw)
    return out


def depthwise_separable_conv(
    x: Tensor,
    dw: Tensor,
    pw: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    tape: Optional[OpTape] = None,
) -> Tensor:
    """Depthwise 3x3 (pad 1) followed by a pointwise 1x1 channel mix."""
    h = depthwise_conv3x3(x, dw, stride=stride, tape=tape)
    return conv1x1(h, pw, bias, tape=tape)


def transposed_conv2x(x: Tensor, w: Tensor, b: Optional[Tensor] = None, tape: Optional[OpTape] = None) -> Tensor:
    """2x2-kernel stride-2 transposed convolution; exact doubling of H and W.

    Each output 2x2 block is w applied to one input pixel:
    out[b,o,2h+u,2w+v] = bias[o] + sum_c w[o,c,u,v] x[b,c,h,w].
    """
    if x.ndim != 4:
        raise ShapeError(f"transposed_conv2x input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if w.ndim != 4 or w.shape[1] != C or w.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2x weight axis: expected (Cout,{C},2,2), got {w.shape}")
    O = w.shape[0]
    t = np.einsum("ocuv,bchw->bohuwv", w.data, x.data)
    out_d = t.reshape(B, O, 2 * H, 2 * W)
    if b is not None:
        out_d = out_d + b.data[None, :, None, None]
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gt = g.reshape(B, O, H, 2, W, 2)
            _accum(x, np.einsum("ocuv,bohuwv->bchw", w.data, gt))
            _accum(w, np.einsum("bohuwv,bchw->ocuv", gt, x.data))
            if b is not None:
                _accum(b, g.sum(axis=(0, 2, 3)))
        tape.record("transposed_conv2x", out, bw)
    return out


def _pool_bounds(size: int, out: int) -> list[tuple[int, int]]:
    # window j spans floor(j*size/out) .. ceil((j+1)*size/out)-1 inclusive
    return [((j * size) // out, -((-(j + 1) * size) // out)) for j in range(out)]


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: Optional[int] = None, tape: Optional[OpTape] = None) -> Tensor:
    """Mean-pool to a fixed output grid with floor/ceil window boundaries."""
    if out_w is None:
        out_w = out_h
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"pool output must be >= 1, got ({out_h},{out_w})")
    if out_h > H:
        raise ShapeError(f"pool output rows {out_h} exceed input height {H}")
    if out_w > W:
        raise ShapeError(f"pool output cols {out_w} exceed input width {W}")
    rb = _pool_bounds(H, out_h)
    cb = _pool_bounds(W, out_w)
    out_d = np.empty((B, C, out_h, out_w))
    for j, (r0, r1) in enumerate(rb):
        for k, (c0, c1) in enumerate(cb):
            out_d[:, :, j, k] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gx = np.zeros_like(x.data)
            for j, (r0, r1) in enumerate(rb):
                for k, (c0, c1) in enumerate(cb):
                    area = (r1 - r0) * (c1 - c0)
                    gx[:, :, r0:r1, c0:c1] += g[:, :, j:j + 1, k:k + 1] / area
            _accum(x, gx)
        tape.record("adaptive_avg_pool", out, bw)
    return out


def avg_pool(x: Tensor, stride: int, tape: Optional[OpTape] = None) -> Tensor:
    """Non-overlapping mean pooling with window = stride; stride must divide H and W."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    s = stride
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    if H % s or W % s:
        raise ShapeError(f"stride {s} does not divide spatial axes ({H},{W})")
    out_d = x.data.reshape(B, C, H // s, s, W // s, s).mean(axis=(3, 5))
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gx = np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)
            _accum(x, gx)
        tape.record("avg_pool", out, bw)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling / resizing
# ---------------------------------------------------------------------------

def bilinear_sample(v: Tensor, coords: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """Sample v[B,C,Ht,Wt] at normalized coords[B,P,2] (x,y in [-1,1]).

    Pixel-center alignment (align-corners false): x=-1 maps half a pixel left
    of column 0. Corner taps outside the grid contribute zero. Gradients flow
    to both the grid values and the coordinates.
    """
    if v.ndim != 4:
        raise ShapeError(f"bilinear_sample grid must be 4-D, got {v.shape}")
    if coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] != v.shape[0]:
        raise ShapeError(f"coords must be [B,P,2] with B={v.shape[0]}, got {coords.shape}")
    if not np.isfinite(coords.data).all():
        raise ValueError("bilinear_sample received non-finite coordinates")
    B, C, Ht, Wt = v.shape
    P = coords.shape[1]
    ix = (coords.data[:, :, 0] + 1.0) * 0.5 * Wt - 0.5
    iy = (coords.data[:, :, 1] + 1.0) * 0.5 * Ht - 0.5
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fx = ix - x0
    fy = iy - y0
    vt = v.data.transpose(0, 2, 3, 1).reshape(B, Ht * Wt, C)
    bidx = np.arange(B)[:, None]

    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yc = y0 + dy
        xc = x0 + dx
        valid = ((yc >= 0) & (yc < Ht) & (xc >= 0) & (xc < Wt)).astype(np.float64)
        flat = np.clip(yc, 0, Ht - 1) * Wt + np.clip(xc, 0, Wt - 1)
        vals = vt[bidx, flat]  # [B,P,C]
        corners.append((dy, dx, wgt, valid, flat, vals))

    acc = np.zeros((B, P, C))
    for _, _, wgt, valid, _, vals in corners:
        acc += (wgt * valid)[:, :, None] * vals
    out = Tensor(acc.transpose(0, 2, 1))

    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gp = g.transpose(0, 2, 1)  # [B,P,C]
            gvt = np.zeros_like(vt)
            gfx = np.zeros((B, P))
            gfy = np.zeros((B, P))
            for dy, dx, wgt, valid, flat, vals in corners:
                np.add.at(gvt, (bidx, flat), (wgt * valid)[:, :, None] * gp)
                dot = (gp * vals).sum(axis=2) * valid
                wy = fy if dy == 1 else (1 - fy)
                wx = fx if dx == 1 else (1 - fx)
                gfx += dot * wy * (1.0 if dx == 1 else -1.0)
                gfy += dot * (1.0 if dy == 1 else -1.0) * wx
            gc = np.zeros_like(coords.data)
            gc[:, :, 0] = gfx * (0.5 * Wt)
            gc[:, :, 1] = gfy * (0.5 * Ht)
            _accum(coords, gc)
            _accum(v, gvt.reshape(B, Ht, Wt, C).transpose(0, 3, 1, 2))
        tape.record("bilinear_sample", out, bw)
    return out


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix for bilinear resize with clamped borders."""
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    for j in range(dst):
        s = (j + 0.5) * src / dst - 0.5
        s = min(max(s, 0.0), src - 1.0)
        i0 = min(int(math.floor(s)), src - 2)
        f = s - i0
        m[j, i0] += 1.0 - f
        m[j, i0 + 1] += f
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int, tape: Optional[OpTape] = None) -> Tensor:
    """Bilinear resize to (out_h, out_w); source taps clamp at the borders."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if out_h < H or out_w < W:
        raise ShapeError(f"upsample target ({out_h},{out_w}) smaller than input ({H},{W})")
    R = _resize_matrix(H, out_h)
    Cm = _resize_matrix(W, out_w)
    tmp = np.tensordot(R, x.data, axes=(1, 2)).transpose(1, 2, 0, 3)  # [B,C,out_h,W]
    out_d = tmp @ Cm.T
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gtmp = g @ Cm
            gx = np.tensordot(R.T, gtmp, axes=(1, 2)).transpose(1, 2, 0, 3)
            _accum(x, gx)
        tape.record("bilinear_upsample", out, bw)
    return out


# ---------------------------------------------------------------------------
# pointwise, affine, reduction
# ---------------------------------------------------------------------------

def relu(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * mask)
        tape.record("relu", out, bw)
    return out


def tanh(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(np.tanh(x.data))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * (1.0 - out.data ** 2))
        tape.record("tanh", out, bw)
    return out


_TANH_BOUND = 1.0 - 1e-12


def bounded_tanh(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """tanh clipped strictly inside (-1, 1).

    Float rounding lets np.tanh reach exactly +-1.0 for |x| > ~19; downstream
    angle encodings require the open interval, so the output is nudged one
    representable step inward (the true derivative there is ~4e-17 anyway).
    """
    y = np.tanh(x.data)
    np.clip(y, -_TANH_BOUND, _TANH_BOUND, out=y)
    out = Tensor(y)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * (1.0 - out.data ** 2))
        tape.record("bounded_tanh", out, bw)
    return out


def sigmoid(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(1.0 / (1.0 + np.exp(-x.data)))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * out.data * (1.0 - out.data))
        tape.record("sigmoid", out, bw)
    return out


def softmax(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    if x.data.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            dot = (g * out.data).sum(axis=-1, keepdims=True)
            _accum(x, out.data * (g - dot))
        tape.record("softmax", out, bw)
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None, tape: Optional[OpTape] = None) -> Tensor:
    """Affine map y = x W^T + b with x[..., in], w[out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear input axis {x.shape[-1]} vs weight in-dim {w.shape[1]}")
    out_d = x.data @ w.data.T
    if b is not None:
        out_d = out_d + b.data
    out = Tensor(out_d)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g @ w.data)
            gm = g.reshape(-1, g.shape[-1])
            xm = x.data.reshape(-1, x.shape[-1])
            _accum(w, gm.T @ xm)
            if b is not None:
                _accum(b, gm.sum(axis=0))
        tape.record("linear", out, bw)
    return out


def global_avg_pool(x: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """Spatial mean: [B,C,H,W] -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())
        tape.record("global_avg_pool", out, bw)
    return out


def add(a: Tensor, b: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            _accum(b, g)
        tape.record("add", out, bw)
    return out


def mul(a: Tensor, b: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        tape.record("mul", out, bw)
    return out


def add_const(x: Tensor, c: float, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(x.data + c)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g)
        tape.record("add_const", out, bw)
    return out


def scale_const(x: Tensor, c: float, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * c)
        tape.record("scale_const", out, bw)
    return out


def mul_scalar(x: Tensor, s: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """Multiply by a trainable scalar tensor."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar expects a scalar tensor, got {s.shape}")
    out = Tensor(x.data * s.data.reshape(()))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * s.data.reshape(()))
            _accum(s, np.array((g * x.data).sum()).reshape(s.shape))
        tape.record("mul_scalar", out, bw)
    return out


def scale_channels(x: Tensor, s: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """x[B,C,H,W] * s[B,C] broadcast over space."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: x {x.shape} vs s {s.shape}")
    out = Tensor(x.data * s.data[:, :, None, None])
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * s.data[:, :, None, None])
            _accum(s, (g * x.data).sum(axis=(2, 3)))
        tape.record("scale_channels", out, bw)
    return out


def shift_channels(x: Tensor, s: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """x[B,C,H,W] + s[B,C] broadcast over space."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"shift_channels: x {x.shape} vs s {s.shape}")
    out = Tensor(x.data + s.data[:, :, None, None])
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g)
            _accum(s, g.sum(axis=(2, 3)))
        tape.record("shift_channels", out, bw)
    return out


def scale_cols(x: Tensor, w: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """x[B,C,P] * w[B,P] broadcast over channels."""
    if x.ndim != 3 or w.shape != (x.shape[0], x.shape[2]):
        raise ShapeError(f"scale_cols: x {x.shape} vs w {w.shape}")
    out = Tensor(x.data * w.data[:, None, :])
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * w.data[:, None, :])
            _accum(w, (g * x.data).sum(axis=1))
        tape.record("scale_cols", out, bw)
    return out


def scale_rows(x: Tensor, w: Tensor, tape: Optional[OpTape] = None) -> Tensor:
    """x[B,D] * w[B] broadcast over features."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: x {x.shape} vs w {w.shape}")
    out = Tensor(x.data * w.data[:, None])
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g * w.data[:, None])
            _accum(w, (g * x.data).sum(axis=1))
        tape.record("scale_rows", out, bw)
    return out


def broadcast_spatial(v: Tensor, h: int, w: int, tape: Optional[OpTape] = None) -> Tensor:
    """[B,C] -> [B,C,h,w], every spatial position identical."""
    if v.ndim != 2:
        raise ShapeError(f"broadcast_spatial input must be 2-D, got {v.shape}")
    out = Tensor(np.broadcast_to(v.data[:, :, None, None], v.shape + (h, w)).copy())
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(v, g.sum(axis=(2, 3)))
        tape.record("broadcast_spatial", out, bw)
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int], tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        orig = x.shape
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, g.reshape(orig))
        tape.record("reshape", out, bw)
    return out


def moveaxis(x: Tensor, src: int, dst: int, tape: Optional[OpTape] = None) -> Tensor:
    out = Tensor(np.moveaxis(x.data, src, dst).copy())
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            _accum(x, np.moveaxis(g, dst, src))
        tape.record("moveaxis", out, bw)
    return out


def concat(ts: Iterable[Tensor], axis: int = 1, tape: Optional[OpTape] = None) -> Tensor:
    ts = list(ts)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    if tape is not None:
        sizes = [t.shape[axis] for t in ts]
        def bw():
            g = out.grad
            if g is None:
                return
            start = 0
            for t, n in zip(ts, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                _accum(t, g[tuple(sl)])
                start += n
        tape.record("concat", out, bw)
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int, tape: Optional[OpTape] = None) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(x.data[tuple(sl)].copy())
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gx = np.zeros_like(x.data)
            gx[tuple(sl)] = g
            _accum(x, gx)
        tape.record("slice_axis", out, bw)
    return out


def take_index(x: Tensor, axis: int, index: int, tape: Optional[OpTape] = None) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    out = Tensor(np.take(x.data, index, axis=axis).copy())
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            gx = np.zeros_like(x.data)
            sl = [slice(None)] * x.ndim
            sl[axis] = index
            gx[tuple(sl)] = g
            _accum(x, gx)
        tape.record("take_index", out, bw)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_index: int = 255,
    tape: Optional[OpTape] = None,
) -> Tensor:
    """Mean per-pixel negative log-likelihood over non-ignored pixels.

    logits [B,C,H,W], labels [B,H,W] integer class ids.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy logits must be 4-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy labels shape {labels.shape} vs logits {logits.shape}")
    C = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        ids = np.unique(labels[bad])
        raise ValueError(f"class ids out of range [0,{C}): {ids.tolist()}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no non-ignored pixels")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))  # [B,H,W]
    safe = np.where(valid, labels, 0)
    true_logit = np.take_along_axis(z, safe[:, None, :, :], axis=1)[:, 0]
    loss = ((lse - true_logit) * valid).sum() / n_valid
    out = Tensor(np.array(loss))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            p = np.exp(z - lse[:, None, :, :])
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe[:, None, :, :], 1.0, axis=1)
            glog = (p - onehot) * valid[:, None, :, :] / n_valid
            _accum(logits, glog * g.reshape(()))
        tape.record("cross_entropy", out, bw)
    return out


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-3,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    Numeric gradient is the central difference (f(t+h e_i) - f(t-h e_i)) / 2h.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} vs theta {theta.shape}")
    idx = range(theta.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fp = float(f(tp))
        fm = float(f(tm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
