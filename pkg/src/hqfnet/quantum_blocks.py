"""The two hybrid blocks: quantum skip recalibration and the quantum MoE bottleneck.

Both share one interface convention: a feature map is pooled to the qubit
grid, mixed down to three values per qubit, squashed into (-1, 1), and fed
through angle encoding into a circuit whose Z/X expectations form the
descriptor f_q. Gradients flow through the circuit via adjoint
differentiation, including into the encoding angles, so the compressors
train end to end.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import qsim
from . import tensor as T
from .circuits import (
    QubitGrid,
    build_diagonal,
    build_enrichment_multiscale,
    build_globalist,
    build_localist,
    feature_observables,
    init_circuit_params,
)
from .layers import Conv1x1, Linear
from .tensor import OpTape, ShapeError, Tensor

EXPERT_BUILDERS = (build_localist, build_globalist, build_diagonal)
EXPERT_NAMES = ("localist", "globalist", "diagonal")


@dataclass(frozen=True)
class QuantumProfile:
    """Pooling target and compressor width for a given register size."""

    n_qubits: int
    grid: QubitGrid
    pool: tuple[int, int]
    channels: int  # compressor output channels; pool cells * channels = 3 * n_qubits

    @classmethod
    def for_qubits(cls, n_qubits: int) -> "QuantumProfile":
        if n_qubits == 16:
            return cls(16, QubitGrid.for_qubits(16), (4, 4), 3)
        if n_qubits == 8:
            # 2x2 pooled cells with six channels each keep z at 3 * n_qubits
            return cls(8, QubitGrid.for_qubits(8), (2, 2), 6)
        raise ValueError(f"unsupported qubit profile {n_qubits}")


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("HQF_THREADS", "1")))
    except ValueError:
        return 1


def quantum_features(
    spec: qsim.CircuitSpec, theta: Tensor, x: Tensor, tape: OpTape | None = None
) -> Tensor:
    """Run the circuit per sample and measure the Z/X feature vector.

    x is [B, n_inputs] of encoding angles. Backward uses one adjoint sweep
    per sample, feeding both the trainable parameters and the angles.
    """
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ShapeError(f"encoding batch must be [B,{spec.n_inputs}], got {x.shape}")
    if theta.shape != (spec.n_trainable,):
        raise ShapeError(f"theta must be [{spec.n_trainable}], got {theta.shape}")
    B = x.shape[0]
    obs = feature_observables(spec.n_qubits)
    out_d = np.empty((B, 2 * spec.n_qubits))

    def fwd(b):
        out_d[b] = qsim.expectations(spec, theta.data, x.data[b], obs)

    workers = min(_thread_cap(), B)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fwd, range(B)))
    else:
        for b in range(B):
            fwd(b)
    out = Tensor(out_d)
    if tape is not None:
        theta_d = theta.data.copy()
        x_d = x.data.copy()

        def bw():
            g = out.grad
            if g is None:
                return
            nt = spec.n_trainable
            gth = np.zeros(nt)
            gx = np.zeros_like(x_d)

            def sample_grads(b):
                jac = qsim.adjoint_gradients(spec, theta_d, x_d[b], obs)
                gx[b] = jac[:, nt:].T @ g[b]
                return jac[:, :nt].T @ g[b]

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    for gt in pool.map(sample_grads, range(B)):
                        gth += gt
            else:
                for b in range(B):
                    gth += sample_grads(b)
            T._accum(theta, gth)
            T._accum(x, gx)

        tape.record("quantum_features", out, bw)
    return out


class _Compressor:
    """AdaptiveAvgPool to the qubit grid, 1x1 conv, bounded tanh, flatten.

    The flatten is cell-major: each pooled cell contributes its channel
    triple(s) consecutively, so qubit i reads components 3i..3i+2.
    """

    def __init__(self, rng, in_ch: int, profile: QuantumProfile):
        self.profile = profile
        self.conv = Conv1x1(rng, in_ch, profile.channels)

    def __call__(self, x: Tensor, tape: OpTape | None = None, trace: dict | None = None,
                 key: str = "") -> Tensor:
        ph, pw = self.profile.pool
        pooled = T.adaptive_avg_pool(x, ph, pw, tape)
        mixed = T.bounded_tanh(self.conv(pooled, tape), tape)
        if trace is not None:
            trace[key + ".x_q"] = mixed
        B = x.shape[0]
        z = T.reshape(T.moveaxis(mixed, 1, 3, tape), (B, 3 * self.profile.n_qubits), tape)
        if trace is not None:
            trace[key + ".z"] = z
        return z

    def named_params(self, prefix: str):
        return self.conv.named_params(prefix + ".conv")


def _descriptor(spec, theta, z, tape):
    """Angle-encode z (already in (-1,1)) and measure the circuit features."""
    return quantum_features(spec, theta, T.scale_const(z, math.pi, tape), tape)


class QSkipBlock:
    """Quantum-guided channel recalibration with residual preservation: Y = X*A + X."""

    def __init__(self, rng: np.random.Generator, channels: int, n_qubits: int = 16):
        self.channels = channels
        self.profile = QuantumProfile.for_qubits(n_qubits)
        self.compressor = _Compressor(rng, channels, self.profile)
        self.circuit = build_enrichment_multiscale(self.profile.grid)
        self.theta = Tensor(init_circuit_params(self.circuit, rng))
        self.attn = Linear(rng, 2 * n_qubits, channels)

    def named_params(self, prefix: str):
        out = self.compressor.named_params(prefix + ".compressor")
        out.append((prefix + ".theta", self.theta))
        out += self.attn.named_params(prefix + ".attn")
        return out

    def compress_for_quantum(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return self.compressor(x, tape)

    def quantum_descriptor(self, z: Tensor, tape: OpTape | None = None) -> Tensor:
        return _descriptor(self.circuit, self.theta, z, tape)

    def refine(self, x: Tensor, tape: OpTape | None = None, trace: dict | None = None,
               key: str = "qskip") -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"skip channels {x.shape[1]} vs block channels {self.channels}")
        z = self.compressor(x, tape, trace, key)
        f_q = self.quantum_descriptor(z, tape)
        if trace is not None:
            trace[key + ".f_q"] = f_q
        a = T.sigmoid(self.attn(f_q, tape), tape)
        return T.add(T.scale_channels(x, a, tape), x, tape)


class QMoEBottleneck:
    """Gated blend of three specialized circuits on the compressed bottleneck.

    The enrichment descriptor drives a softmax gate and three expert
    projections; every expert is always evaluated (soft routing) and the
    convex mix is projected to C_out and broadcast back over space.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, n_qubits: int = 16):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.profile = QuantumProfile.for_qubits(n_qubits)
        nq = self.profile.n_qubits
        self.compressor = _Compressor(rng, in_ch, self.profile)
        self.circuit = build_enrichment_multiscale(self.profile.grid)
        self.theta = Tensor(init_circuit_params(self.circuit, rng))
        self.gate_map = Linear(rng, 2 * nq, 3)
        self.expert_maps = [Linear(rng, 2 * nq, 3 * nq) for _ in range(3)]
        self.expert_circuits = [b(self.profile.grid) for b in EXPERT_BUILDERS]
        self.expert_thetas = [Tensor(init_circuit_params(c, rng)) for c in self.expert_circuits]
        self.out_map = Linear(rng, 2 * nq, out_ch)

    def named_params(self, prefix: str):
        out = self.compressor.named_params(prefix + ".compressor")
        out.append((prefix + ".theta", self.theta))
        out += self.gate_map.named_params(prefix + ".gate")
        for k in range(3):
            out += self.expert_maps[k].named_params(f"{prefix}.expert{k}.map")
            out.append((f"{prefix}.expert{k}.theta", self.expert_thetas[k]))
        out += self.out_map.named_params(prefix + ".out")
        return out

    def compress_for_quantum(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return self.compressor(x, tape)

    def quantum_descriptor(self, z: Tensor, tape: OpTape | None = None) -> Tensor:
        return _descriptor(self.circuit, self.theta, z, tape)

    def gate(self, f_q: Tensor, tape: OpTape | None = None) -> Tensor:
        return T.softmax(self.gate_map(f_q, tape), tape)

    def expert(self, k: int, f_q: Tensor, tape: OpTape | None = None) -> Tensor:
        if k not in (0, 1, 2):
            raise ValueError(f"expert index must be 0, 1 or 2, got {k}")
        u = T.bounded_tanh(self.expert_maps[k](f_q, tape), tape)
        return _descriptor(self.expert_circuits[k], self.expert_thetas[k], u, tape)

    def forward(self, x: Tensor, tape: OpTape | None = None, trace: dict | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"bottleneck input must be [B,{self.in_ch},H,W], got {x.shape}")
        B, _, H, W = x.shape
        z = self.compressor(x, tape, trace, "qmoe")
        f_q = self.quantum_descriptor(z, tape)
        if trace is not None:
            trace["qmoe.f_q"] = f_q
        g = self.gate(f_q, tape)
        mixed = None
        for k in range(3):
            e_k = self.expert(k, f_q, tape)
            term = T.scale_rows(e_k, T.take_index(g, 1, k, tape), tape)
            mixed = term if mixed is None else T.add(mixed, term, tape)
        b = self.out_map(mixed, tape)
        out = T.broadcast_spatial(b, H, W, tape)
        if trace is not None:
            trace["qmoe.gate"] = g
            trace["qmoe.out"] = out
        return out
