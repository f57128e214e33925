"""Deterministic builders for the five parameterized circuit families.

All builders produce a fixed-order gate list: the angle-encoding layer first
(three rotations per qubit reading input slots), then the family's trainable
structure. Slots are unified: indices below ``n_trainable`` are trainable
parameters, the remaining ``3 * n_qubits`` index the encoding vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .qsim import CircuitSpec, GateOp, Observable, Statevector, _all_expectations

PARAM_INIT_RANGE = 0.1  # uniform init keeps circuits near identity


@dataclass(frozen=True)
class QubitGrid:
    """Row-major 2-D qubit layout; index(r, c) = r * cols + c."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dims must be positive")

    @property
    def n_qubits(self) -> int:
        return self.rows * self.cols

    def index(self, r: int, c: int) -> int:
        return r * self.cols + c

    @classmethod
    def for_qubits(cls, n_qubits: int) -> "QubitGrid":
        if n_qubits == 16:
            return cls(4, 4)
        if n_qubits == 8:
            return cls(2, 4)
        raise ValueError(f"no grid layout defined for {n_qubits} qubits")


def encoding_gates(n_qubits: int, slot_base: int = 0) -> list[GateOp]:
    """RX, RY, RZ per qubit, reading slots slot_base + 3*i + {0,1,2}."""
    gates = []
    for i in range(n_qubits):
        gates.append(GateOp("RX", (i,), param_slot=slot_base + 3 * i))
        gates.append(GateOp("RY", (i,), param_slot=slot_base + 3 * i + 1))
        gates.append(GateOp("RZ", (i,), param_slot=slot_base + 3 * i + 2))
    return gates


def encode_features(z, slot_base: int = 0) -> tuple[list[GateOp], np.ndarray]:
    """Validate per-qubit feature triples and return (gates, angle vector).

    ``z`` is [n_qubits, 3] with every entry strictly inside (-1, 1); the
    resolved angles are pi * z flattened qubit-major.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 3:
        raise ValueError(f"encoding input must be [n_qubits, 3], got {z.shape}")
    if np.abs(z).max(initial=0.0) >= 1.0:
        raise ValueError("encoding values must satisfy |z| < 1 (angle aliasing guard)")
    return encoding_gates(z.shape[0], slot_base), math.pi * z.ravel()


def build_two_qubit_filter(w0: int, w1: int, slot_base: int) -> list[GateOp]:
    """Pairwise interaction block: RY RY, CNOT, RY RY; four consecutive slots."""
    if w0 == w1:
        raise ValueError("filter wires must be distinct")
    return [
        GateOp("RY", (w0,), param_slot=slot_base),
        GateOp("RY", (w1,), param_slot=slot_base + 1),
        GateOp("CNOT", (w0, w1)),
        GateOp("RY", (w0,), param_slot=slot_base + 2),
        GateOp("RY", (w1,), param_slot=slot_base + 3),
    ]


def _horizontal_pairs(grid: QubitGrid) -> list[tuple[int, int]]:
    pairs = []
    for parity in (0, 1):
        for r in range(grid.rows):
            for c in range(parity, grid.cols - 1, 2):
                pairs.append((grid.index(r, c), grid.index(r, c + 1)))
    return pairs


def _vertical_pairs(grid: QubitGrid) -> list[tuple[int, int]]:
    pairs = []
    for parity in (0, 1):
        for c in range(grid.cols):
            for r in range(parity, grid.rows - 1, 2):
                pairs.append((grid.index(r, c), grid.index(r + 1, c)))
    return pairs


def enrichment_trainable_count(grid: QubitGrid) -> int:
    n_filters = len(_horizontal_pairs(grid)) + len(_vertical_pairs(grid))
    return 4 * n_filters + grid.n_qubits


def build_enrichment_multiscale(grid: QubitGrid) -> CircuitSpec:
    """Row filters, column filters, then a global cyclic entanglement ring."""
    n = grid.n_qubits
    n_train = enrichment_trainable_count(grid)
    gates = encoding_gates(n, slot_base=n_train)
    slot = 0
    for w0, w1 in _horizontal_pairs(grid):
        gates += build_two_qubit_filter(w0, w1, slot)
        slot += 4
    for w0, w1 in _vertical_pairs(grid):
        gates += build_two_qubit_filter(w0, w1, slot)
        slot += 4
    for i in range(n):
        gates.append(GateOp("RY", (i,), param_slot=slot))
        slot += 1
    for i in range(n):
        gates.append(GateOp("CNOT", (i, (i + 1) % n)))
    return CircuitSpec(n, tuple(gates), n_trainable=n_train, n_inputs=3 * n)


def build_localist(grid: QubitGrid) -> CircuitSpec:
    """Two layers of per-qubit RY plus a nearest-neighbor CNOT chain."""
    n = grid.n_qubits
    n_train = 2 * n
    gates = encoding_gates(n, slot_base=n_train)
    slot = 0
    for _ in range(2):
        for i in range(n):
            gates.append(GateOp("RY", (i,), param_slot=slot))
            slot += 1
        for i in range(n - 1):
            gates.append(GateOp("CNOT", (i, i + 1)))
    return CircuitSpec(n, tuple(gates), n_trainable=n_train, n_inputs=3 * n)


def build_globalist(grid: QubitGrid) -> CircuitSpec:
    """Full rotation layer, cyclic ring, long-range half-spans, final RY layer."""
    n = grid.n_qubits
    if n % 2:
        raise ValueError("globalist circuit needs an even qubit count")
    n_train = 4 * n
    gates = encoding_gates(n, slot_base=n_train)
    slot = 0
    for i in range(n):
        gates.append(GateOp("RX", (i,), param_slot=slot))
        gates.append(GateOp("RY", (i,), param_slot=slot + 1))
        gates.append(GateOp("RZ", (i,), param_slot=slot + 2))
        slot += 3
    for i in range(n):
        gates.append(GateOp("CNOT", (i, (i + 1) % n)))
    for i in range(n):
        gates.append(GateOp("CNOT", (i, (i + n // 2) % n)))
    for i in range(n):
        gates.append(GateOp("RY", (i,), param_slot=slot))
        slot += 1
    return CircuitSpec(n, tuple(gates), n_trainable=n_train, n_inputs=3 * n)


def build_diagonal(grid: QubitGrid) -> CircuitSpec:
    """RY layer, wraparound-diagonal CNOTs (r,c)->(r+1,c+1), RY layer."""
    n = grid.n_qubits
    n_train = 2 * n
    gates = encoding_gates(n, slot_base=n_train)
    slot = 0
    for i in range(n):
        gates.append(GateOp("RY", (i,), param_slot=slot))
        slot += 1
    for r in range(grid.rows):
        for c in range(grid.cols):
            src = grid.index(r, c)
            dst = grid.index((r + 1) % grid.rows, (c + 1) % grid.cols)
            gates.append(GateOp("CNOT", (src, dst)))
    for i in range(n):
        gates.append(GateOp("RY", (i,), param_slot=slot))
        slot += 1
    return CircuitSpec(n, tuple(gates), n_trainable=n_train, n_inputs=3 * n)


def build_filter_circuit(_grid: QubitGrid | None = None) -> CircuitSpec:
    """Standalone two-qubit filter with its own encoding, for tests and dumps."""
    gates = encoding_gates(2, slot_base=4) + build_two_qubit_filter(0, 1, 0)
    return CircuitSpec(2, tuple(gates), n_trainable=4, n_inputs=6)


BUILDERS = {
    "enrichment": build_enrichment_multiscale,
    "localist": build_localist,
    "globalist": build_globalist,
    "diagonal": build_diagonal,
    "filter": build_filter_circuit,
}


def feature_observables(n_qubits: int) -> list[Observable]:
    """Z on every qubit followed by X on every qubit."""
    return [Observable("Z", i) for i in range(n_qubits)] + [
        Observable("X", i) for i in range(n_qubits)
    ]


def measure_features(state: Statevector) -> np.ndarray:
    """Feature vector [<Z_0>..<Z_{n-1}>, <X_0>..<X_{n-1}>] of length 2n."""
    n = state.n_qubits
    return _all_expectations(state.amps, feature_observables(n), n)


def init_circuit_params(spec: CircuitSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-PARAM_INIT_RANGE, PARAM_INIT_RANGE, size=spec.n_trainable)
