"""Exact statevector simulation of parameterized circuits.

Gate set {H, RX, RY, RZ, CNOT} on up to 16 qubits, little-endian basis
ordering (qubit 0 is the least significant bit of the basis index).
Expectation values of single-qubit Z and X observables, adjoint-mode
gradients with one backward sweep shared by all observables, and a
parameter-shift oracle.

Rotation gates resolve their angle from a unified slot vector
``concat(theta, x)``: slots below ``n_trainable`` index the trainable
parameters, the rest index the input-encoding vector. Gradients are returned
for both blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

GATE_KINDS = ("H", "RX", "RY", "RZ", "CNOT")
ROTATIONS = ("RX", "RY", "RZ")
MAX_QUBITS = 16

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class GateOp:
    """One gate: kind, wires, and for rotations a slot or a fixed angle."""

    kind: str
    wires: tuple[int, ...]
    param_slot: Optional[int] = None
    fixed_angle: Optional[float] = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unsupported gate kind {self.kind!r}")
        object.__setattr__(self, "wires", tuple(self.wires))
        if self.kind in ROTATIONS:
            if len(self.wires) != 1:
                raise CircuitError(f"{self.kind} takes one wire, got {self.wires}")
            if (self.param_slot is None) == (self.fixed_angle is None):
                raise CircuitError(f"{self.kind} needs exactly one of param_slot, fixed_angle")
        else:
            if self.param_slot is not None or self.fixed_angle is not None:
                raise CircuitError(f"{self.kind} carries no parameter")
            want = 2 if self.kind == "CNOT" else 1
            if len(self.wires) != want:
                raise CircuitError(f"{self.kind} takes {want} wire(s), got {self.wires}")
            if self.kind == "CNOT" and self.wires[0] == self.wires[1]:
                raise CircuitError("CNOT wires must be distinct")


@dataclass(frozen=True)
class Observable:
    kind: str  # "Z" or "X"
    wire: int

    def __post_init__(self):
        if self.kind not in ("Z", "X"):
            raise CircuitError(f"unsupported observable {self.kind!r}")


@dataclass(frozen=True)
class CircuitSpec:
    """Ordered gate list with trainable and input-encoding slot counts."""

    n_qubits: int
    gates: tuple[GateOp, ...]
    n_trainable: int
    n_inputs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if not (1 <= self.n_qubits <= MAX_QUBITS):
            raise CircuitError(f"n_qubits must be in 1..{MAX_QUBITS}, got {self.n_qubits}")
        n_slots = self.n_trainable + self.n_inputs
        seen = set()
        for g in self.gates:
            for w in g.wires:
                if not (0 <= w < self.n_qubits):
                    raise CircuitError(f"wire {w} out of range for {self.n_qubits} qubits")
            if g.param_slot is not None:
                if not (0 <= g.param_slot < n_slots):
                    raise CircuitError(f"slot {g.param_slot} out of range ({n_slots} slots)")
                seen.add(g.param_slot)
        missing = [s for s in range(self.n_trainable) if s not in seen]
        if missing:
            raise CircuitError(f"trainable slots never referenced: {missing}")

    @property
    def n_slots(self) -> int:
        return self.n_trainable + self.n_inputs


class Statevector:
    """Complex amplitude vector over n qubits, unit norm."""

    __slots__ = ("n_qubits", "amps")

    def __init__(self, n_qubits: int, amps: Optional[np.ndarray] = None):
        if not (1 <= n_qubits <= MAX_QUBITS):
            raise CircuitError(f"n_qubits must be in 1..{MAX_QUBITS}, got {n_qubits}")
        self.n_qubits = n_qubits
        if amps is None:
            amps = np.zeros(1 << n_qubits, dtype=np.complex128)
            amps[0] = 1.0
        else:
            amps = np.asarray(amps, dtype=np.complex128)
            if amps.shape != (1 << n_qubits,):
                raise CircuitError(f"amplitude vector must have length {1 << n_qubits}")
        self.amps = amps

    @classmethod
    def zero(cls, n_qubits: int) -> "Statevector":
        return cls(n_qubits)

    def norm_sq(self) -> float:
        return float((np.abs(self.amps) ** 2).sum())

    def copy(self) -> "Statevector":
        return Statevector(self.n_qubits, self.amps.copy())


# ---------------------------------------------------------------------------
# kernels: gates run out-of-place into a scratch buffer (one 2x2 matmul per
# gate), ping-ponging between two arrays; CNOT permutes in place.
# ---------------------------------------------------------------------------

def _rot_matrix(kind: str, angle: float) -> np.ndarray:
    c = math.cos(angle / 2.0)
    s = math.sin(angle / 2.0)
    if kind == "RX":
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)
    if kind == "RY":
        return np.array([[c, -s], [s, c]], dtype=np.complex128)
    if kind == "RZ":
        e = complex(c, -s)
        return np.array([[e, 0.0], [0.0, e.conjugate()]], dtype=np.complex128)
    raise CircuitError(f"not a rotation: {kind!r}")


_H_MATRIX = np.array([[_INV_SQRT2, _INV_SQRT2], [_INV_SQRT2, -_INV_SQRT2]], dtype=np.complex128)
_GENERATOR = {"RX": "X", "RY": "Y", "RZ": "Z"}


def _wire_view(arr: np.ndarray, wire: int, n: int) -> np.ndarray:
    lead = arr.shape[:-1]
    return arr.reshape(lead + (1 << (n - 1 - wire), 2, 1 << wire))


class _Buffers:
    """A working statevector (possibly a batch of them) plus scratch."""

    __slots__ = ("cur", "scr", "n")

    def __init__(self, arr: np.ndarray, n: int):
        self.cur = arr
        self.scr = np.empty_like(arr)
        self.n = n

    def matrix_1q(self, m: np.ndarray, wire: int) -> None:
        a = _wire_view(self.cur, wire, self.n)
        o = _wire_view(self.scr, wire, self.n)
        np.matmul(m, a, out=o)
        self.cur, self.scr = self.scr, self.cur

    def cnot(self, control: int, target: int) -> None:
        hi, lo = max(control, target), min(control, target)
        lead = self.cur.shape[:-1]
        a = self.cur.reshape(
            lead + (1 << (self.n - 1 - hi), 2, 1 << (hi - lo - 1), 2, 1 << lo)
        )
        if control > target:
            a[..., 1, :, :, :] = a[..., 1, :, ::-1, :].copy()
        else:
            a[..., 1, :] = a[..., ::-1, :, 1, :].copy()

    def gate(self, g: GateOp, angle: Optional[float]) -> None:
        if g.kind == "H":
            self.matrix_1q(_H_MATRIX, g.wires[0])
        elif g.kind == "CNOT":
            self.cnot(g.wires[0], g.wires[1])
        else:
            self.matrix_1q(_rot_matrix(g.kind, angle), g.wires[0])

    def inverse_gate(self, g: GateOp, angle: Optional[float]) -> None:
        # H and CNOT are self-inverse; rotations invert by negating the angle
        if g.kind in ROTATIONS:
            self.matrix_1q(_rot_matrix(g.kind, -angle), g.wires[0])
        else:
            self.gate(g, None)

    def pauli_into(self, kind: str, wire: int, dst: np.ndarray) -> None:
        a = _wire_view(self.cur, wire, self.n)
        o = _wire_view(dst, wire, self.n)
        if kind == "X":
            o[..., 0, :] = a[..., 1, :]
            o[..., 1, :] = a[..., 0, :]
        elif kind == "Y":
            np.multiply(a[..., 1, :], -1j, out=o[..., 0, :])
            np.multiply(a[..., 0, :], 1j, out=o[..., 1, :])
        else:
            o[..., 0, :] = a[..., 0, :]
            np.multiply(a[..., 1, :], -1.0, out=o[..., 1, :])


def _zero_buffers(n: int, rows: int = 0) -> _Buffers:
    shape = (1 << n,) if rows == 0 else (rows, 1 << n)
    arr = np.zeros(shape, dtype=np.complex128)
    arr[..., 0] = 1.0
    return _Buffers(arr, n)


def apply_gate(state: Statevector, g: GateOp, angle: Optional[float] = None) -> Statevector:
    """Apply one gate, returning a fresh statevector.

    ``angle`` must be supplied iff the gate is a rotation with an unresolved
    slot; fixed-angle rotations use their stored angle.
    """
    for w in g.wires:
        if w >= state.n_qubits:
            raise CircuitError(f"wire {w} out of range for {state.n_qubits} qubits")
    if g.kind in ROTATIONS:
        if g.fixed_angle is not None:
            if angle is not None:
                raise CircuitError("angle supplied for a fixed-angle rotation")
            angle = g.fixed_angle
        elif angle is None:
            raise CircuitError(f"{g.kind} with a slot needs an explicit angle")
    elif angle is not None:
        raise CircuitError(f"{g.kind} takes no angle")
    buf = _Buffers(state.amps.copy(), state.n_qubits)
    buf.gate(g, angle)
    return Statevector(state.n_qubits, buf.cur)


def _resolve_angles(spec: CircuitSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    vec = np.concatenate([theta, x]) if spec.n_inputs else theta
    angles = np.zeros(len(spec.gates))
    for i, g in enumerate(spec.gates):
        if g.kind in ROTATIONS:
            angles[i] = g.fixed_angle if g.fixed_angle is not None else vec[g.param_slot]
    return angles


def _check_vectors(spec: CircuitSpec, theta, x) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if theta.shape != (spec.n_trainable,):
        raise CircuitError(f"theta length {theta.size} != n_trainable {spec.n_trainable}")
    if x.shape != (spec.n_inputs,):
        raise CircuitError(f"input vector length {x.size} != n_inputs {spec.n_inputs}")
    return theta, x


def _run_with_angles(spec: CircuitSpec, angles: np.ndarray) -> np.ndarray:
    buf = _zero_buffers(spec.n_qubits)
    for g, a in zip(spec.gates, angles):
        buf.gate(g, a)
    return buf.cur


def run_circuit(spec: CircuitSpec, theta=(), x=()) -> Statevector:
    """Apply the gate list in order on |0...0> with slots resolved."""
    theta, x = _check_vectors(spec, theta, x)
    angles = _resolve_angles(spec, theta, x)
    return Statevector(spec.n_qubits, _run_with_angles(spec, angles))


def expectation(state: Statevector, obs: Observable) -> float:
    """<Z_i> from basis probabilities; <X_i> via a basis change H on wire i."""
    if obs.wire >= state.n_qubits:
        raise CircuitError(f"observable wire {obs.wire} out of range")
    return float(_all_expectations(state.amps, [obs], state.n_qubits)[0])


def _all_expectations(amps: np.ndarray, observables: Sequence[Observable], n: int) -> np.ndarray:
    out = np.empty(len(observables))
    probs = np.abs(amps) ** 2
    for i, obs in enumerate(observables):
        if obs.kind == "Z":
            a = _wire_view(probs, obs.wire, n)
            out[i] = a[..., 0, :].sum() - a[..., 1, :].sum()
        else:
            # <X_i> = 2 Re <a0|a1> over the wire split
            a = _wire_view(amps, obs.wire, n)
            out[i] = 2.0 * np.real(np.sum(a[..., 0, :].conj() * a[..., 1, :]))
    return out


def adjoint_gradients(
    spec: CircuitSpec, theta, x, observables: Sequence[Observable]
) -> np.ndarray:
    """Jacobian [n_obs, n_trainable + n_inputs] of all expectations.

    One forward pass, then a single reverse sweep that moves gates from the
    ket onto the observable-side states, so the sweep cost is shared by every
    observable. Exact for the supported gate set (analytic Pauli generators).
    """
    theta, x = _check_vectors(spec, theta, x)
    n = spec.n_qubits
    angles = _resolve_angles(spec, theta, x)
    ket = _Buffers(_run_with_angles(spec, angles), n)

    bras = _Buffers(np.empty((len(observables), 1 << n), dtype=np.complex128), n)
    for j, obs in enumerate(observables):
        if obs.wire >= n:
            raise CircuitError(f"observable wire {obs.wire} out of range")
        ket.pauli_into(obs.kind, obs.wire, bras.cur[j])

    tmp = np.empty_like(ket.cur)
    jac = np.zeros((len(observables), spec.n_slots))
    for i in range(len(spec.gates) - 1, -1, -1):
        g = spec.gates[i]
        if g.kind in ROTATIONS and g.param_slot is not None:
            # d<M>/da = 2 Re <b_i| dU |k_i> with dU|k_i> = -(i/2) G |k_{i+1}>
            ket.pauli_into(_GENERATOR[g.kind], g.wires[0], tmp)
            np.multiply(tmp, -0.5j, out=tmp)
            # Re(conj(b) . t) == Re(b . conj(t))
            jac[:, g.param_slot] += 2.0 * np.real(bras.cur @ tmp.conj())
        ket.inverse_gate(g, angles[i])
        bras.inverse_gate(g, angles[i])
    return jac


def parameter_shift_gradients(
    spec: CircuitSpec, theta, x, observables: Sequence[Observable]
) -> np.ndarray:
    """Shift-rule Jacobian: (E(a + pi/2) - E(a - pi/2)) / 2 per gate occurrence.

    Gates sharing a slot are shifted one occurrence at a time and summed, so
    the result matches the adjoint method for tied parameters too.
    """
    theta, x = _check_vectors(spec, theta, x)
    n = spec.n_qubits
    base = _resolve_angles(spec, theta, x)
    jac = np.zeros((len(observables), spec.n_slots))
    for i, g in enumerate(spec.gates):
        if g.kind not in ROTATIONS or g.param_slot is None:
            continue
        plus = base.copy()
        plus[i] += math.pi / 2.0
        minus = base.copy()
        minus[i] -= math.pi / 2.0
        ep = _all_expectations(_run_with_angles(spec, plus), observables, n)
        em = _all_expectations(_run_with_angles(spec, minus), observables, n)
        jac[:, g.param_slot] += (ep - em) / 2.0
    return jac


def expectations(spec: CircuitSpec, theta, x, observables: Sequence[Observable]) -> np.ndarray:
    """All observable expectations after one circuit run."""
    theta, x = _check_vectors(spec, theta, x)
    amps = _run_with_angles(spec, _resolve_angles(spec, theta, x))
    return _all_expectations(amps, observables, spec.n_qubits)


def dump_circuit(spec: CircuitSpec) -> str:
    """One gate per line: ``KIND wire[,wire] [slot:k | angle:v]``."""
    lines = []
    for g in spec.gates:
        parts = [g.kind, ",".join(str(w) for w in g.wires)]
        if g.param_slot is not None:
            parts.append(f"slot:{g.param_slot}")
        elif g.fixed_angle is not None:
            parts.append(f"angle:{g.fixed_angle!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
