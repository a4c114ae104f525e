"""Exact density-matrix evolution for small circuits.

Serves as the reference distribution for the trajectory sampler. Operators
are built as full ``2**n x 2**n`` matrices by Kronecker products, which is
slow but structurally unrelated to the engine's in-place kernels.
"""

from __future__ import annotations

import itertools
from functools import reduce

import numpy as np

from ..circuit import Circuit, Kind
from ..device import PHYSICAL_1Q_GATES, NoiseModel
from ..errors import INTERNAL_SIM_ERROR, QUBIT_LIMIT_EXCEEDED, VqpuError

ORACLE_MAX_QUBITS = 3

_I = np.eye(2, dtype=complex)
_PX = np.array([[0, 1], [1, 0]], dtype=complex)
_PY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_PZ = np.array([[1, 0], [0, -1]], dtype=complex)
_PAULIS = (_I, _PX, _PY, _PZ)
_SX = 0.5 * np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]])


def _full(n: int, local: dict[int, np.ndarray]) -> np.ndarray:
    # qubit n-1 is the leftmost tensor factor (flat index = sum b_q 2**q)
    return reduce(np.kron, [local.get(q, _I) for q in reversed(range(n))])


def _cz(n: int, a: int, b: int) -> np.ndarray:
    diag = [(-1.0 if (k >> a) & 1 and (k >> b) & 1 else 1.0) for k in range(1 << n)]
    return np.diag(np.array(diag, dtype=complex))


def _depolarize(rho: np.ndarray, n: int, qubits: tuple[int, ...], p: float) -> np.ndarray:
    terms = [
        _full(n, dict(zip(qubits, (_PAULIS[i] for i in combo))))
        for combo in itertools.product(range(4), repeat=len(qubits))
        if any(combo)
    ]
    mixed = sum(P @ rho @ P.conj().T for P in terms)
    return (1 - p) * rho + (p / len(terms)) * mixed


def density_oracle(circuit: Circuit, noise: NoiseModel) -> dict[str, float]:
    """Exact output distribution over the measured bitstrings (all keys present)."""
    n = circuit.num_qubits
    if n > ORACLE_MAX_QUBITS:
        raise VqpuError(QUBIT_LIMIT_EXCEEDED, f"oracle supports at most {ORACLE_MAX_QUBITS} qubits", {"num_qubits": n})
    dim = 1 << n
    rho = np.zeros((dim, dim), dtype=complex)
    rho[0, 0] = 1.0

    for inst in circuit.instructions:
        if inst.kind in (Kind.BARRIER, Kind.MEASURE):
            continue
        if inst.kind is Kind.RESET:
            (q,) = inst.operands
            k0 = _full(n, {q: np.array([[1, 0], [0, 0]], dtype=complex)})
            k1 = _full(n, {q: np.array([[0, 1], [0, 0]], dtype=complex)})
            rho = k0 @ rho @ k0.conj().T + k1 @ rho @ k1.conj().T
            continue
        g = inst.gate_symbol
        if len(inst.operands) == 1:
            (q,) = inst.operands
            if g in ("id", "delay"):
                continue
            if g == "rz":
                u = np.diag([1.0, np.exp(1j * inst.parameter)])
            elif g == "sx":
                u = _SX
            elif g == "x":
                u = _PX
            else:
                raise VqpuError(INTERNAL_SIM_ERROR, f"oracle has no semantics for {g!r}")
            U = _full(n, {q: u})
            rho = U @ rho @ U.conj().T
            p = noise.one_qubit_depol.get(q) if g in PHYSICAL_1Q_GATES else None
            if p:
                rho = _depolarize(rho, n, (q,), p)
        else:
            if g != "cz":
                raise VqpuError(INTERNAL_SIM_ERROR, f"oracle has no semantics for {g!r}")
            a, b = inst.operands
            U = _cz(n, a, b)
            rho = U @ rho @ U.conj().T
            p = noise.two_qubit_depol.get((a, b, g))
            if p:
                rho = _depolarize(rho, n, (a, b), p)

    probs = np.clip(np.real(np.diag(rho)), 0.0, None)
    measured = sorted(circuit.effective_measured(), reverse=True)  # MSB first
    m = len(measured)
    dist = np.zeros(1 << m)
    for k in range(dim):
        key = 0
        for q in measured:
            key = (key << 1) | ((k >> q) & 1)
        dist[key] += probs[k]
    # symmetric readout confusion, one measured qubit at a time
    for pos, q in enumerate(measured):
        r = noise.readout_flip.get(q)
        if not r:
            continue
        bit = 1 << (m - 1 - pos)
        flipped = dist[np.arange(1 << m) ^ bit]
        dist = (1 - r) * dist + r * flipped
    dist /= dist.sum()
    return {format(k, f"0{m}b"): float(v) for k, v in enumerate(dist)}
