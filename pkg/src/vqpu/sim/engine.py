"""Noisy statevector simulation by Monte-Carlo Pauli trajectories.

All randomness is drawn up front, in a fixed order, from one generator
seeded by the request: per noise site (in circuit order) the shots that
suffer an error and which Pauli they get, then projective-reset outcomes,
then measurement uniforms, then readout flips. The draw order does not
depend on how shots are later batched, so batching and shot-level
parallelism never change the counts for a given seed.

Shots with no error event share a single ideal trajectory; the remaining
shots are evolved together as a batch of statevectors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..circuit import Circuit, Kind
from ..device import PHYSICAL_1Q_GATES, NoiseModel
from ..errors import INTERNAL_SIM_ERROR, QUBIT_LIMIT_EXCEEDED, VqpuError

DEFAULT_MAX_QUBITS = 22
BATCH_AMPLITUDES = 1 << 22

_S = 0.5 * np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]], dtype=np.complex128)
_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
_GATES_1Q = {"sx": _S, "x": _X}
_NOOPS = frozenset({"id", "delay"})


@dataclass(frozen=True)
class SimulationRequest:
    circuit: Circuit
    noise: NoiseModel
    shots: int
    seed: int


@dataclass
class Timings:
    parse_s: float = 0.0
    noise_build_s: float = 0.0
    transpile_s: float = 0.0
    simulate_s: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {
            "parse_s": self.parse_s,
            "noise_build_s": self.noise_build_s,
            "transpile_s": self.transpile_s,
            "simulate_s": self.simulate_s,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Timings:
        return cls(**{k: float(data.get(k, 0.0)) for k in ("parse_s", "noise_build_s", "transpile_s", "simulate_s")})


@dataclass
class SimulationResult:
    counts: dict[str, int]
    shots: int
    seed: int
    timings: Timings = field(default_factory=Timings)
    metadata: dict[str, Any] = field(default_factory=dict)

    def distribution(self) -> dict[str, float]:
        return {k: v / self.shots for k, v in self.counts.items()}


# -- compiled program --------------------------------------------------


@dataclass
class _Op:
    kind: str  # "u", "phase", "cz", "reset"
    qubits: tuple[int, ...]
    matrix: np.ndarray | None = None
    phase: complex = 1.0
    sites: list[int] = field(default_factory=list)
    reset_slot: int = -1


@dataclass
class _Site:
    qubits: tuple[int, ...]
    prob: float
    hit_shots: np.ndarray | None = None
    paulis: np.ndarray | None = None


def _compile(circuit: Circuit, noise: NoiseModel) -> tuple[list[_Op], list[_Site], list[list[Any]]]:
    edge_gates: dict[tuple[int, int], set[str]] = {}
    for (a, b, g) in noise.two_qubit_depol:
        edge_gates.setdefault((a, b), set()).add(g)

    ops: list[_Op] = []
    sites: list[_Site] = []
    mismatches: list[list[Any]] = []
    resets = 0
    for inst in circuit.instructions:
        if inst.kind in (Kind.BARRIER, Kind.MEASURE):
            continue
        if inst.kind is Kind.RESET:
            ops.append(_Op("reset", inst.operands, reset_slot=resets))
            resets += 1
            continue
        g = inst.gate_symbol
        if len(inst.operands) == 1:
            (q,) = inst.operands
            if g in _NOOPS:
                continue
            if g == "rz":
                op = _Op("phase", (q,), phase=complex(np.exp(1j * inst.parameter)))
            elif g in _GATES_1Q:
                op = _Op("u", (q,), matrix=_GATES_1Q[g])
            else:
                raise VqpuError(INTERNAL_SIM_ERROR, f"no simulation semantics for gate {g!r}", {"line": inst.line})
            p = noise.one_qubit_depol.get(q) if g in PHYSICAL_1Q_GATES else None
            if p:
                op.sites.append(len(sites))
                sites.append(_Site((q,), p))
            ops.append(op)
            continue
        if g != "cz":
            raise VqpuError(INTERNAL_SIM_ERROR, f"no simulation semantics for gate {g!r}", {"line": inst.line})
        a, b = inst.operands
        op = _Op("cz", (a, b))
        p = noise.two_qubit_depol.get((a, b, g))
        if p:
            op.sites.append(len(sites))
            sites.append(_Site((a, b), p))
        elif (a, b) in edge_gates and g not in edge_gates[(a, b)]:
            mismatches.append([a, b, g])
        ops.append(op)
    return ops, sites, mismatches


# -- batched kernels on psi of shape (B, 2**n) --------------------------


def _split(psi: np.ndarray, q: int) -> np.ndarray:
    return psi.reshape(psi.shape[0], -1, 2, 1 << q)


def _apply_u(psi: np.ndarray, q: int, u: np.ndarray) -> None:
    v = _split(psi, q)
    a = v[:, :, 0, :].copy()
    b = v[:, :, 1, :]
    v[:, :, 0, :] = u[0, 0] * a + u[0, 1] * b
    v[:, :, 1, :] = u[1, 0] * a + u[1, 1] * b


def _apply_phase(psi: np.ndarray, q: int, phase: complex) -> None:
    _split(psi, q)[:, :, 1, :] *= phase


def _apply_cz(psi: np.ndarray, a: int, b: int) -> None:
    lo, hi = min(a, b), max(a, b)
    v = psi.reshape(psi.shape[0], -1, 2, 1 << (hi - lo - 1), 2, 1 << lo)
    v[:, :, 1, :, 1, :] *= -1


def _apply_pauli(psi: np.ndarray, q: int, which: int) -> None:
    v = _split(psi, q)
    if which == 3:  # Z
        v[:, :, 1, :] *= -1
        return
    a = v[:, :, 0, :].copy()
    if which == 1:  # X
        v[:, :, 0, :] = v[:, :, 1, :]
        v[:, :, 1, :] = a
    else:  # Y
        v[:, :, 0, :] = -1j * v[:, :, 1, :]
        v[:, :, 1, :] = 1j * a


def _apply_reset(psi: np.ndarray, q: int, u: np.ndarray) -> None:
    v = _split(psi, q)
    p1 = np.sum(np.abs(v[:, :, 1, :]) ** 2, axis=(1, 2))
    one = u < p1
    keep = np.where(one[:, None, None], v[:, :, 1, :], v[:, :, 0, :])
    norm = np.sqrt(np.where(one, p1, 1.0 - p1))
    norm[norm == 0] = 1.0
    v[:, :, 0, :] = keep / norm[:, None, None]
    v[:, :, 1, :] = 0


def _check_norm(psi: np.ndarray) -> None:
    norms = np.sum(np.abs(psi) ** 2, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise VqpuError(INTERNAL_SIM_ERROR, "statevector norm drifted", {"max_dev": float(np.max(np.abs(norms - 1.0)))})


def _evolve(
    psi: np.ndarray,
    ops: list[_Op],
    sites: list[_Site],
    rows_for_site: list[tuple[np.ndarray, np.ndarray]] | None,
    reset_u: np.ndarray | None,
    check_norm: bool,
) -> None:
    for op in ops:
        if op.kind == "u":
            _apply_u(psi, op.qubits[0], op.matrix)
        elif op.kind == "phase":
            _apply_phase(psi, op.qubits[0], op.phase)
        elif op.kind == "cz":
            _apply_cz(psi, *op.qubits)
        else:
            _apply_reset(psi, op.qubits[0], reset_u[op.reset_slot])
        if rows_for_site is not None:
            for s in op.sites:
                rows, paulis = rows_for_site[s]
                if rows.size == 0:
                    continue
                qs = sites[s].qubits
                for code in np.unique(paulis):
                    sel = rows[paulis == code]
                    sub = psi[sel]
                    if len(qs) == 1:
                        _apply_pauli(sub, qs[0], int(code))
                    else:
                        pa, pb = divmod(int(code), 4)
                        if pa:
                            _apply_pauli(sub, qs[0], pa)
                        if pb:
                            _apply_pauli(sub, qs[1], pb)
                    psi[sel] = sub
        if check_norm:
            _check_norm(psi)


def _sample(psi: np.ndarray, u: np.ndarray) -> np.ndarray:
    probs = np.abs(psi) ** 2
    cum = np.cumsum(probs, axis=1)
    target = u * cum[:, -1]
    if psi.shape[0] == 1:
        idx = np.searchsorted(cum[0], target, side="right")
    else:
        idx = np.sum(cum <= target[:, None], axis=1)
    return np.minimum(idx, psi.shape[1] - 1)


def run(
    req: SimulationRequest,
    *,
    max_qubits: int = DEFAULT_MAX_QUBITS,
    check_norm: bool = False,
) -> SimulationResult:
    circuit, noise, shots = req.circuit, req.noise, int(req.shots)
    n = circuit.num_qubits
    if n > max_qubits:
        raise VqpuError(QUBIT_LIMIT_EXCEEDED, f"{n} qubits exceeds the limit of {max_qubits}", {"limit": max_qubits})
    if shots < 1:
        raise VqpuError(INTERNAL_SIM_ERROR, "shots must be positive", {"shots": shots})

    start = time.perf_counter()
    try:
        with np.errstate(invalid="raise", divide="raise", over="raise"):
            counts, metadata = _run(circuit, noise, shots, req.seed, check_norm)
    except VqpuError:
        raise
    except (FloatingPointError, MemoryError, ValueError, IndexError) as exc:
        raise VqpuError(INTERNAL_SIM_ERROR, f"{type(exc).__name__}: {exc}") from exc
    elapsed = time.perf_counter() - start
    return SimulationResult(counts, shots, req.seed, Timings(simulate_s=elapsed), metadata)


def _run(circuit: Circuit, noise: NoiseModel, shots: int, seed: int, check_norm: bool):
    n = circuit.num_qubits
    dim = 1 << n
    ops, sites, mismatches = _compile(circuit, noise)
    rng = np.random.Generator(np.random.PCG64(seed & ((1 << 64) - 1)))

    for site in sites:
        hit = np.flatnonzero(rng.random(shots) < site.prob)
        site.hit_shots = hit
        site.paulis = rng.integers(1, 4 if len(site.qubits) == 1 else 16, size=hit.size)
    n_resets = sum(1 for op in ops if op.kind == "reset")
    reset_u = rng.random((n_resets, shots)) if n_resets else None
    meas_u = rng.random(shots)
    measured = circuit.effective_measured()
    flips = {}
    for q in measured:
        r = noise.readout_flip.get(q)
        if r:
            flips[q] = rng.random(shots) < r

    outcomes = np.empty(shots, dtype=np.int64)
    if n_resets:
        dirty = np.arange(shots)
    else:
        hits = [s.hit_shots for s in sites if s.hit_shots.size]
        dirty = np.unique(np.concatenate(hits)) if hits else np.empty(0, dtype=np.int64)

    clean_mask = np.ones(shots, dtype=bool)
    clean_mask[dirty] = False
    trajectories = 0
    if clean_mask.any():
        psi = np.zeros((1, dim), dtype=np.complex128)
        psi[0, 0] = 1.0
        _evolve(psi, ops, sites, None, None, check_norm)
        clean = np.flatnonzero(clean_mask)
        probs = np.abs(psi[0]) ** 2
        cum = np.cumsum(probs)
        idx = np.searchsorted(cum, meas_u[clean] * cum[-1], side="right")
        outcomes[clean] = np.minimum(idx, dim - 1)
        trajectories += 1

    batch = max(1, BATCH_AMPLITUDES >> n)
    for b0 in range(0, dirty.size, batch):
        rows = dirty[b0 : b0 + batch]
        psi = np.zeros((rows.size, dim), dtype=np.complex128)
        psi[:, 0] = 1.0
        local = []
        for site in sites:
            pos = np.searchsorted(rows, site.hit_shots)
            inside = (pos < rows.size) & (rows[np.minimum(pos, rows.size - 1)] == site.hit_shots)
            local.append((pos[inside], site.paulis[inside]))
        _evolve(psi, ops, sites, local, reset_u[:, rows] if reset_u is not None else None, check_norm)
        outcomes[rows] = _sample(psi, meas_u[rows])
        trajectories += rows.size

    key = np.zeros(shots, dtype=np.int64)
    for q in sorted(measured, reverse=True):
        bit = (outcomes >> q) & 1
        if q in flips:
            bit = bit ^ flips[q]
        key = (key << 1) | bit
    m = len(measured)
    values, freq = np.unique(key, return_counts=True)
    counts = {format(int(v), f"0{m}b"): int(c) for v, c in zip(values, freq)}
    metadata: dict[str, Any] = {"trajectories": trajectories}
    if mismatches:
        metadata["gate_edge_mismatches"] = mismatches
    return counts, metadata
