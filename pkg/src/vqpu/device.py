"""Virtual-device snapshots, admissibility, and snapshot-derived noise models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Mapping

from .circuit import Circuit, Kind
from .errors import (
    DEVICE_MISMATCH,
    QUBIT_OFFLINE,
    QUBIT_OUT_OF_RANGE,
    SNAPSHOT_INVALID,
    TOPOLOGY_VIOLATION,
    UNSUPPORTED_GATE,
    VqpuError,
)

ONLINE = "ONLINE"
OFFLINE = "OFFLINE"

# Single-qubit gates that correspond to a physical control pulse. Virtual
# frame updates and timing directives (rz, id, delay) never accumulate
# one-qubit depolarizing error.
PHYSICAL_1Q_GATES = frozenset({"sx", "x"})

_QUBIT_KEYS = ("index", "state", "t1_us", "t2_us", "eps_1q", "readout_error")
_EDGE_KEYS = ("src", "dst", "gate", "eps")


def _invalid(message: str, **detail: Any) -> VqpuError:
    return VqpuError(SNAPSHOT_INVALID, message, detail or None)


def _optional_real(value: Any, name: str, lo: float, hi: float | None) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _invalid(f"{name} must be a number or null", field=name)
    value = float(value)
    if not math.isfinite(value) or value < lo or (hi is not None and value > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise _invalid(f"{name}={value} outside {bound}", field=name)
    return value


@dataclass(frozen=True)
class QubitCalibration:
    index: int
    state: str = ONLINE
    t1_us: float | None = None
    t2_us: float | None = None
    eps_1q: float | None = None
    readout_error: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in _QUBIT_KEYS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> QubitCalibration:
        index = data.get("index")
        if isinstance(index, bool) or not isinstance(index, int) or index < 0:
            raise _invalid("qubit index must be a nonnegative integer", index=index)
        state = data.get("state", ONLINE)
        if state not in (ONLINE, OFFLINE):
            raise _invalid(f"qubit {index} state must be ONLINE or OFFLINE", index=index)
        return cls(
            index=index,
            state=state,
            t1_us=_optional_real(data.get("t1_us"), "t1_us", 0.0, None),
            t2_us=_optional_real(data.get("t2_us"), "t2_us", 0.0, None),
            eps_1q=_optional_real(data.get("eps_1q"), "eps_1q", 0.0, 1.0),
            readout_error=_optional_real(data.get("readout_error"), "readout_error", 0.0, 1.0),
        )


@dataclass(frozen=True)
class EdgeCalibration:
    src: int
    dst: int
    gate: str
    eps: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in _EDGE_KEYS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EdgeCalibration:
        src, dst, gate = data.get("src"), data.get("dst"), data.get("gate")
        for name, v in (("src", src), ("dst", dst)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise _invalid(f"edge {name} must be a nonnegative integer", **{name: v})
        if not isinstance(gate, str) or not gate:
            raise _invalid("edge gate must be a non-empty token", src=src, dst=dst)
        return cls(src, dst, gate, _optional_real(data.get("eps"), "eps", 0.0, 1.0))


@dataclass(frozen=True)
class DeviceSnapshot:
    device_id: str
    captured_at: str
    snapshot_version: int
    num_qubits: int
    native_gates: frozenset[str]
    qubits: tuple[QubitCalibration, ...]
    edges: tuple[EdgeCalibration, ...]

    def __post_init__(self) -> None:
        if not self.device_id:
            raise _invalid("device_id must be non-empty")
        if self.num_qubits < 1:
            raise _invalid("num_qubits must be positive")
        if len(self.qubits) != self.num_qubits:
            raise _invalid("qubits list must cover every index exactly once")
        for i, q in enumerate(self.qubits):
            if q.index != i:
                raise _invalid("qubits must be indexed 0..num_qubits-1", index=q.index)
        seen: set[tuple[int, int]] = set()
        for e in self.edges:
            if e.src >= self.num_qubits or e.dst >= self.num_qubits:
                raise _invalid("edge endpoint out of range", src=e.src, dst=e.dst)
            if e.src == e.dst:
                raise _invalid("self-loop edge", src=e.src)
            if (e.src, e.dst) in seen:
                raise _invalid("duplicate directed edge", src=e.src, dst=e.dst)
            if e.gate not in self.native_gates:
                raise _invalid(f"edge gate {e.gate!r} is not native", src=e.src, dst=e.dst)
            seen.add((e.src, e.dst))

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "device_id": self.device_id,
            "captured_at": self.captured_at,
            "snapshot_version": self.snapshot_version,
            "num_qubits": self.num_qubits,
            "native_gates": sorted(self.native_gates),
            "qubits": [q.to_dict() for q in self.qubits],
            "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: (e.src, e.dst))],
        }

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False).encode()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DeviceSnapshot:
        if not isinstance(data, Mapping):
            raise _invalid("snapshot must be a JSON object")
        try:
            num_qubits = data["num_qubits"]
            native = data["native_gates"]
            qubits_raw = data.get("qubits")
            edges_raw = data.get("edges", [])
        except KeyError as exc:
            raise _invalid(f"missing field {exc.args[0]}") from None
        if isinstance(num_qubits, bool) or not isinstance(num_qubits, int):
            raise _invalid("num_qubits must be an integer")
        if not isinstance(native, (list, tuple, set, frozenset)) or not all(
            isinstance(g, str) and g for g in native
        ):
            raise _invalid("native_gates must be a list of tokens")
        if qubits_raw is None:
            qubits_raw = [{"index": i} for i in range(num_qubits)]
        if not isinstance(qubits_raw, list) or not isinstance(edges_raw, list):
            raise _invalid("qubits and edges must be lists")
        qubits = sorted((QubitCalibration.from_dict(q) for q in qubits_raw), key=lambda q: q.index)
        edges = sorted((EdgeCalibration.from_dict(e) for e in edges_raw), key=lambda e: (e.src, e.dst))
        version = data.get("snapshot_version", 0)
        if isinstance(version, bool) or not isinstance(version, int) or version < 0:
            raise _invalid("snapshot_version must be a nonnegative integer")
        return cls(
            device_id=str(data.get("device_id") or ""),
            captured_at=str(data.get("captured_at") or ""),
            snapshot_version=version,
            num_qubits=num_qubits,
            native_gates=frozenset(native),
            qubits=tuple(qubits),
            edges=tuple(edges),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> DeviceSnapshot:
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise _invalid(f"snapshot is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    # -- derived views -------------------------------------------------

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], EdgeCalibration]:
        return {(e.src, e.dst): e for e in self.edges}

    def with_version(self, version: int, captured_at: str) -> DeviceSnapshot:
        return replace(self, snapshot_version=version, captured_at=captured_at)

    def zero_noise(self) -> DeviceSnapshot:
        """Same topology and native set with every error field nulled."""
        return replace(
            self,
            qubits=tuple(replace(q, eps_1q=None, readout_error=None) for q in self.qubits),
            edges=tuple(replace(e, eps=None) for e in self.edges),
        )


# -- admissibility -----------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    ok: bool
    code: str | None = None
    message: str | None = None
    line: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "code": self.code, "message": self.message, "line": self.line}

    def raise_if_rejected(self) -> None:
        if not self.ok:
            raise VqpuError(self.code, self.message, {"line": self.line})


OK = Verdict(True)


def check_admissibility(circuit: Circuit, snapshot: DeviceSnapshot) -> Verdict:
    """Syntactic, linear-time check of a circuit against an advertised snapshot.

    Reports the first violation in instruction order.
    """
    native = snapshot.native_gates
    edges = snapshot.edge_index
    n = snapshot.num_qubits
    qubits = snapshot.qubits

    def qubit_fault(q: int, line: int) -> Verdict | None:
        if q >= n:
            return Verdict(False, QUBIT_OUT_OF_RANGE, f"qubit {q} not on a {n}-qubit device", line)
        if qubits[q].state != ONLINE:
            return Verdict(False, QUBIT_OFFLINE, f"qubit {q} is {qubits[q].state}", line)
        return None

    if circuit.num_qubits > n:
        return Verdict(
            False,
            QUBIT_OUT_OF_RANGE,
            f"circuit declares {circuit.num_qubits} qubits, device has {n}",
            circuit.declaration_line,
        )

    for inst in circuit.instructions:
        if inst.kind is Kind.GATE and inst.gate_symbol not in native:
            return Verdict(False, UNSUPPORTED_GATE, f"gate {inst.gate_symbol!r} is not native", inst.line)
        for q in inst.operands:
            fault = qubit_fault(q, inst.line)
            if fault:
                return fault
        if inst.is_two_qubit and inst.operands not in edges:
            a, b = inst.operands
            return Verdict(False, TOPOLOGY_VIOLATION, f"no coupling {a}->{b}", inst.line)

    if not circuit.measured_qubits:
        for q in range(circuit.num_qubits):
            fault = qubit_fault(q, circuit.declaration_line)
            if fault:
                return fault
    return OK


# -- noise model -------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    one_qubit_depol: Mapping[int, float] = field(default_factory=dict)
    readout_flip: Mapping[int, float] = field(default_factory=dict)
    two_qubit_depol: Mapping[tuple[int, int, str], float] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not (self.one_qubit_depol or self.readout_flip or self.two_qubit_depol)

    def to_dict(self) -> dict[str, Any]:
        return {
            "one_qubit_depol": [[q, p] for q, p in sorted(self.one_qubit_depol.items())],
            "readout_flip": [[q, r] for q, r in sorted(self.readout_flip.items())],
            "two_qubit_depol": [[s, d, g, p] for (s, d, g), p in sorted(self.two_qubit_depol.items())],
        }

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NoiseModel:
        return cls(
            {int(q): float(p) for q, p in data.get("one_qubit_depol", [])},
            {int(q): float(r) for q, r in data.get("readout_flip", [])},
            {(int(s), int(d), str(g)): float(p) for s, d, g, p in data.get("two_qubit_depol", [])},
        )


EMPTY_NOISE = NoiseModel()


def build_noise_model(snapshot: DeviceSnapshot) -> NoiseModel:
    one_q: dict[int, float] = {}
    readout: dict[int, float] = {}
    two_q: dict[tuple[int, int, str], float] = {}
    for q in snapshot.qubits:
        if q.eps_1q:
            one_q[q.index] = q.eps_1q
        if q.readout_error:
            readout[q.index] = min(q.readout_error, 0.5)
    for e in snapshot.edges:
        if e.eps:
            two_q[(e.src, e.dst, e.gate)] = e.eps
    return NoiseModel(one_q, readout, two_q)


# -- diff --------------------------------------------------------------


@dataclass(frozen=True)
class SnapshotDelta:
    num_qubits: tuple[int, int] | None = None
    native_added: frozenset[str] = frozenset()
    native_removed: frozenset[str] = frozenset()
    qubits: tuple[tuple[int, dict | None, dict | None], ...] = ()
    edges: tuple[tuple[tuple[int, int], dict | None, dict | None], ...] = ()

    @property
    def empty(self) -> bool:
        return not (
            self.num_qubits or self.native_added or self.native_removed or self.qubits or self.edges
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_qubits": list(self.num_qubits) if self.num_qubits else None,
            "native_added": sorted(self.native_added),
            "native_removed": sorted(self.native_removed),
            "qubits": [{"index": i, "before": b, "after": a} for i, b, a in self.qubits],
            "edges": [{"edge": list(k), "before": b, "after": a} for k, b, a in self.edges],
        }


def _changed(keys: Iterable, before: Mapping, after: Mapping) -> list:
    out = []
    for k in sorted(keys):
        b, a = before.get(k), after.get(k)
        if b != a:
            out.append((k, b.to_dict() if b else None, a.to_dict() if a else None))
    return out


def snapshot_diff(a: DeviceSnapshot, b: DeviceSnapshot) -> SnapshotDelta:
    if a.device_id != b.device_id:
        raise VqpuError(DEVICE_MISMATCH, f"{a.device_id!r} != {b.device_id!r}")
    qa = {q.index: q for q in a.qubits}
    qb = {q.index: q for q in b.qubits}
    return SnapshotDelta(
        num_qubits=(a.num_qubits, b.num_qubits) if a.num_qubits != b.num_qubits else None,
        native_added=b.native_gates - a.native_gates,
        native_removed=a.native_gates - b.native_gates,
        qubits=tuple(_changed(qa.keys() | qb.keys(), qa, qb)),
        edges=tuple(_changed(a.edge_index.keys() | b.edge_index.keys(), a.edge_index, b.edge_index)),
    )
