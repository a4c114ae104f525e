"""Circuit IR and the line-oriented ``nqasm-1`` native-gate dialect.

The parser is deliberately permissive about gate *names*: any identifier is
accepted as a gate token so that device-dependent legality is decided by
admissibility checking against a snapshot, not here.

Grammar (``#`` starts a comment, blank lines ignored)::

    qubits <N>              first statement
    <gate> <q> [<param>]    one-qubit gate, e.g. rz 0 1.5707963, sx 0, delay 0 100
    <gate> <q1> <q2>        two-qubit gate, e.g. cz 0 1
    measure <q>
    barrier
    reset <q>
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import UNSUPPORTED_DIALECT, ParseError, VqpuError

DIALECT = "nqasm-1"

# Gates whose third token is always a real parameter, and gates known to
# take exactly one or two operands. Anything else is classified by the shape
# of its operands (integer third token => two-qubit).
PARAM_GATES = frozenset({"rz", "delay"})
ONE_QUBIT_GATES = frozenset({"sx", "x", "id"}) | PARAM_GATES
TWO_QUBIT_GATES = frozenset({"cz"})

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT = re.compile(r"[0-9]+\Z")
_REAL = re.compile(r"[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?\Z")


class Kind(str, enum.Enum):
    GATE = "GATE"
    MEASURE = "MEASURE"
    BARRIER = "BARRIER"
    RESET = "RESET"


@dataclass(frozen=True)
class Instruction:
    kind: Kind
    operands: tuple[int, ...] = ()
    gate_symbol: str | None = None
    parameter: float | None = None
    line: int = field(default=0, compare=False)

    @property
    def is_two_qubit(self) -> bool:
        return self.kind is Kind.GATE and len(self.operands) == 2


@dataclass(frozen=True)
class Circuit:
    num_qubits: int
    instructions: tuple[Instruction, ...]
    measured_qubits: tuple[int, ...] = ()
    declaration_line: int = field(default=1, compare=False)

    def effective_measured(self) -> tuple[int, ...]:
        """Qubits sampled at the end: the explicit measure list, or all qubits."""
        if self.measured_qubits:
            return tuple(sorted(set(self.measured_qubits)))
        return tuple(range(self.num_qubits))


class SymbolProfile(NamedTuple):
    gate_symbols: frozenset[str]
    referenced_qubits: frozenset[int]
    two_qubit_pairs: frozenset[tuple[int, int]]


def _qubit(token: str, line: int, num_qubits: int) -> int:
    if not _INT.match(token):
        raise ParseError(f"expected qubit index, got {token!r}", line, token)
    index = int(token)
    if index >= num_qubits:
        raise ParseError(f"qubit {index} outside declared register of {num_qubits}", line, token)
    return index


def _real(token: str, line: int) -> float:
    if not _REAL.match(token):
        raise ParseError(f"expected a decimal literal, got {token!r}", line, token)
    value = float(token)
    if not math.isfinite(value):
        raise ParseError(f"non-finite parameter {token!r}", line, token)
    return value


def parse(source: str, dialect: str = DIALECT) -> Circuit:
    if dialect != DIALECT:
        raise VqpuError(UNSUPPORTED_DIALECT, f"unsupported dialect {dialect!r}", {"dialect": dialect})

    num_qubits: int | None = None
    declaration_line = 1
    instructions: list[Instruction] = []
    measured: list[int] = []

    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        head, *args = text.split()

        if num_qubits is None:
            if head != "qubits":
                raise ParseError("first statement must be 'qubits <N>'", lineno, head)
            if len(args) != 1 or not _INT.match(args[0]) or int(args[0]) < 1:
                token = args[0] if args else None
                raise ParseError("'qubits' takes one positive integer", lineno, token)
            num_qubits = int(args[0])
            declaration_line = lineno
            continue

        if head == "qubits":
            raise ParseError("duplicate 'qubits' declaration", lineno, head)
        if head == "barrier":
            if args:
                raise ParseError("'barrier' takes no operands", lineno, args[0])
            instructions.append(Instruction(Kind.BARRIER, line=lineno))
            continue
        if head in ("measure", "reset"):
            if len(args) != 1:
                raise ParseError(f"'{head}' takes exactly one qubit", lineno, args[1] if args else head)
            q = _qubit(args[0], lineno, num_qubits)
            kind = Kind.MEASURE if head == "measure" else Kind.RESET
            instructions.append(Instruction(kind, (q,), line=lineno))
            if kind is Kind.MEASURE:
                measured.append(q)
            continue

        if not _IDENT.match(head):
            raise ParseError(f"invalid gate token {head!r}", lineno, head)
        if not args or len(args) > 2:
            raise ParseError(f"gate {head!r} needs one or two operands", lineno, head)

        if head in TWO_QUBIT_GATES or (
            head not in ONE_QUBIT_GATES and len(args) == 2 and _INT.match(args[1])
        ):
            if len(args) != 2:
                raise ParseError(f"gate {head!r} takes two qubits", lineno, head)
            a = _qubit(args[0], lineno, num_qubits)
            b = _qubit(args[1], lineno, num_qubits)
            if a == b:
                raise ParseError("two-qubit gate operands must differ", lineno, args[1])
            instructions.append(Instruction(Kind.GATE, (a, b), head, line=lineno))
            continue

        q = _qubit(args[0], lineno, num_qubits)
        param = None
        if head in PARAM_GATES:
            if len(args) != 2:
                raise ParseError(f"gate {head!r} needs a parameter", lineno, head)
            param = _real(args[1], lineno)
            if head == "delay" and param < 0:
                raise ParseError("delay duration must be nonnegative", lineno, args[1])
        elif len(args) == 2:
            if head in ONE_QUBIT_GATES:
                raise ParseError(f"gate {head!r} takes no parameter", lineno, args[1])
            param = _real(args[1], lineno)
        instructions.append(Instruction(Kind.GATE, (q,), head, param, line=lineno))

    if num_qubits is None:
        raise ParseError("empty circuit: missing 'qubits <N>'", 1, None)
    return Circuit(num_qubits, tuple(instructions), tuple(measured), declaration_line)


def serialize(circuit: Circuit) -> str:
    """Canonical text form; ``parse(serialize(c)) == c``."""
    lines = [f"qubits {circuit.num_qubits}"]
    for inst in circuit.instructions:
        if inst.kind is Kind.BARRIER:
            lines.append("barrier")
        elif inst.kind is Kind.MEASURE:
            lines.append(f"measure {inst.operands[0]}")
        elif inst.kind is Kind.RESET:
            lines.append(f"reset {inst.operands[0]}")
        else:
            parts = [inst.gate_symbol, *map(str, inst.operands)]
            if inst.parameter is not None:
                parts.append(repr(float(inst.parameter)))
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def symbol_profile(circuit: Circuit) -> SymbolProfile:
    gates: set[str] = set()
    qubits: set[int] = set()
    pairs: set[tuple[int, int]] = set()
    for inst in circuit.instructions:
        qubits.update(inst.operands)
        if inst.kind is not Kind.GATE:
            continue
        gates.add(inst.gate_symbol)
        if len(inst.operands) == 2:
            pairs.add((inst.operands[0], inst.operands[1]))
    if not circuit.measured_qubits:
        # implicit terminal measurement touches the whole register
        qubits.update(range(circuit.num_qubits))
    return SymbolProfile(frozenset(gates), frozenset(qubits), frozenset(pairs))
