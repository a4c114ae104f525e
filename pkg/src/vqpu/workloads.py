"""Circuit generators used by the experiments and tests."""

from __future__ import annotations

import math

import numpy as np

from .device import DeviceSnapshot

AMPLIFIED_REPEATS = 10


def amplified_identity(repeats: int = AMPLIFIED_REPEATS) -> str:
    """Two-qubit circuit whose ideal output is exactly |00>.

    Qubit 1 is rotated off the computational basis, ``2 * repeats`` CZ gates
    hit edge (0, 1) (CZ squares to identity), and the rotation is undone with
    three more SX gates (SX**4 = I). Every CZ picks up the edge's depolarizing
    channel, so calibration content shows up directly in the output.
    """
    lines = ["qubits 2", "sx 1"]
    lines += ["cz 0 1"] * (2 * repeats)
    lines += ["sx 1"] * 3
    lines += ["measure 0", "measure 1"]
    return "\n".join(lines) + "\n"


def _maximal_matching(edges: list[tuple[int, int]], rng: np.random.Generator) -> list[tuple[int, int]]:
    order = rng.permutation(len(edges))
    used: set[int] = set()
    matching = []
    for i in order:
        a, b = edges[i]
        if a not in used and b not in used:
            used.update((a, b))
            matching.append((a, b))
    return matching


def random_native_circuit(
    snapshot: DeviceSnapshot,
    num_qubits: int,
    seed: int,
    layers: int = 10,
) -> str:
    """Random native-gate circuit over qubits ``0..num_qubits-1`` of the device.

    ``layers`` rounds of random single-qubit gates (sx or rz with a uniform
    angle on every qubit) are followed by CZ gates on a random maximal matching
    of the device's couplings restricted to those qubits.
    """
    rng = np.random.default_rng(seed)
    lines = [f"qubits {num_qubits}"]
    for _ in range(layers):
        for q in range(num_qubits):
            if rng.random() < 0.5:
                lines.append(f"sx {q}")
            else:
                lines.append(f"rz {q} {rng.uniform(-math.pi, math.pi)!r}")
    inside = sorted(
        {(min(e.src, e.dst), max(e.src, e.dst)) for e in snapshot.edges if e.src < num_qubits and e.dst < num_qubits}
    )
    for a, b in _maximal_matching(inside, rng):
        lines.append(f"cz {a} {b}")
    return "\n".join(lines) + "\n"


def random_dense_circuit(num_qubits: int, seed: int, layers: int = 10) -> str:
    """Random circuit on a path coupling, for engine scaling measurements."""
    rng = np.random.default_rng(seed)
    lines = [f"qubits {num_qubits}"]
    for layer in range(layers):
        for q in range(num_qubits):
            lines.append(f"sx {q}")
            lines.append(f"rz {q} {rng.uniform(-math.pi, math.pi)!r}")
        for q in range(layer % 2, num_qubits - 1, 2):
            lines.append(f"cz {q} {q + 1}")
    return "\n".join(lines) + "\n"
