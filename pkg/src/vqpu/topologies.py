"""Coupling-graph families and helpers for constructing synthetic snapshots."""

from __future__ import annotations

from collections import deque
from typing import Iterable

import numpy as np

from .device import ONLINE, DeviceSnapshot, EdgeCalibration, QubitCalibration
from .errors import isoformat, utcnow

Graph = tuple[int, list[tuple[int, int]]]  # (num_qubits, undirected edge list)


def path(n: int) -> Graph:
    return n, [(i, i + 1) for i in range(n - 1)]


def ring(n: int) -> Graph:
    if n < 3:
        return path(n)
    return n, [(i, (i + 1) % n) for i in range(n)]


def grid(rows: int, cols: int) -> Graph:
    edges = []
    for r in range(rows):
        for c in range(cols):
            q = r * cols + c
            if c + 1 < cols:
                edges.append((q, q + 1))
            if r + 1 < rows:
                edges.append((q, q + cols))
    return rows * cols, edges


def star(n: int) -> Graph:
    return n, [(0, i) for i in range(1, n)]


def heavy_hex_tile() -> Graph:
    """Two fused heavy hexagons with one boundary link qubit removed (20 qubits).

    Hexagon vertices are degree-3 sites; every hexagon side carries a link
    qubit. Labels are assigned in BFS order from an endpoint of the (0, 1)
    coupling, so every prefix ``0..k-1`` induces a connected subgraph.
    """
    # hexagon A: vertices a0..a5, hexagon B shares side (a1, a2)
    ring_a = ["a0", "a1", "a2", "a3", "a4", "a5"]
    ring_b = ["a1", "b1", "b2", "b3", "b4", "a2"]
    sides = set()
    for ring_ in (ring_a, ring_b):
        for i in range(6):
            u, v = ring_[i], ring_[(i + 1) % 6]
            sides.add(tuple(sorted((u, v))))
    edges: list[tuple[str, str]] = []
    for u, v in sorted(sides):
        link = f"l_{u}_{v}"
        edges += [(u, link), (link, v)]
    # drop one boundary link qubit to land on 20 sites
    drop = "l_b2_b3"
    edges = [(u, v) for u, v in edges if drop not in (u, v)]
    adjacency: dict[str, list[str]] = {}
    for u, v in edges:
        adjacency.setdefault(u, []).append(v)
        adjacency.setdefault(v, []).append(u)
    order: list[str] = []
    seen = {"a0"}
    queue = deque(["a0"])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in sorted(adjacency[u]):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    label = {name: i for i, name in enumerate(order)}
    return len(order), sorted(tuple(sorted((label[u], label[v]))) for u, v in edges)


def directed(edges: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    for a, b in edges:
        out += [(a, b), (b, a)]
    return sorted(set(out))


def make_snapshot(
    device_id: str,
    graph: Graph,
    *,
    native_gates: Iterable[str] = ("cz", "sx", "rz", "x", "id", "delay"),
    two_qubit_gate: str = "cz",
    offline: Iterable[int] = (),
    version: int = 1,
) -> DeviceSnapshot:
    """Ideal (null-calibration) snapshot over both directions of every edge."""
    n, edges = graph
    offline = set(offline)
    qubits = tuple(
        QubitCalibration(i, "OFFLINE" if i in offline else ONLINE) for i in range(n)
    )
    return DeviceSnapshot(
        device_id=device_id,
        captured_at=isoformat(utcnow()),
        snapshot_version=version,
        num_qubits=n,
        native_gates=frozenset(native_gates) | {two_qubit_gate},
        qubits=qubits,
        edges=tuple(EdgeCalibration(a, b, two_qubit_gate) for a, b in directed(edges)),
    )


def synthetic_calibration(snapshot: DeviceSnapshot, seed: int) -> DeviceSnapshot:
    """Attach plausible superconducting-style calibration, direction-dependent on edges."""
    rng = np.random.default_rng(seed)
    qubits = tuple(
        QubitCalibration(
            q.index,
            q.state,
            t1_us=round(float(rng.uniform(80, 300)), 2),
            t2_us=round(float(rng.uniform(40, 200)), 2),
            eps_1q=round(float(rng.uniform(1e-4, 1e-3)), 6),
            readout_error=round(float(rng.uniform(0.005, 0.03)), 5),
        )
        for q in snapshot.qubits
    )
    edges = tuple(
        EdgeCalibration(e.src, e.dst, e.gate, round(float(rng.uniform(2e-3, 1e-2)), 6))
        for e in snapshot.edges
    )
    return DeviceSnapshot(
        snapshot.device_id,
        snapshot.captured_at,
        snapshot.snapshot_version,
        snapshot.num_qubits,
        snapshot.native_gates,
        qubits,
        edges,
    )
