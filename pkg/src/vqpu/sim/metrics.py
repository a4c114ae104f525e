"""Distribution helpers: normalisation and total-variation distance."""

from __future__ import annotations

from typing import Mapping

from ..errors import NOT_NORMALIZED, VqpuError

NORMALIZATION_TOL = 1e-9


def normalize(counts: Mapping[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    if total <= 0:
        raise VqpuError(NOT_NORMALIZED, "cannot normalise empty counts")
    return {k: v / total for k, v in counts.items()}


def total_variation_distance(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    for name, dist in (("p", p), ("q", q)):
        s = sum(dist.values())
        if abs(s - 1.0) > NORMALIZATION_TOL:
            raise VqpuError(NOT_NORMALIZED, f"{name} sums to {s!r}", {"sum": s})
    keys = set(p) | set(q)
    return min(1.0, 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys))


def tv_from_counts(counts: Mapping[str, int], reference: Mapping[str, float]) -> float:
    return total_variation_distance(normalize(counts), reference)
