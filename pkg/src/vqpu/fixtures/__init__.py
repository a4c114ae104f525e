"""Packaged desk-scale device fixtures.

``hh20-noisy`` is a 20-qubit heavy-hex tile with synthetic, direction-dependent
calibration; ``hh20-ideal`` is its null-calibration twin (same topology and
native gate set).
"""

from __future__ import annotations

from importlib import resources

from ..device import DeviceSnapshot

NOISY_DEVICE = "hh20-noisy"
IDEAL_DEVICE = "hh20-ideal"

_FILES = {NOISY_DEVICE: "hh20-noisy.json", IDEAL_DEVICE: "hh20-ideal.json"}


def fixture_path(device_id: str):
    return resources.files(__package__) / _FILES[device_id]


def load_fixture(device_id: str) -> DeviceSnapshot:
    return DeviceSnapshot.from_json(fixture_path(device_id).read_text())


def generate(seed: int = 309) -> dict[str, DeviceSnapshot]:
    """Rebuild both fixtures deterministically (used to produce the JSON files)."""
    from ..topologies import heavy_hex_tile, make_snapshot, synthetic_calibration

    base = make_snapshot(NOISY_DEVICE, heavy_hex_tile(), version=1)
    base = base.with_version(1, "2026-03-09T00:00:00.000000Z")
    noisy = synthetic_calibration(base, seed)
    ideal = DeviceSnapshot.from_dict({**base.to_dict(), "device_id": IDEAL_DEVICE})
    return {NOISY_DEVICE: noisy, IDEAL_DEVICE: ideal}
