"""Hermetic runner: ``vqpu-runner <run_directory>``.

Reads only ``payload.json`` from the run directory and writes either
``result.json`` (exit 0) or ``error.json`` (exit 1), both atomically.
Timings go to a separate ``timings.json`` so that ``result.json`` is a pure
function of the payload bytes and replays byte-for-byte.
"""

from __future__ import annotations

import argparse
import sys
import time
import traceback
from pathlib import Path

from . import device
from .circuit import parse
from .errors import INTERNAL_SIM_ERROR, PAYLOAD_MALFORMED, VqpuError
from .rundir import ERROR_FILE, RESULT_FILE, TIMINGS_FILE, ExecutionPayload, dump_json, write_atomic
from .sim.engine import DEFAULT_MAX_QUBITS, SimulationRequest, Timings, run

EXIT_OK = 0
EXIT_FAILED = 1


def execute(run_dir: str | Path, *, max_qubits: int = DEFAULT_MAX_QUBITS) -> int:
    run_dir = Path(run_dir)
    timings = Timings()
    try:
        payload = ExecutionPayload.load(run_dir)

        t0 = time.perf_counter()
        circuit = parse(payload.circuit_source, payload.dialect)
        t1 = time.perf_counter()
        noise = device.build_noise_model(payload.bound_snapshot)
        t2 = time.perf_counter()
        # second-stage validation against the bound snapshot, not the admission-time view
        device.check_admissibility(circuit, payload.bound_snapshot).raise_if_rejected()
        t3 = time.perf_counter()
        sim = run(SimulationRequest(circuit, noise, payload.shots, payload.seed), max_qubits=max_qubits)
        timings = Timings(t1 - t0, t2 - t1, t3 - t2, sim.timings.simulate_s)

        result = {
            "task_id": payload.task_id,
            "device_id": payload.bound_snapshot.device_id,
            "snapshot_version": payload.bound_snapshot.snapshot_version,
            "claimed_at": payload.claimed_at,
            "shots": sim.shots,
            "seed": sim.seed,
            "counts": dict(sorted(sim.counts.items())),
            "metadata": sim.metadata,
        }
        write_atomic(run_dir / TIMINGS_FILE, dump_json(timings.to_dict()))
        write_atomic(run_dir / RESULT_FILE, dump_json(result))
        return EXIT_OK
    except VqpuError as exc:
        envelope = exc.envelope()
    except Exception as exc:  # any other fault is a simulator-side failure
        envelope = VqpuError(
            INTERNAL_SIM_ERROR, f"{type(exc).__name__}: {exc}", {"traceback": traceback.format_exc()}
        ).envelope()
    try:
        write_atomic(run_dir / ERROR_FILE, dump_json(envelope.to_dict()))
    except OSError:
        pass
    return EXIT_FAILED


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="vqpu-runner", description="Execute one run directory.")
    ap.add_argument("run_directory")
    ap.add_argument("--max-qubits", type=int, default=DEFAULT_MAX_QUBITS)
    args = ap.parse_args(argv)
    if not Path(args.run_directory, "payload.json").is_file():
        envelope = VqpuError(PAYLOAD_MALFORMED, "payload.json not found").envelope()
        if Path(args.run_directory).is_dir():
            write_atomic(Path(args.run_directory, ERROR_FILE), dump_json(envelope.to_dict()))
        print(envelope.message, file=sys.stderr)
        return EXIT_FAILED
    return execute(args.run_directory, max_qubits=args.max_qubits)


if __name__ == "__main__":
    sys.exit(main())
