from .engine import DEFAULT_MAX_QUBITS, SimulationRequest, SimulationResult, Timings, run
from .metrics import normalize, total_variation_distance, tv_from_counts
from .oracle import density_oracle

__all__ = [
    "DEFAULT_MAX_QUBITS",
    "SimulationRequest",
    "SimulationResult",
    "Timings",
    "density_oracle",
    "normalize",
    "run",
    "total_variation_distance",
    "tv_from_counts",
]
