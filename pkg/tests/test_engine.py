from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import BELL
from hypothesis import given, settings
from hypothesis import strategies as st

from vqpu.circuit import parse
from vqpu.device import NoiseModel, build_noise_model
from vqpu.errors import INTERNAL_SIM_ERROR, NOT_NORMALIZED, QUBIT_LIMIT_EXCEEDED, VqpuError
from vqpu.sim.engine import SimulationRequest, run
from vqpu.sim.metrics import normalize, total_variation_distance, tv_from_counts
from vqpu.sim.oracle import density_oracle
from vqpu.workloads import amplified_identity, random_dense_circuit, random_native_circuit


def simulate(source: str, noise: NoiseModel = NoiseModel(), shots: int = 1000, seed: int = 1, **kw):
    return run(SimulationRequest(parse(source), noise, shots, seed), **kw)


def within_sigma(counts: dict[str, int], expected: dict[str, float], shots: int, k: float = 5.0) -> bool:
    for key in set(counts) | set(expected):
        p = expected.get(key, 0.0)
        sigma = math.sqrt(max(p * (1 - p), 1e-12) / shots)
        if abs(counts.get(key, 0) / shots - p) > k * sigma + 1e-12:
            return False
    return True


# -- examples --------------------------------------------------------------


def test_bell_pair_splits_evenly():
    res = simulate(BELL, shots=10_000, seed=3)
    assert set(res.counts) == {"00", "11"}
    assert sum(res.counts.values()) == 10_000
    assert within_sigma(res.counts, {"00": 0.5, "11": 0.5}, 10_000)


def test_readout_error_on_ground_state():
    noise = NoiseModel(readout_flip={0: 0.1})
    res = simulate("qubits 1\nmeasure 0", noise, shots=100_000, seed=11)
    assert within_sigma(res.counts, {"0": 0.9, "1": 0.1}, 100_000)


def test_same_seed_same_counts_different_seed_differs(noisy):
    source = random_native_circuit(noisy, 6, seed=5)
    noise = build_noise_model(noisy)
    a = simulate(source, noise, shots=4000, seed=77)
    b = simulate(source, noise, shots=4000, seed=77)
    c = simulate(source, noise, shots=4000, seed=78)
    assert a.counts == b.counts
    assert a.counts != c.counts


def test_measured_subset_orders_highest_qubit_first():
    res = simulate("qubits 3\nx 2\nmeasure 0\nmeasure 2", shots=10)
    assert res.counts == {"10": 10}
    res = simulate("qubits 3\nx 0", shots=10)
    assert res.counts == {"001": 10}


def test_rz_only_circuit_is_noise_free_even_with_full_depolarizing():
    noise = NoiseModel(one_qubit_depol={0: 1.0})
    res = simulate("qubits 1\nrz 0 0.3\nrz 0 1.1\nid 0\ndelay 0 10", noise, shots=5000)
    assert res.counts == {"0": 5000}


def test_depolarizing_after_x():
    # X|0> = |1>; the X and Y components of the channel flip it back: P(0) = 2p/3.
    noise = NoiseModel(one_qubit_depol={0: 0.3})
    res = simulate("qubits 1\nx 0", noise, shots=100_000, seed=2)
    assert within_sigma(res.counts, {"0": 0.2, "1": 0.8}, 100_000)


def test_two_qubit_depolarizing_is_directional():
    # Twelve of the fifteen two-qubit Paulis flip a bit of |00>: P(00) = 1 - 0.8p.
    noise = NoiseModel(two_qubit_depol={(0, 1, "cz"): 0.5})
    forward = simulate("qubits 2\ncz 0 1", noise, shots=100_000, seed=4)
    assert abs(forward.counts["00"] / 100_000 - 0.6) < 5 * math.sqrt(0.24 / 100_000)
    reverse = simulate("qubits 2\ncz 1 0", noise, shots=1000, seed=4)
    assert reverse.counts == {"00": 1000}


def test_gate_edge_mismatch_is_flagged():
    noise = NoiseModel(two_qubit_depol={(0, 1, "ecr"): 0.1})
    res = simulate("qubits 2\ncz 0 1", noise, shots=10)
    assert res.metadata["gate_edge_mismatches"] == [[0, 1, "cz"]]
    assert "gate_edge_mismatches" not in simulate("qubits 2\ncz 0 1", shots=10).metadata


def test_reset_matches_oracle():
    source = "qubits 2\nsx 0\ncz 0 1\nreset 0\nsx 0\nsx 1\nmeasure 0\nmeasure 1"
    noise = NoiseModel(one_qubit_depol={0: 0.1, 1: 0.05}, readout_flip={1: 0.02})
    res = simulate(source, noise, shots=100_000, seed=9)
    assert within_sigma(res.counts, density_oracle(parse(source), noise), 100_000)


def test_qubit_limit():
    with pytest.raises(VqpuError) as exc:
        simulate("qubits 5\nsx 0", max_qubits=4)
    assert exc.value.code == QUBIT_LIMIT_EXCEEDED


def test_unsupported_gate_is_internal_error():
    with pytest.raises(VqpuError) as exc:
        simulate("qubits 1\nh 0")
    assert exc.value.code == INTERNAL_SIM_ERROR


def test_norm_check_holds_on_dense_circuit():
    noise = NoiseModel(one_qubit_depol={q: 0.01 for q in range(8)})
    res = simulate(random_dense_circuit(8, seed=2), noise, shots=200, check_norm=True)
    assert sum(res.counts.values()) == 200
    assert res.metadata["trajectories"] >= 2


def test_clean_shots_share_one_trajectory():
    assert simulate(BELL, shots=5000).metadata["trajectories"] == 1


def test_amplified_identity_is_ground_state_when_ideal():
    assert density_oracle(parse(amplified_identity()), NoiseModel())["00"] == pytest.approx(1.0)
    assert simulate(amplified_identity(), shots=2000).counts == {"00": 2000}


# -- oracle ----------------------------------------------------------------


def test_oracle_examples():
    assert density_oracle(parse("qubits 2\nmeasure 0\nmeasure 1"), NoiseModel()) == {
        "00": 1.0,
        "01": 0.0,
        "10": 0.0,
        "11": 0.0,
    }
    d = density_oracle(parse("qubits 1"), NoiseModel(readout_flip={0: 0.2}))
    assert d == pytest.approx({"0": 0.8, "1": 0.2})
    d = density_oracle(parse("qubits 1\nx 0"), NoiseModel(one_qubit_depol={0: 0.3}))
    assert d == pytest.approx({"0": 0.2, "1": 0.8})
    d = density_oracle(parse("qubits 2\ncz 0 1"), NoiseModel(two_qubit_depol={(0, 1, "cz"): 0.5}))
    assert d["00"] == pytest.approx(0.6)


def test_oracle_refuses_large_circuits():
    with pytest.raises(VqpuError) as exc:
        density_oracle(parse("qubits 4"), NoiseModel())
    assert exc.value.code == QUBIT_LIMIT_EXCEEDED


# -- metrics ---------------------------------------------------------------


def test_total_variation_examples():
    assert total_variation_distance({"0": 1.0}, {"0": 1.0}) == 0.0
    assert total_variation_distance({"0": 1.0}, {"1": 1.0}) == 1.0
    assert total_variation_distance({"00": 0.5, "11": 0.5}, {"00": 1.0}) == pytest.approx(0.5)
    assert tv_from_counts({"0": 3, "1": 1}, {"0": 0.5, "1": 0.5}) == pytest.approx(0.25)


def test_total_variation_rejects_unnormalised():
    with pytest.raises(VqpuError) as exc:
        total_variation_distance({"0": 0.7}, {"0": 1.0})
    assert exc.value.code == NOT_NORMALIZED
    with pytest.raises(VqpuError):
        normalize({})


@given(
    st.dictionaries(st.sampled_from(["00", "01", "10", "11"]), st.integers(1, 100), min_size=1),
    st.dictionaries(st.sampled_from(["00", "01", "10", "11"]), st.integers(1, 100), min_size=1),
)
def test_total_variation_is_a_bounded_symmetric_metric(a, b):
    p, q = normalize(a), normalize(b)
    d = total_variation_distance(p, q)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(total_variation_distance(q, p))
    assert total_variation_distance(p, p) == pytest.approx(0.0, abs=1e-12)


# -- properties ------------------------------------------------------------


@st.composite
def small_noisy_circuits(draw):
    n = draw(st.integers(1, 3))
    q = st.integers(0, n - 1)
    lines = [f"qubits {n}"]
    for _ in range(draw(st.integers(0, 8))):
        kind = draw(st.sampled_from(["sx", "x", "rz", "cz", "reset"]))
        if kind == "cz":
            if n > 1:
                a, b = draw(st.lists(q, min_size=2, max_size=2, unique=True))
                lines.append(f"cz {a} {b}")
        elif kind == "rz":
            lines.append(f"rz {draw(q)} {draw(st.floats(-3.2, 3.2))!r}")
        else:
            lines.append(f"{kind} {draw(q)}")
    prob = st.floats(0.0, 0.3)
    noise = NoiseModel(
        one_qubit_depol={i: draw(prob) for i in range(n)},
        two_qubit_depol={(a, b, "cz"): draw(prob) for a in range(n) for b in range(n) if a != b},
        readout_flip={i: draw(prob) for i in range(n)},
    )
    return "\n".join(lines), noise


@settings(max_examples=25, deadline=None)
@given(small_noisy_circuits(), st.integers(0, 2**32))
def test_counts_are_well_formed_and_reproducible(case, seed):
    source, noise = case
    a = simulate(source, noise, shots=500, seed=seed)
    n = parse(source).num_qubits
    assert sum(a.counts.values()) == 500
    assert all(len(k) == n and set(k) <= {"0", "1"} for k in a.counts)
    assert simulate(source, noise, shots=500, seed=seed).counts == a.counts


def test_ideal_probabilities_match_oracle_exactly_on_basis_states():
    rng = np.random.default_rng(0)
    for _ in range(20):
        bits = rng.integers(0, 2, size=3)
        source = "qubits 3\n" + "".join(f"x {q}\n" for q in range(3) if bits[q])
        key = "".join(str(b) for b in bits[::-1])
        assert density_oracle(parse(source), NoiseModel())[key] == pytest.approx(1.0)
        assert simulate(source, shots=50).counts == {key: 50}
