import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlti.systems import (
    BlockPartition,
    GlobalSystem,
    InterventionSpec,
    Trajectory,
    assemble_blocks,
    extract_block,
    generate_stable_system,
    simulate,
    spectral_radius,
)


def scalar_system(A, B, C=1.0, Q=0.0, R=0.0):
    p = BlockPartition([1], [1], [1])
    return GlobalSystem(p, [[A]], [[B]], [[C]], [[Q]], [[R]])


def test_partition_offsets_and_totals():
    p = BlockPartition([2, 1, 3], [1, 1, 2], [2, 2, 1])
    assert (p.P, p.U, p.D) == (6, 4, 5)
    assert p.offsets("state") == (0, 2, 3)
    assert p.slice("input", 2) == slice(2, 4)


@pytest.mark.parametrize("dims", [([], [], []), ([0], [1], [1]), ([1, 1], [1], [1, 1])])
def test_partition_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        BlockPartition(*dims)


def test_masked_block_is_zero():
    p = BlockPartition.uniform(2, 2, 2, 2)
    s = generate_stable_system(p, seed=3, coupling_mask=[[1, 0], [1, 1]])
    assert np.all(s.block("A", 0, 1) == 0.0)
    assert np.any(s.block("A", 1, 0) != 0.0)


@given(seed=st.integers(0, 10_000), target=st.floats(0.05, 0.99))
@settings(max_examples=25, deadline=None)
def test_spectral_radius_bound(seed, target):
    s = generate_stable_system(BlockPartition.uniform(3, 2, 1, 2), seed, spectral_target=target)
    assert spectral_radius(s.A) <= target + 1e-9
    assert s.is_stable()


def test_generated_system_structure():
    p = BlockPartition([2, 3], [1, 2], [2, 1])
    s = generate_stable_system(p, seed=0)
    assert np.all(s.block("C", 0, 1) == 0) and np.all(s.block("C", 1, 0) == 0)
    for m in range(2):
        C = s.block("C", m, m)
        assert np.linalg.matrix_rank(C) == C.shape[0]
    assert np.allclose(s.Q, 0.01 * np.eye(5)) and np.allclose(s.R, 0.01 * np.eye(3))


def test_generation_is_deterministic(tmp_path):
    p = BlockPartition.uniform(2, 2, 2, 2)
    a, b = generate_stable_system(p, 11), generate_stable_system(p, 11)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize("target", [0.0, 1.0, -0.2])
def test_invalid_spectral_target(target):
    with pytest.raises(ValueError):
        generate_stable_system(BlockPartition.uniform(2, 1, 1, 1), 0, spectral_target=target)


def test_mask_errors():
    p = BlockPartition.uniform(2, 1, 1, 1)
    with pytest.raises(ValueError):
        generate_stable_system(p, 0, coupling_mask=[[1, 1, 1]])
    with pytest.raises(ValueError):
        generate_stable_system(p, 0, coupling_mask=[[0, 1], [1, 1]])


def test_system_rejects_coupled_C():
    p = BlockPartition.uniform(2, 1, 1, 1)
    with pytest.raises(ValueError):
        GlobalSystem(p, np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)), np.eye(2), np.eye(2))


def test_system_roundtrip(tmp_path):
    s = generate_stable_system(BlockPartition([1, 2], [2, 1], [1, 1]), 5)
    s.save(tmp_path / "s.json")
    t = GlobalSystem.load(tmp_path / "s.json")
    for name in "ABCQR":
        assert np.array_equal(getattr(s, name), getattr(t, name))
    assert t.partition == s.partition and t.seed == 5


def test_identity_dynamics():
    s = scalar_system(1.0, 0.0)
    traj = simulate(s, 10, seed=0, inputs=np.zeros((10, 1)), initial_state=[1.0])
    assert np.all(traj.states == 1.0) and np.all(traj.measurements == 1.0)


def test_hand_recursion():
    s = scalar_system(0.5, 0.3, C=2.0)
    traj = simulate(s, 1, seed=0, inputs=np.array([[2.0]]))
    assert traj.states[1, 0] == pytest.approx(0.6, abs=1e-15)
    assert traj.measurements[0, 0] == pytest.approx(1.2, abs=1e-15)


def test_shapes():
    s = generate_stable_system(BlockPartition([1, 2], [2, 1], [3, 1]), 0)
    traj = simulate(s, 7, seed=1)
    assert traj.states.shape == (8, 3) and traj.inputs.shape == (7, 3) and traj.measurements.shape == (7, 4)
    assert traj.client_measurements(0).shape == (7, 3)


@given(seed=st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_zero_noise_recursion(seed):
    base = generate_stable_system(BlockPartition([1, 2], [1, 1], [1, 2]), seed)
    s = GlobalSystem(base.partition, base.A, base.B, base.C, np.zeros((3, 3)), np.zeros((3, 3)))
    traj = simulate(s, 20, seed)
    resid = traj.states[1:] - traj.states[:-1] @ s.A.T - traj.inputs @ s.B.T
    assert np.abs(resid).max() <= 1e-12
    assert np.abs(traj.measurements - traj.states[1:] @ s.C.T).max() <= 1e-12


def test_intervention_common_random_numbers():
    s = generate_stable_system(BlockPartition.uniform(2, 2, 2, 2), 4)
    t_star = 5
    base = simulate(s, 12, seed=9)
    iv = simulate(s, 12, seed=9, interventions=[InterventionSpec(1, t_star, [3.0, -1.0])])
    assert np.array_equal(iv.inputs[t_star, 2:], [3.0, -1.0])
    assert np.array_equal(iv.states[: t_star + 1], base.states[: t_star + 1])
    assert np.array_equal(iv.measurements[:t_star], base.measurements[:t_star])
    assert not np.allclose(iv.states[t_star + 1], base.states[t_star + 1])
    # only the intervened input changes
    mask = np.ones_like(base.inputs, dtype=bool)
    mask[t_star, 2:] = False
    assert np.array_equal(iv.inputs[mask], base.inputs[mask])


@pytest.mark.parametrize("spec", [InterventionSpec(2, 0, [0.0]), InterventionSpec(0, 10, [0.0])])
def test_intervention_out_of_range(spec):
    s = generate_stable_system(BlockPartition.uniform(2, 1, 1, 1), 0)
    with pytest.raises(IndexError):
        simulate(s, 10, 0, interventions=[spec])


def test_extract_block_examples():
    p = BlockPartition([1, 1], [1, 1], [1, 1])
    assert np.array_equal(extract_block(np.eye(2), p, ("state", "state"), 1, 1), [[1.0]])
    C = np.diag([2.0, 3.0])
    assert np.array_equal(extract_block(C, p, ("measurement", "state"), 0, 1), [[0.0]])
    with pytest.raises(IndexError):
        extract_block(np.eye(2), p, ("state", "state"), 2, 0)


@given(seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_block_roundtrip(seed):
    rng = np.random.default_rng(seed)
    p = BlockPartition(list(rng.integers(1, 4, 3)), list(rng.integers(1, 4, 3)), list(rng.integers(1, 4, 3)))
    roles = ("state", "input")
    X = rng.normal(size=(p.P, p.U))
    blocks = {(m, n): extract_block(X, p, roles, m, n) for m in range(3) for n in range(3)}
    assert np.array_equal(assemble_blocks(blocks, p, roles), X)


def test_trajectory_csv_roundtrip(tmp_path):
    s = generate_stable_system(BlockPartition([1, 2], [2, 1], [1, 2]), 2)
    traj = simulate(s, 15, 3)
    traj.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv", s.partition)
    for name in ("states", "inputs", "measurements"):
        assert np.array_equal(getattr(traj, name), getattr(back, name))
