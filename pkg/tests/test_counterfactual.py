import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlti.counterfactual import (
    AteQuery,
    ate_client_phi,
    ate_from_estimates,
    ate_measurement,
    ate_state_server,
    monte_carlo_ate,
)
from fedlti.server import CrossBlockEstimates
from fedlti.systems import BlockPartition, GlobalSystem, generate_stable_system, simulate

floats = st.floats(-5, 5, allow_nan=False)


def scalar_pair(A=0.5, B01=0.0, B10=0.3, q=0.01, r=0.01):
    p = BlockPartition.uniform(2, 1, 1, 1)
    A = np.array([[A, 0.1], [0.2, A]])
    B = np.array([[1.0, B01], [B10, 1.0]])
    return GlobalSystem(p, A, B, np.eye(2), q * np.eye(2), r * np.eye(2))


def test_analytic_hand_values():
    assert ate_measurement(2.0, 0.1, 0.0, 1.0).effect == pytest.approx([0.2])
    assert ate_state_server(0.08, 1.0, 3.0).effect == pytest.approx([0.16])
    assert ate_client_phi(1.0, 0.2, 0.5).effect == pytest.approx([0.3])


def test_equal_arms_give_zero():
    u = np.array([0.4, -1.0])
    C, B = np.ones((3, 2)), np.ones((2, 2))
    assert np.array_equal(ate_measurement(C, B, u, u).effect, np.zeros(3))
    assert np.array_equal(ate_state_server(B, u, u).effect, np.zeros(2))
    assert np.array_equal(ate_client_phi(C, u, u).effect, np.zeros(3))


def test_dimension_errors():
    with pytest.raises(ValueError):
        ate_measurement(np.ones((2, 2)), np.ones((3, 2)), [0, 0], [1, 1])
    with pytest.raises(ValueError):
        ate_state_server(np.ones((2, 2)), [0.0], [1.0])
    with pytest.raises(ValueError):
        AteQuery(target=1, source=1, u0=[0.0], u1=[1.0])
    with pytest.raises(ValueError):
        AteQuery(target=1, source=0, u0=[0.0], u1=[1.0], time=0)


def test_missing_estimate_is_key_error():
    est = CrossBlockEstimates.zeros(BlockPartition.uniform(2, 1, 1, 1))
    del est.B_hat[(1, 0)]
    with pytest.raises(KeyError):
        ate_from_estimates(est, AteQuery(1, 0, [0.0], [1.0]))


@settings(max_examples=50)
@given(
    C=st.lists(floats, min_size=4, max_size=4),
    B=st.lists(floats, min_size=4, max_size=4),
    a=st.lists(floats, min_size=2, max_size=2),
    b=st.lists(floats, min_size=2, max_size=2),
    s=floats,
)
def test_effect_is_linear_in_the_input_difference(C, B, a, b, s):
    C, B = np.reshape(C, (2, 2)), np.reshape(B, (2, 2))
    a, b = np.array(a), np.array(b)
    zero = np.zeros(2)
    lhs = ate_measurement(C, B, zero, a + s * b).effect
    rhs = ate_measurement(C, B, zero, a).effect + s * ate_measurement(C, B, zero, b).effect
    assert np.allclose(lhs, rhs, atol=1e-9)
    # only the difference matters
    assert np.allclose(ate_measurement(C, B, a, a + b).effect, ate_measurement(C, B, zero, b).effect, atol=1e-9)


def test_paired_monte_carlo_matches_analytic_per_trial():
    system = generate_stable_system(BlockPartition.uniform(3, 2, 2, 2), 4)
    traj = simulate(system, 30, 4)
    q = AteQuery(target=2, source=0, u0=[0.1, -0.3], u1=[1.0, 0.5], time=12)
    analytic = ate_measurement(system.block("C", 2, 2), system.block("B", 2, 0), q.u0, q.u1).effect
    res = monte_carlo_ate(system, q, trials=200, seed=0, trajectory=traj, keep_samples=True)
    assert np.max(np.abs(res.samples - analytic)) < 1e-10
    assert np.allclose(res.effect, analytic, atol=1e-10)


def test_zero_intervention_monte_carlo_is_exactly_zero():
    system = scalar_pair()
    res = monte_carlo_ate(system, AteQuery(1, 0, [0.7], [0.7]), trials=50, seed=3)
    assert np.array_equal(res.effect, np.zeros(1))


def test_unpaired_monte_carlo_within_three_standard_errors():
    system = scalar_pair()
    res = monte_carlo_ate(system, AteQuery(1, 0, [0.0], [1.0]), trials=100_000, seed=11, paired=False)
    assert abs(res.effect[0] - 0.3) < 3 * res.standard_error[0]


def test_effect_does_not_depend_on_dynamics_or_noise():
    q = AteQuery(1, 0, [0.0], [1.0], time=3)
    effects = []
    for A, noise in ((0.1, 0.01), (0.8, 0.5)):
        system = scalar_pair(A=A, q=noise, r=noise)
        effects.append(monte_carlo_ate(system, q, trials=20, seed=1).effect)
    assert effects[0] == pytest.approx([0.3], abs=1e-10)
    assert effects[1] == pytest.approx([0.3], abs=1e-10)


def test_client_level_agrees_when_phi_carries_the_cross_term():
    # with true blocks, phi_1 = A_10 h_0 + B_10 u_0; shifting u_0 moves phi by B_10 du
    rng = np.random.default_rng(2)
    C, B10 = rng.normal(size=(2, 2)), rng.normal(size=(2, 3))
    u0, u1 = rng.normal(size=3), rng.normal(size=3)
    phi0 = rng.normal(size=2)
    phi1 = phi0 + B10 @ (u1 - u0)
    assert np.allclose(ate_client_phi(C, phi0, phi1).effect, ate_measurement(C, B10, u0, u1).effect, atol=1e-12)


def test_monte_carlo_arguments():
    system = scalar_pair()
    with pytest.raises(ValueError):
        monte_carlo_ate(system, AteQuery(1, 0, [0.0], [1.0]), trials=1, seed=0)
    with pytest.raises(ValueError):
        monte_carlo_ate(system, AteQuery(1, 0, [0.0, 0.0], [1.0, 1.0]), trials=5, seed=0)
    with pytest.raises(ValueError):
        monte_carlo_ate(system, AteQuery(1, None, [0.0], [1.0]), trials=5, seed=0)


def test_result_csv(tmp_path):
    ate_measurement(2.0, 0.1, 0.0, 1.0).to_csv(tmp_path / "ate.csv")
    lines = (tmp_path / "ate.csv").read_text().splitlines()
    assert lines[0] == "coordinate,effect,stderr"
    assert lines[1].startswith("0,0.2")
