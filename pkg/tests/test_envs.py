import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acrl.envs import (
    R0,
    R1,
    R2,
    ContinuousMonitoringEnv,
    EnvError,
    TabularCmdp,
    monitoring_mdp3,
    reward_bound,
)


@pytest.fixture
def mdp():
    return monitoring_mdp3()


@pytest.fixture
def cenv():
    return ContinuousMonitoringEnv()


def test_monitoring_step_from_r0(mdp):
    nxt, r = mdp.step(R0, R1)
    assert nxt == R1
    np.testing.assert_array_equal(r, [1, 0, 0])


def test_monitoring_reward_at_r0(mdp):
    np.testing.assert_array_equal(mdp.reward_at(R0, R1), [1, 0, 0])


def test_monitoring_step_r0_to_r1_reward_is_current_state(mdp):
    # indicator of the *current* state: at R0 the reward vector is (1,0,0)
    nxt, r = mdp.step(R0, R1)
    assert nxt == R1
    np.testing.assert_array_equal(r, [1, 0, 0])
    nxt, r = mdp.step(R1, R1)
    assert nxt == R1
    np.testing.assert_array_equal(r, [0, 1, 0])


def test_self_loop_at_r1(mdp):
    nxt, r = mdp.step(R1, R1)
    assert nxt == R1
    np.testing.assert_array_equal(r, [0, 1, 0])


def test_inadmissible_action_names_state_and_action(mdp):
    with pytest.raises(EnvError, match="R2.*not admissible.*R1"):
        mdp.step(R1, R2)
    with pytest.raises(EnvError, match="R0"):
        mdp.step(R0, R0)


def test_monitoring_structure(mdp):
    P = mdp.transition
    for s, acts in enumerate(mdp.actions_per_state):
        for a in acts:
            assert P[s, a].max() == 1.0 and P[s, a, a] == 1.0
    assert mdp.actions_per_state == ((R1, R2), (R0, R1), (R0, R2))
    for i in range(3):
        for s in range(3):
            assert np.all(mdp.rewards[i, s] == float(s == i))
    assert mdp.reward_bound == pytest.approx(2 / 3)


def test_tabular_validation():
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 0.5
    P[:, :, 1] = 0.4
    with pytest.raises(EnvError, match="probability"):
        TabularCmdp(P, np.zeros((2, 2, 2)), [0.1], ((0,), (1,)))
    with pytest.raises(EnvError, match="rewards"):
        monitoring = monitoring_mdp3()
        TabularCmdp(monitoring.transition, monitoring.rewards[:2], [0.1, 0.1], monitoring.actions_per_state)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=60))
def test_trajectory_has_exactly_one_indicator(choices):
    mdp = monitoring_mdp3()
    s = mdp.initial
    for ch in choices:
        a = mdp.actions_per_state[s][ch]
        s2, r = mdp.step(s, a)
        assert r.sum() == 1.0 and set(np.unique(r)) <= {0.0, 1.0}
        assert (s2, tuple(r)) == (lambda x: (x[0], tuple(x[1])))(mdp.step(s, a))
        s = s2


def test_boundary_clipping(cenv):
    nxt, _ = cenv.step([9.9, 5.0], [1.0, 0.0])
    np.testing.assert_allclose(nxt, [10.0, 5.0])


def test_action_clamped_to_max_step(cenv):
    nxt, _ = cenv.step([5.0, 5.0], [3.0, 4.0])
    np.testing.assert_allclose(nxt, [5.6, 5.8])


def test_rewards_inside_and_outside(cenv):
    np.testing.assert_array_equal(cenv.reward_at([2.0, 8.0]), [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(cenv.reward_at([5.0, 5.0]), [0, 0, 0, 0, 0])


def test_continuous_rejects_nonfinite(cenv):
    with pytest.raises(EnvError):
        cenv.step([1.0, 1.0], [np.nan, 0.0])
    with pytest.raises(EnvError):
        cenv.step([1.0, 1.0], [1.0, 0.0, 0.0])


def test_continuous_validation():
    with pytest.raises(EnvError, match="infeasible"):
        ContinuousMonitoringEnv(thresholds=np.array([0.5, 0.3, 0.2, 0.1]))
    with pytest.raises(EnvError, match="inside the bounds"):
        ContinuousMonitoringEnv(regions=np.array([[9.0, 9.0, 11.0, 11.0]]), thresholds=np.array([0.1]))
    ContinuousMonitoringEnv(thresholds=np.array([0.2, 0.15, 0.1, 0.05]))


def test_reward_bound():
    assert reward_bound([0.2, 0.15, 0.1, 0.05]) == pytest.approx(0.95)
    assert reward_bound([0.9]) == pytest.approx(0.9)


@settings(max_examples=200)
@given(
    st.tuples(st.floats(0, 10), st.floats(0, 10)),
    st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
)
def test_continuous_step_stays_in_bounds_and_reward_matches_membership(s, a):
    env = ContinuousMonitoringEnv()
    nxt, r = env.step(np.array(s), np.array(a))
    assert np.all(nxt >= 0) and np.all(nxt <= 10)
    assert np.linalg.norm(nxt - np.array(s)) <= env.max_step + 1e-12
    R = env.regions
    member = [(R[i, 0] <= nxt[0] <= R[i, 2]) and (R[i, 1] <= nxt[1] <= R[i, 3]) for i in range(4)]
    np.testing.assert_array_equal(r[1:], np.array(member, dtype=float))
    assert r[0] == 0.0
