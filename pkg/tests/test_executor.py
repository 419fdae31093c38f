import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acrl.dual import deficit_identity_check
from acrl.envs import R0, R1, ContinuousMonitoringEnv, monitoring_mdp3
from acrl.executor import (
    ExecConfig,
    execute_acrl,
    occupancy_histogram,
    policy_switch_trace,
    t0_bias_sweep,
)
from acrl.policy import (
    ExactMaximizerPolicy,
    RbfPolicy,
    StaticTabularPolicy,
    TabularPolicy,
    solve_lagrangian_batch,
)


@pytest.fixture(scope="module")
def mdp():
    return monitoring_mdp3()


@pytest.fixture(scope="module")
def maximizer(mdp):
    return ExactMaximizerPolicy(mdp)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(1, 12), st.integers(1, 200), st.integers(0, 1000))
def test_tabular_invariants(eta, T0, K, seed):
    mdp = monitoring_mdp3()
    rep = execute_acrl(mdp, ExactMaximizerPolicy(mdp), ExecConfig(eta, T0, K, seed, record_epochs=True))
    assert np.all(rep.dual.lam >= 0) and np.all(rep.final_lambda >= 0)
    assert occupancy_histogram(rep).sum() == pytest.approx(1.0, abs=1e-9)
    assert rep.total_steps == T0 * K
    assert np.all(deficit_identity_check(rep.epochs, eta) < 1e-12)
    assert rep.slackness <= eta * mdp.reward_bound**2 / 2 + 1e-12


def test_bit_identical_reports(mdp, maximizer):
    cfg = ExecConfig(0.5, 10, 300, 4, record_steps=True)
    a, b = execute_acrl(mdp, maximizer, cfg), execute_acrl(mdp, ExactMaximizerPolicy(mdp), cfg)
    assert a.dual.lam.tobytes() == b.dual.lam.tobytes()
    assert a.average_path.tobytes() == b.average_path.tobytes()
    assert list(a.step_csv_rows()) == list(b.step_csv_rows())


def test_stochastic_policy_depends_on_seed(mdp):
    pol = StaticTabularPolicy(TabularPolicy.uniform(mdp))
    a = execute_acrl(mdp, pol, ExecConfig(0.5, 10, 50, 0))
    b = execute_acrl(mdp, pol, ExecConfig(0.5, 10, 50, 1))
    assert not np.array_equal(a.dual.lam, b.dual.lam)


def test_pinned_agent_has_unit_occupancy(mdp):
    stay = np.zeros((3, 3))
    stay[0, 1] = stay[1, 1] = stay[2, 0] = 1.0
    rep = execute_acrl(mdp, StaticTabularPolicy(TabularPolicy(stay)), ExecConfig(0.5, 5, 20, 0), start_state=R1)
    np.testing.assert_array_equal(rep.occupancy, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(rep.running_average, [0.0, 1.0, 0.0])


def test_default_settings_feasible(mdp, maximizer):
    rep = execute_acrl(mdp, maximizer, ExecConfig(0.5, 10, 1000, 0))
    assert rep.margins.min() >= -0.02
    assert rep.running_average[0] >= 2 / 9 - 0.02
    assert rep.summary()["steps"] == 10_000


def test_fast_maximizer_agrees_with_solver_along_trace(mdp):
    pol = ExactMaximizerPolicy(mdp)
    rep = execute_acrl(mdp, pol, ExecConfig(0.5, 10, 400, 0), probe_state=R1)
    trace = policy_switch_trace(rep, pol, R1)
    reference = solve_lagrangian_batch(mdp, rep.dual.lam)
    for (k, lam, law), ref in zip(trace, reference):
        np.testing.assert_array_equal(law, ref.policy.probs[R1])
        np.testing.assert_array_equal(rep.probe[k], law)


def test_step_csv_schema(mdp, maximizer):
    rep = execute_acrl(mdp, maximizer, ExecConfig(0.5, 2, 3, 0, record_steps=True))
    rows = list(rep.step_csv_rows())
    assert rows[0] == ["t", "state", "action", "r_0", "r_1", "r_2", "epoch", "lambda_1", "lambda_2",
                       "running_avg_0", "running_avg_1", "running_avg_2"]
    assert len(rows) == 7 and rows[1][:3] == [0, R0, R1]
    with pytest.raises(ValueError):
        list(execute_acrl(mdp, maximizer, ExecConfig(0.5, 2, 3, 0)).step_csv_rows())


@pytest.mark.parametrize("kw", [dict(eta_lambda=0.0), dict(T0=0), dict(epochs=0)])
def test_exec_config_validation(kw):
    with pytest.raises(ValueError):
        ExecConfig(**kw)


def test_bad_lambda0(mdp, maximizer):
    with pytest.raises(ValueError, match="lambda0"):
        execute_acrl(mdp, maximizer, ExecConfig(lambda0=[-1.0, 0.0]))


def test_t0_sweep(mdp, maximizer):
    base = ExecConfig(0.5, 10, 1000, 0)
    rows = t0_bias_sweep(mdp, maximizer, base, [1, 10, 100])
    assert [r.T0 for r in rows] == [1, 10, 100] and [r.epochs for r in rows] == [10000, 1000, 100]
    assert min(r.margins.min() for r in rows) >= -0.02
    again = t0_bias_sweep(mdp, maximizer, base, [10, 10, 1])
    np.testing.assert_array_equal(again[0].margins, again[1].margins)
    with pytest.raises(ValueError):
        t0_bias_sweep(mdp, maximizer, base, [5, 5])


def test_continuous_execution_invariants():
    env = ContinuousMonitoringEnv()
    pol = RbfPolicy.grid(env.low, env.high, 4, 5.0, n_spatial=4, n_lambda=2)
    pol.theta = np.random.default_rng(0).normal(size=pol.theta.shape)
    cfg = ExecConfig(0.01, 1, 500, 3, record_steps=True, record_epochs=True, occupancy_bins=10)
    a = execute_acrl(env, pol, cfg)
    b = execute_acrl(env, pol, cfg)
    assert a.dual.lam.tobytes() == b.dual.lam.tobytes()
    assert np.all(a.dual.lam >= 0)
    assert a.occupancy.shape == (10, 10) and a.occupancy.sum() == pytest.approx(1.0)
    assert a.steps.states.shape == (500, 2) and len(a.epochs) == 500
    assert np.all(deficit_identity_check(a.epochs, 0.01) < 1e-12)
    row = list(a.step_csv_rows())[1]
    assert ";" in row[1]


def test_unsupported_environment():
    with pytest.raises(TypeError):
        execute_acrl(object(), None, ExecConfig())
