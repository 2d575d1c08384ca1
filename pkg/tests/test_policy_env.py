import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from batchgp import autodiff as ad
from batchgp import env
from batchgp.data import fit_normalizer
from batchgp.policy import act, act_numpy, fix_goal, init_params, make_policy, parameter_count


# policy ------------------------------------------------------------------------

def test_parameter_count():
    assert parameter_count((2, 8, 8, 1)) == (3 * 8) + (9 * 8) + (9 * 1)
    pol = make_policy(2, 1, (8, 8))
    assert pol.n_params == parameter_count((2, 8, 8, 1)) == 105
    assert make_policy(2, 1, (8, 8), goal_conditioned=True).layer_sizes == (4, 8, 8, 1)


def test_he_init_statistics_and_zero_bias():
    pol = init_params((200, 300, 1), seed=1)
    W0, b0 = pol.params[0], pol.params[1]
    assert np.all(b0 == 0)
    assert W0.std() == pytest.approx(np.sqrt(2 / 200), rel=0.02)
    other = init_params((200, 300, 1), seed=1, scheme="standard_normal")
    assert other.params[1].std() > 0.5


def test_init_is_seeded():
    a = make_policy(2, 1, seed=4).to_flat()
    np.testing.assert_array_equal(a, make_policy(2, 1, seed=4).to_flat())
    assert not np.array_equal(a, make_policy(2, 1, seed=5).to_flat())


def test_flat_round_trip():
    pol = make_policy(3, 2, (5, 4))
    flat = pol.to_flat()
    back = pol.from_flat(flat)
    for a, b in zip(pol.params, back.params):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        pol.from_flat(flat[:-1])


def test_act_matches_manual_forward():
    pol = make_policy(2, 1, (4,), scheme="standard_normal", seed=2)
    S = np.random.default_rng(0).standard_normal((5, 2))
    W0, b0, W1, b1 = pol.params
    expected = np.tanh(np.tanh(S @ W0 + b0) @ W1 + b1)
    np.testing.assert_allclose(act_numpy(pol, S), expected, atol=1e-15)


def test_goal_conditioned_needs_goals_and_fix_goal_folds_them():
    pol = make_policy(2, 1, (6,), goal_conditioned=True, scheme="standard_normal")
    S = np.random.default_rng(1).standard_normal((4, 2))
    g = np.array([0.3, -0.1])
    with pytest.raises(ValueError):
        act_numpy(pol, S)
    full = act_numpy(pol, S, np.tile(g, (4, 1)))
    np.testing.assert_allclose(act_numpy(fix_goal(pol, g), S), full, atol=1e-14)


def test_act_shape_error():
    with ad.Tape():
        with pytest.raises(ad.ShapeError):
            act(make_policy(2, 1), np.ones((3, 3)))


def test_policy_gradient_check():
    pol = make_policy(2, 1, (4,), scheme="standard_normal", seed=3)
    S = np.random.default_rng(2).standard_normal((6, 2))
    assert ad.grad_check(lambda p: ad.sum(ad.square(act(pol, S, params=p))), pol.named_params()) < 1e-7


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (7, 2), elements=st.floats(-1e3, 1e3)), st.integers(0, 100))
def test_actions_bounded_property(S, seed):
    u = act_numpy(make_policy(2, 1, (8, 8), scheme="standard_normal", seed=seed), S)
    assert np.all(np.abs(u) <= 1.0)


# plant -------------------------------------------------------------------------

def test_deadband_shape():
    np.testing.assert_array_equal(env.deadband([-0.05, 0.0, 0.1], 0.1), [0.0, 0.0, 0.0])
    assert env.deadband(1.0, 0.1) == pytest.approx(1.0)
    assert env.deadband(-1.0, 0.1) == pytest.approx(-1.0)
    assert env.deadband(0.55, 0.1) == pytest.approx(0.5)


def test_action_inside_deadband_only_gravity_acts():
    p = env.BoomParams()
    s = env.PlantState(0.3, 0.0)
    a, _ = env.step(s, 0.05, p)
    b, _ = env.step(s, 0.0, p)
    assert (a.angle, a.rate) == (b.angle, b.rate)
    expected_rate = -p.dt * p.gravity * np.cos(0.3)
    assert a.rate == pytest.approx(expected_rate)
    assert a.angle == pytest.approx(0.3 + p.dt * expected_rate)


def test_rate_decays_geometrically_without_gravity():
    p = env.with_defaults(gravity=0.0, angle_min=-100.0, angle_max=100.0)
    s = env.PlantState(0.0, 1.0)
    for k in range(1, 30):
        s, _ = env.step(s, 0.0, p)
        assert s.rate == pytest.approx((1 - p.damping * p.dt) ** k, rel=1e-12)


def test_rate_constant_without_gravity_and_damping():
    p = env.with_defaults(gravity=0.0, damping=0.0, angle_min=-100.0, angle_max=100.0)
    s = env.PlantState(0.0, 0.7)
    for _ in range(50):
        s, _ = env.step(s, 0.0, p)
    assert s.rate == 0.7 and s.angle == pytest.approx(50 * 0.05 * 0.7)


def test_hard_stop_zeroes_rate():
    p = env.BoomParams()
    s, _ = env.step(env.PlantState(p.angle_max - 1e-3, 2.0), 1.0, p)
    assert s.angle == p.angle_max and s.rate == 0.0


def test_rate_limit_slows_action_changes():
    p = env.with_defaults(rate_limit=2.0)
    s, _ = env.step(env.PlantState(0.0), 1.0, p)
    assert s.applied_action == pytest.approx(0.1)


def test_noise_is_seeded_and_optional():
    p = env.BoomParams()
    s = env.PlantState(0.0, 0.0)
    _, clean = env.step(s, 0.5, p)
    _, o1 = env.step(s, 0.5, p, np.random.default_rng(0))
    _, o2 = env.step(s, 0.5, p, np.random.default_rng(0))
    np.testing.assert_array_equal(o1, o2)
    assert not np.array_equal(o1, clean)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, 60, elements=st.floats(-5, 5)), st.floats(-1.2, 0.9), st.floats(-3, 3))
def test_angle_stays_within_limits_property(actions, angle, rate):
    p = env.BoomParams()
    traj = env.simulate_open_loop(p, env.PlantState(angle, rate), actions)
    assert np.all(traj[:, 0] >= p.angle_min) and np.all(traj[:, 0] <= p.angle_max)


def test_collect_default_gives_2200_transitions_and_coverage():
    ds = env.collect_excitation_data(seed=0)
    assert ds.n == 2200 and len(ds.times) == 2201
    assert env.angle_coverage(ds) >= 0.8
    again = env.collect_excitation_data(seed=0)
    np.testing.assert_array_equal(ds.log_states, again.log_states)
    other = env.collect_excitation_data(seed=1)
    assert not np.array_equal(ds.log_states, other.log_states)


def test_collect_random_walk_and_short_duration():
    ds = env.collect_excitation_data(duration=10.0, excitation="random_walk", seed=2)
    assert ds.n == 200
    assert np.all(np.abs(ds.actions) <= 1)
    with pytest.raises(ValueError):
        env.collect_excitation_data(duration=0.1)
    with pytest.raises(ValueError):
        env.collect_excitation_data(excitation="bogus")


@pytest.fixture(scope="module")
def small_normalizer():
    return fit_normalizer(env.collect_excitation_data(duration=20.0, seed=0))


def zero_policy(goal_conditioned=False):
    pol = make_policy(2, 1, (4,), goal_conditioned=goal_conditioned)
    return pol.from_flat(np.zeros(pol.n_params))


def test_zero_policy_settles_at_gravity_rest_not_goal(small_normalizer):
    p = env.BoomParams()
    res = env.evaluate_policy(p, zero_policy(), small_normalizer, [0.0], 300,
                              initial=env.PlantState(0.0))
    assert res.angles[0, -1] == pytest.approx(p.angle_min)
    assert res.success_rate() == 0.0


def test_goal_at_initial_state_without_gravity(small_normalizer):
    p = env.with_defaults(gravity=0.0)
    res = env.evaluate_policy(p, zero_policy(), small_normalizer, [0.2], 100, initial=env.PlantState(0.2))
    assert res.metrics[0]["steady_state_error"] < p.noise_std[0]
    assert res.metrics[0]["settling_time"] == 0.0


def test_evaluate_rejects_mismatched_policy(small_normalizer):
    with pytest.raises(ValueError, match="expects 3 inputs"):
        env.evaluate_policy(env.BoomParams(), make_policy(3, 1, (4,)), small_normalizer, [0.0])


def test_eval_outputs_and_csvs(tmp_path, small_normalizer):
    res = env.evaluate_policy(env.BoomParams(), zero_policy(True), small_normalizer, [-0.5, 0.2, -0.3, 0.5],
                              50, n_episodes=2, init_spread=0.1, seed=1)
    assert len(res.metrics) == 8
    assert res.angles.shape == (2, 201)
    res.write_trajectory_csv(tmp_path / "traj.csv")
    res.write_metrics_csv(tmp_path / "m.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "t,phi,phidot,u,goal_phi" and len(lines) == 202
    rows = np.loadtxt(tmp_path / "traj.csv", delimiter=",", skiprows=1)
    assert rows.shape == (201, 5)
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 9


def test_segment_metrics_hand_case():
    angles = np.array([0.0, 0.5, 1.1, 1.02, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    settle, sse, over = env._segment_metrics(angles, 1.0, -0.2, 0.1, 0.05, 0.2)
    assert settle == pytest.approx(0.3)
    assert sse == 0.0
    assert over == pytest.approx(0.1)
