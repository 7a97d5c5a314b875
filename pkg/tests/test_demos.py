import numpy as np
import pytest

from bmil.demos import (DemoBuffer, NoWindowError, PendulumExpert, PointMassExpert, ReplayBuffer, Trajectory,
                        expert_policy, fetch_window, random_controller, record_demos, replay_return, run_episode)
from bmil.envs import MaskedPendulum, PointMassNav, make_env


def mean_returns(env, n=100):
    expert = expert_policy(env.env_id)
    rng = np.random.default_rng(0)
    exp = np.mean([run_episode(env, expert, np.random.default_rng(s))[2] for s in range(n)])
    rnd = np.mean([run_episode(env, random_controller(env, rng), np.random.default_rng(s))[2] for s in range(n)])
    return exp, rnd


def test_pointmass_expert_idle_at_goal():
    np.testing.assert_array_equal(PointMassExpert()(np.zeros(4)), [0.0, 0.0])


def test_pendulum_expert_idle_upright():
    assert abs(PendulumExpert()(np.zeros(2))[0]) < 1e-12


@pytest.mark.parametrize("env_id", ["masked-pendulum", "pointmass-nav"])
def test_expert_cost_at_most_a_fifth_of_random(env_id):
    # returns are negative costs, so "5x better" means a cost ratio of at least 5
    exp, rnd = mean_returns(make_env(env_id))
    assert rnd / exp >= 5.0, f"expert {exp:.1f} vs random {rnd:.1f}: ratio {rnd / exp:.2f}"


def test_record_fifty_pendulum_demos(tmp_path):
    env = MaskedPendulum()
    path = tmp_path / "p.demo"
    buf = record_demos(env, PendulumExpert(), 50, np.random.default_rng(0), path=path)
    assert len(buf) == 50
    assert all(tr.length == 200 for tr in buf.trajectories)
    assert all(tr.observations.shape[1] == 2 for tr in buf.trajectories)
    back = DemoBuffer.load(path)
    assert len(back) == 50 and back.meta["expert_mean_return"] == buf.meta["expert_mean_return"]
    for a, b in zip(buf.trajectories, back.trajectories):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()


def test_same_seed_same_file(tmp_path):
    env = PointMassNav()
    for name in ("a", "b"):
        record_demos(env, PointMassExpert(), 3, np.random.default_rng(9), path=tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_replayed_demo_recovers_recorded_return():
    env = PointMassNav()
    buf = record_demos(env, PointMassExpert(), 4, np.random.default_rng(2))
    for tr, seed, ret in zip(buf.trajectories, buf.meta["episode_seeds"], buf.meta["returns"]):
        assert replay_return(env, tr, seed) == ret


def traj(n, od=2, ad=1):
    return Trajectory(np.arange(n * od, dtype=float).reshape(n, od), np.zeros((n, ad)))


def test_window_of_full_length():
    w = fetch_window([traj(7)], 7, np.random.default_rng(0))
    assert w.offset == 0 and w.length == 7 and len(w.prefix_observations) == 0


def test_window_offsets_cover_all_starts():
    rng = np.random.default_rng(0)
    seen = np.zeros(196, dtype=int)
    trs = [traj(200)]
    for _ in range(100_000):
        seen[fetch_window(trs, 5, rng).offset] += 1
    assert seen.min() > 0 and len(seen) == 196


def test_window_prefix_matches_offset():
    tr = traj(30)
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = fetch_window([tr], 5, rng)
        if w.offset == 10:
            assert len(w.prefix_observations) == 10
            np.testing.assert_array_equal(w.observations, tr.observations[10:15])
            return
    pytest.fail("offset 10 never drawn")


def test_window_too_long():
    with pytest.raises(NoWindowError):
        fetch_window([traj(3)], 5, np.random.default_rng(0))
    with pytest.raises(NoWindowError):
        fetch_window([], 1, np.random.default_rng(0))


def test_sequential_windows_walk_a_trajectory():
    buf = DemoBuffer([traj(12)])
    rng = np.random.default_rng(0)
    offsets = [buf.next_window(0, 5, rng).offset for _ in range(4)]
    assert offsets == [0, 5, 0, 5]


def test_replay_is_fifo():
    rb = ReplayBuffer(capacity=2)
    for n in (3, 4, 5):
        rb.add(traj(n))
    assert [t.length for t in rb] == [4, 5]


def test_demo_buffer_is_read_only():
    buf = DemoBuffer([traj(3)])
    with pytest.raises(AttributeError):
        buf.trajectories = ()
    assert isinstance(buf.trajectories, tuple)


def test_bad_trajectory_shapes():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros((4, 1)))


def test_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.demo"
    p.write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        DemoBuffer.load(p)
