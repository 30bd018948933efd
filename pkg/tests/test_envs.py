import math

import numpy as np
import pytest

from msviper.core import DESK_ROW_EDGES, STOP, StateLayout
from msviper.envs import (ScenarioSpec, check_curriculum, dump_curriculum, episodes_from_csv,
                          episodes_to_csv, grid_curriculum, layout_for, load_curriculum, make_env,
                          rollout, terrain_scenario)
from msviper.envs.encoding import (OccupancyHistory, cast_rays_circles, encode_occupancy,
                                   occupancy_from_ranges, ray_angles)
from msviper.errors import ConfigError, EncoderError, LifecycleError, PlacementError

FORWARD = 2


def slots(env, s):
    n = env.layout.cells_per_slot
    return [s[k * n:(k + 1) * n] for k in range(3)]


# --- reset ---------------------------------------------------------------------------


def test_reset_is_deterministic():
    env = make_env(ScenarioSpec("grid", size=5, rng_seed=3))
    a = env.reset(11)
    pos, goal = env.pos, env.goal
    b = env.reset(11)
    assert np.array_equal(a, b) and env.pos == pos and env.goal == goal


def test_full_density_cannot_be_placed():
    with pytest.raises(PlacementError):
        make_env(ScenarioSpec("grid", size=3, obstacle_density=1.0)).reset(0)


@pytest.mark.parametrize("kind", ["grid", "unicycle", "terrain"])
def test_reset_replicates_first_snapshot(kind):
    env = make_env(ScenarioSpec(kind, size=6, n_static=4, rng_seed=1))
    for seed in range(5):
        s0, s1, s2 = slots(env, env.reset(seed))
        assert np.array_equal(s0, s1) and np.array_equal(s1, s2)


def test_unicycle_rejects_fixed_goal():
    with pytest.raises(PlacementError):
        make_env(ScenarioSpec("unicycle", size=6, placement="fixed_goal")).reset(0)


def test_fixed_goal_shared_across_stages():
    envs = [make_env(s) for s in grid_curriculum(seed=4)]
    goals = set()
    for env in envs:
        for seed in range(5):
            env.reset(seed)
            goals.add(env.goal)
    assert len(goals) == 1


def test_start_radius_limits_start():
    spec = ScenarioSpec("grid", size=7, placement="fixed_goal", start_radius=1, rng_seed=2)
    env = make_env(spec)
    for seed in range(30):
        env.reset(seed)
        assert max(abs(env.pos[0] - env.goal[0]), abs(env.pos[1] - env.goal[1])) <= 1


# --- step ----------------------------------------------------------------------------


def test_stop_keeps_position():
    env = make_env(ScenarioSpec("grid", size=5))
    env.reset(0)
    pos, heading = env.pos, env.heading
    out = env.step(STOP)
    assert env.pos == pos and env.heading == heading
    assert out.froze_this_step


def test_forward_into_wall_collides():
    env = make_env(ScenarioSpec("grid", size=5))
    env.reset(0)
    env.pos, env.heading = (0, 2), 4  # facing -x against the wall
    out = env.step(FORWARD)
    assert out.collision and out.done and env.done


def test_unicycle_forward_into_wall_collides():
    env = make_env(ScenarioSpec("unicycle", size=6))
    env.reset(0)
    env.pos, env.heading = np.array([0.3, 3.0]), math.pi
    out = env.step(FORWARD)
    assert out.collision and out.done


def test_step_after_done():
    env = make_env(ScenarioSpec("grid", size=5, horizon=1))
    env.reset(0)
    env.step(STOP)
    with pytest.raises(LifecycleError):
        env.step(STOP)


def test_action_outside_catalog():
    env = make_env(ScenarioSpec("grid", size=5))
    env.reset(0)
    with pytest.raises(ConfigError):
        env.step(15)


@pytest.mark.parametrize("kind", ["grid", "unicycle", "terrain"])
def test_done_within_horizon(kind):
    env = make_env(ScenarioSpec(kind, size=6, horizon=25))
    for seed in range(5):
        ep = rollout(env, lambda s: STOP, seed, max_steps=1000)
        assert len(ep) <= 25 and env.done


@pytest.mark.parametrize("kind", ["grid", "unicycle", "terrain"])
def test_same_actions_same_outcomes(kind):
    spec = ScenarioSpec(kind, size=6, n_static=3, n_dynamic=1, obstacle_speed=0.5, roughness=1.0, rng_seed=9)
    acts = np.random.default_rng(0).integers(0, 15, size=40)

    def run():
        env = make_env(spec)
        env.reset(5)
        outs = []
        for a in acts:
            if env.done:
                break
            o = env.step(int(a))
            outs.append((o.next_state.tobytes(), o.reward, o.done, o.collision, o.goal_reached))
        return outs

    assert run() == run()


def test_discounted_reward_replays_from_log():
    env = make_env(ScenarioSpec("grid", size=6, n_static=4, horizon=60))
    rng = np.random.default_rng(1)
    eps, total = [], 0
    while total < 200:
        ep = rollout(env, lambda s: int(rng.integers(15)), seed=total)
        eps.append(ep)
        total += len(ep)
    back = episodes_from_csv(episodes_to_csv(eps))
    gamma = 0.95
    for ep, replay in zip(eps, back):
        by_hand = 0.0
        for t, r in enumerate(replay.rewards):
            by_hand += gamma**t * r
        assert ep.discounted_return(gamma) == pytest.approx(by_hand, abs=1e-12)


def test_flat_terrain_has_no_vibration():
    env = make_env(terrain_scenario(roughness=0.0))
    rng = np.random.default_rng(2)
    for seed in range(3):
        env.reset(seed)
        while not env.done:
            out = env.step(int(rng.integers(15)))
            assert out.omega == (0.0, 0.0) and out.vibration == 0.0


def test_terrain_rates_enter_state():
    spec = terrain_scenario(roughness=1.0)
    env = make_env(spec)
    env.reset(0)
    out = env.step(FORWARD)
    idx = env.layout.group("angular_velocity")
    assert np.allclose(out.next_state[list(idx[:2])], np.abs(out.omega))
    assert np.all(out.next_state[list(idx[2:])] == 0)


def test_faster_driving_vibrates_more():
    env = make_env(terrain_scenario(roughness=1.0))

    def mean_vb(action):
        vals = []
        for seed in range(10):
            ep = rollout(env, lambda s: action, seed, max_steps=15)
            vals += ep.vibration
        return np.mean(vals)

    assert mean_vb(2) > mean_vb(6) > 0


# --- encoding ------------------------------------------------------------------------


def test_empty_ranges_encode_to_zero():
    lay = StateLayout()
    angles = ray_angles(lay)
    assert np.all(occupancy_from_ranges(np.full(len(angles), np.inf), angles, lay) == 0)


def test_static_obstacle_repeats_across_slots():
    env = make_env(ScenarioSpec("grid", size=5, n_static=6, rng_seed=0))
    for seed in range(10):
        env.reset(seed)
        for _ in range(3):
            if env.done:
                break
            s = env.step(STOP).next_state
        if not env.done:
            s0, s1, s2 = slots(env, s)
            assert np.array_equal(s0, s1) and np.array_equal(s1, s2)


def test_hand_traced_obstacle_crossing():
    lay = StateLayout()          # 5 columns x 3 rows, 8 rays per column
    angles = ray_angles(lay)
    assert DESK_ROW_EDGES == (0.2, 0.6, 1.2, 2.0)
    script = []
    r = np.full(40, np.inf)
    r[16:24] = 0.3               # column 2 fully blocked in the first band
    script.append(r)
    r = np.full(40, np.inf)
    r[16:24] = 0.9               # then in the second band
    script.append(r)
    r = np.full(40, np.inf)
    r[24:28] = 1.5               # then half of column 3 in the third band
    script.append(r)

    hist = OccupancyHistory(lay)
    snaps = [occupancy_from_ranges(x, angles, lay).reshape(-1) for x in script]
    h = hist.reset(snaps[0])
    hist.push(snaps[0])
    for snap in snaps[1:]:
        h = hist.push(snap)
    s = encode_occupancy(snaps[-1], h, 1.0, 0.0, 3, lay)

    def cell(slot, row, col):
        return s[lay.occupancy_index(slot, row, col)]

    assert cell(0, 2, 3) == 0.5 and s[:15].sum() == 0.5
    assert cell(1, 1, 2) == 1.0 and s[15:30].sum() == 1.0
    assert cell(2, 0, 2) == 1.0 and s[30:45].sum() == 1.0


def test_history_length_mismatch():
    lay = StateLayout()
    with pytest.raises(EncoderError):
        encode_occupancy(np.zeros(15), [np.zeros(15)], 1.0, 0.0, 3, lay)


def test_ray_hits_disc():
    d = cast_rays_circles((0.0, 0.0), 0.0, np.array([0.0, math.pi / 2]), [[2.0, 0.0]], [0.5], 5.0)
    assert d[0] == pytest.approx(1.5)
    assert np.isinf(d[1])


# --- curricula -----------------------------------------------------------------------


def test_grid_curriculum_obstacles_nondecreasing():
    specs = grid_curriculum()
    check_curriculum(specs)
    assert all(b.n_static >= a.n_static for a, b in zip(specs, specs[1:]))
    assert all(layout_for(s) == layout_for(specs[0]) for s in specs)


def test_curriculum_must_not_get_easier():
    with pytest.raises(ConfigError):
        check_curriculum([ScenarioSpec("grid", stage=0, n_static=3), ScenarioSpec("grid", stage=1, n_static=1)])


def test_curriculum_file_round_trip(tmp_path):
    specs = grid_curriculum()
    path = tmp_path / "c.yaml"
    dump_curriculum(specs, path)
    assert load_curriculum(path) == specs


def test_unknown_scenario_key():
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict({"env_kind": "grid", "sizee": 5})
