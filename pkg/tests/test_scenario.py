import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from styleplan.errors import ConfigurationError, InputError
from styleplan.geometry import Polyline
from styleplan.scenario import (KINDS, AgentState, EgoState, GenerationParams, Lane, Scenario,
                                TrafficLight, agent_positions, batch_validity_mask, generate_scenario,
                                load_scenario, predict_agents, recenter, save_scenario, step_agents,
                                validity_mask)


def _free_scene(agents):
    lane = Lane(np.array([[-10.0, 0.0], [200.0, 0.0]]), 10.0)
    return Scenario(EgoState(), agents, [lane], lane.centerline)


def test_empty_straight_scene():
    sc = generate_scenario("straight", 7, n_agents=0)
    assert sc.agents == ()
    route = Polyline(sc.route)
    s, _ = route.project(np.zeros((1, 2)))
    assert route.length - s[0] == pytest.approx(200.0, abs=1.0)
    # straight: every route point has zero lateral coordinate
    assert np.abs(sc.route[:, 1]).max() < 1e-9


def test_generation_is_byte_identical():
    a = generate_scenario("curve", 1, n_agents=5)
    b = generate_scenario("curve", 1, n_agents=5)
    assert a.dumps() == b.dumps()
    assert len(a.agents) == 5


def test_agents_inside_lanes_brute_force():
    sc = generate_scenario("straight", 3, n_agents=20)
    assert len(sc.agents) == 20
    for a in sc.agents:
        p = np.asarray(a.position)
        inside = False
        for lane in sc.lanes:
            c = lane.centerline
            # dense brute-force distance to the centreline
            seg = np.linspace(0, 1, 50)[:, None]
            for p0, p1 in zip(c[:-1], c[1:]):
                pts = p0 + seg * (p1 - p0)
                if np.min(np.hypot(*(pts - p).T)) <= lane.width / 2:
                    inside = True
                    break
            if inside:
                break
        assert inside, a


@pytest.mark.parametrize("kind", KINDS)
def test_each_kind_generates_consistent_geometry(kind):
    sc = generate_scenario(kind, 11)
    assert all(l.speed_limit > 0 for l in sc.lanes)
    assert sc.n_agents <= 100
    # ego sits on the route
    _, d = Polyline(sc.route).project(np.zeros((1, 2)))
    assert abs(d[0]) < 1e-6
    if kind == "intersection":
        assert len(sc.traffic_lights) == 1
    if kind == "curve":
        assert sc.curvature_ahead() > 0.005


def test_invalid_generation_params():
    with pytest.raises(ConfigurationError):
        generate_scenario("straight", 0, speed_limit=-5.0)
    with pytest.raises(ConfigurationError):
        generate_scenario("straight", 0, n_agents=101)
    with pytest.raises(ConfigurationError):
        generate_scenario("straight", 0, n_lanes=5)
    with pytest.raises(ConfigurationError):
        generate_scenario("roundabout", 0)
    with pytest.raises(ConfigurationError):
        Lane(np.zeros((2, 2)), speed_limit=0.0)


def test_step_agents_linear_motion():
    sc = _free_scene([AgentState((0.0, 0.0), (10.0, 0.0))])
    moved = step_agents(sc, 0.1)
    assert moved.agents[0].position == pytest.approx((1.0, 0.0))
    assert moved.ego == sc.ego
    assert step_agents(sc, 0.0) == sc
    with pytest.raises(InputError):
        step_agents(sc, -0.1)


def test_step_agents_composes():
    sc = generate_scenario("curve", 4, n_agents=10)
    a = sc
    for _ in range(10):
        a = step_agents(a, 0.1)
    b = step_agents(sc, 1.0)
    np.testing.assert_allclose(agent_positions(a), agent_positions(b), atol=1e-9)
    assert len(a.agents) == len(sc.agents)
    assert all(np.array_equal(x.centerline, y.centerline) for x, y in zip(a.lanes, sc.lanes))


def test_predict_agents_matches_stepping():
    sc = generate_scenario("merge", 5, n_agents=6)
    pos, vel = predict_agents(sc, 5, 0.2)
    s = sc
    for k in range(5):
        s = step_agents(s, 0.2)
        np.testing.assert_allclose(pos[k], agent_positions(s), atol=1e-9)


def test_validity_mask_threshold():
    agents = [AgentState((5.0, 0.0), (0.0, 0.0), 0.59), AgentState((6.0, 0.0), (0.0, 0.0), 1.0),
              AgentState((7.0, 0.0), (0.0, 0.0), 0.6), AgentState((8.0, 0.0), (0.0, 0.0), 0.9, in_range=False)]
    np.testing.assert_array_equal(validity_mask(_free_scene(agents)), [False, True, True, False])
    far = [AgentState((5.0, 0.0), (0.0, 0.0), 1.0, in_range=False)] * 3
    assert not validity_mask(_free_scene(far)).any()
    m = batch_validity_mask([_free_scene(agents)], 6)
    np.testing.assert_array_equal(m[0], [False, True, True, False, False, False])


def test_confidence_outside_unit_interval_rejected():
    with pytest.raises(InputError):
        AgentState((0.0, 0.0), (0.0, 0.0), 1.2)
    with pytest.raises(InputError):
        TrafficLight((0.0, 0.0), "blue")


def test_json_round_trip(tmp_path):
    sc = generate_scenario("intersection", 9, n_agents=7)
    path = tmp_path / "scene.json"
    save_scenario(sc, path)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1
    for key in ("ego", "agents", "lanes", "route", "traffic_lights", "meta"):
        assert key in doc
    assert doc["meta"]["seed"] == 9
    back = load_scenario(path)
    assert back.dumps() == sc.dumps()
    np.testing.assert_array_equal(validity_mask(back), validity_mask(sc))


def test_unsupported_format_version(tmp_path):
    sc = generate_scenario("straight", 1)
    doc = json.loads(sc.dumps())
    doc["format_version"] = 99
    with pytest.raises(InputError):
        Scenario.from_dict(doc)


def test_density_and_curvature():
    agents = [AgentState((float(x), 0.0), (0.0, 0.0)) for x in (10, 20, 49, 51, 120)]
    assert _free_scene(agents).density == pytest.approx(3 / 0.5)
    sc = generate_scenario("curve", 2, curvature=0.02)
    s, c = sc.curvature_profile
    ahead = (s > 60) & (s < 150)
    assert np.median(np.abs(c[ahead])) == pytest.approx(0.02, rel=0.05)


def test_recenter_preserves_relative_geometry():
    sc = generate_scenario("curve", 8, n_agents=6)
    moved = recenter(sc, (10.0, 1.0), 0.1, 9.0)
    d0 = np.hypot(*(agent_positions(sc) - [10.0, 1.0]).T)
    d1 = np.hypot(*agent_positions(moved).T)
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    assert moved.ego.speed == 9.0


def test_slow_lead_is_ahead_in_ego_lane():
    sc = generate_scenario("straight", 12, slow_lead=True, n_agents=3)
    lead = sc.agents[0]
    assert lead.lane == sc.ego_lane and 15.0 <= lead.position[0] <= 35.0
    assert lead.speed <= 0.3 * sc.speed_limit + 1e-9


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(KINDS), seed=st.integers(0, 2**31 - 1), n=st.integers(0, 15))
def test_generation_is_pure(kind, seed, n):
    a = generate_scenario(kind, seed, n_agents=n)
    b = generate_scenario(kind, seed, GenerationParams(n_agents=n))
    assert a.dumps() == b.dumps()
    assert a.n_agents == n


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), dt=st.floats(0.0, 2.0))
def test_step_preserves_count_and_mask(seed, dt):
    sc = generate_scenario("straight", seed, n_agents=5)
    moved = step_agents(sc, dt)
    assert moved.n_agents == sc.n_agents
    np.testing.assert_array_equal(validity_mask(moved), validity_mask(sc))
    np.testing.assert_array_equal(validity_mask(Scenario.loads(sc.dumps())), validity_mask(sc))
