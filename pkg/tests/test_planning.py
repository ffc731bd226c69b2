import numpy as np
import pytest
import torch

import styleplan.planning as planning
from styleplan.diffusion import DenoiserConfig, Planner, Telemetry, build_schedule
from styleplan.encoder import EncoderConfig, build_inputs
from styleplan.errors import ConfigurationError, NumericalError
from styleplan.guidance import build_context, collision_energy
from styleplan.planning import (PlannerBundle, closed_loop, evaluate, obstacle_suite, plan, scenario_suite,
                                variant_flags)
from styleplan.scenario import generate_scenario


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    m = Planner(EncoderConfig(d_model=16, n_heads=4, n_max=3),
                DenoiserConfig(width=32, n_blocks=1, time_dim=16, n_queries=1)).eval()
    return PlannerBundle(m, build_schedule(T=20))


def test_variant_flags():
    assert variant_flags("full") == (False, False)
    assert variant_flags("fixed_attention") == (True, False)
    assert variant_flags("fixed_guidance") == (False, True)
    assert variant_flags("full_ablation") == (True, True)
    with pytest.raises(ConfigurationError):
        variant_flags("no_encoder")


def test_rollout_log_length_and_reproducibility(tiny):
    sc = generate_scenario("merge", 3, n_agents=4)
    a = closed_loop(tiny, [sc], ["normal"], seed=5, horizon=2.0)[0]
    b = closed_loop(tiny, [sc], ["normal"], seed=5, horizon=2.0)[0]
    assert len(a.ego) == round(2.0 / 0.1) + 1
    assert a.agents.shape == (21, 4, 2) and len(a.headings) == 21
    assert len(a.plans) == 4
    assert np.array_equal(a.ego, b.ego) and np.array_equal(a.headings, b.headings)
    assert a.report is not None


def test_rollout_truncates_on_planner_failure(tiny, monkeypatch):
    real = planning.plan
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise NumericalError("injected", step=7)
        return real(*args, **kwargs)

    monkeypatch.setattr(planning, "plan", flaky)
    lg = closed_loop(tiny, [generate_scenario("straight", 0, n_agents=2)], ["normal"], seed=1, horizon=3.0)[0]
    assert lg.failed and "injected" in lg.failure
    assert len(lg.ego) == 11
    assert lg.report is not None


def test_fixed_attention_removes_distance_bias(tiny):
    sc = generate_scenario("intersection", 1, n_agents=4)
    inp = build_inputs(sc, "normal", tiny.model.enc_cfg)
    fixed = tiny.model.encoder.attention_bias(inp, fixed_attention=True)
    full = tiny.model.encoder.attention_bias(inp, fixed_attention=False)
    pair = inp.valid[0, :, None] & inp.valid[0, None, :]
    assert torch.all(fixed[0, :, pair] == 0.0)
    assert torch.any(full[0, :, pair] < 0.0)


def test_fixed_guidance_weights_in_telemetry(tiny):
    sc = generate_scenario("curve", 2, n_agents=3)
    tel = Telemetry()
    plan(tiny, [sc], ["aggressive"], seed=0, variant="fixed_guidance", telemetry=tel)
    assert all(r["w_collision"] == 0.6 and r["w_speed"] == 0.4 for r in tel.rows)


def test_suites_are_seeded():
    a = scenario_suite(6, 3)
    b = scenario_suite(6, 3)
    assert [s.dumps() for s in a] == [s.dumps() for s in b]
    assert [s.kind for s in a] == ["straight", "curve", "intersection", "merge", "straight", "curve"]
    obs = obstacle_suite(4, 0)
    for sc in obs:
        lead = sc.agents[0]
        assert lead.speed == 0.0 and 15.0 <= lead.position[0] <= 45.0
    with pytest.raises(ConfigurationError):
        scenario_suite(0, 1)
    with pytest.raises(ConfigurationError):
        evaluate(PlannerBundle(None, None), a, "normal", 0, loop="sideways")


# ---- behaviour of the trained desk model (shares the session fixture with the acceptance run)

def test_telemetry_lambda_runs_from_low_to_high(trained):
    tel = Telemetry()
    plan(trained.bundle, [generate_scenario("straight", 4, n_agents=3)], ["normal"], seed=0, telemetry=tel)
    lam = [r["lambda"] for r in tel.rows]
    assert lam[0] == pytest.approx(0.3) and lam[-1] == pytest.approx(1.5, abs=2e-3)


def test_empty_road_has_no_collision_energy(trained):
    sc = generate_scenario("straight", 9, n_agents=0)
    traj = plan(trained.bundle, [sc], ["aggressive"], seed=2)[0]
    ctx = build_context(sc, "aggressive", 50, 0.1)
    assert collision_energy(traj, ctx.obstacles, 2.5, ctx.valid) < 1e-6


def test_conservative_plans_slower_than_aggressive(trained):
    scs = scenario_suite(20, 404)
    fast = plan(trained.bundle, scs, "aggressive", seed=3)
    slow = plan(trained.bundle, scs, "conservative", seed=3)
    speed = lambda p: np.linalg.norm(np.diff(p, axis=1), axis=-1).mean(1)
    assert np.mean(speed(slow) < speed(fast)) >= 0.8


def test_zero_agent_straight_makes_full_progress(trained):
    scs = [generate_scenario("straight", s, n_agents=0) for s in range(4)]
    for e in evaluate(trained.bundle, scs, "normal", seed=0, loop="closed"):
        assert e.report.progress == pytest.approx(100.0)
        assert e.report.nc == 100.0
