"""Open-loop planning, closed-loop rollouts and ablation variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .diffusion import DEFAULT_MAX_SHIFT, GuidanceSetup, NoiseSchedule, Planner, Telemetry, sample
from .encoder import build_inputs
from .errors import ConfigurationError, NumericalError
from .expert import expert_trajectory
from .geometry import from_frame
from .guidance import GuidanceConfig, build_context, get_style
from .metrics import MetricReport, MetricThresholds, Timeline, compute_metrics, kinematics, timeline_from_plan
from .scenario import (KINDS, GenerationParams, Scenario, agent_positions, generate_scenario, predict_agents,
                       recenter, step_agents)

log = logging.getLogger(__name__)

VARIANTS = ("full", "fixed_attention", "fixed_guidance", "full_ablation")
FIXED_WEIGHTS = (0.6, 0.4)


@dataclass
class PlannerBundle:
    model: Planner
    sched: NoiseSchedule
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    max_shift: float = DEFAULT_MAX_SHIFT

    @property
    def dt(self) -> float:
        return self.model.enc_cfg.dt

    @property
    def t_pred(self) -> int:
        return self.model.enc_cfg.t_pred


def variant_flags(variant: str) -> tuple[bool, bool]:
    """(fixed_attention, fixed_guidance) for an ablation variant name."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant in ("fixed_attention", "full_ablation"), variant in ("fixed_guidance", "full_ablation")


def plan(bundle: PlannerBundle, scenarios: Sequence[Scenario], styles, seed: int, guidance: bool = True,
         variant: str = "full", telemetry: Optional[Telemetry] = None,
         guidance_cfg: Optional[GuidanceConfig] = None) -> np.ndarray:
    """Sample one plan per scenario; returns (B, t_pred, 2) metric ego-frame points."""
    scenarios = list(scenarios)
    if isinstance(styles, str) or not isinstance(styles, (list, tuple)):
        styles = [styles] * len(scenarios)
    fixed_att, fixed_guid = variant_flags(variant)
    setup = None
    if guidance:
        cfg = guidance_cfg or bundle.guidance
        if fixed_guid:
            cfg = replace(cfg, fixed_weights=FIXED_WEIGHTS)
        contexts = [build_context(sc, st, bundle.t_pred, bundle.dt) for sc, st in zip(scenarios, styles)]
        setup = GuidanceSetup(cfg, contexts, bundle.max_shift)
    inputs = build_inputs(scenarios, styles, bundle.model.enc_cfg)
    gen = torch.Generator().manual_seed(int(seed))
    return sample(bundle.model, inputs, bundle.sched, gen, guidance=setup, fixed_attention=fixed_att,
                  telemetry=telemetry)


def reference_progress(scenario: Scenario, horizon_steps: int, dt: float, tolerance: float = 0.95) -> float:
    """Route progress of the normal-style expert over the horizon, scaled by ``tolerance``."""
    from .geometry import Polyline

    traj = expert_trajectory(scenario, "normal", horizon_steps, dt)
    route = Polyline(scenario.route)
    s, _ = route.project(np.vstack([np.asarray(scenario.ego.position)[None], traj[-1:]]))
    return tolerance * max(float(s[1] - s[0]), 1.0)


@dataclass
class RolloutLog:
    scenario: Scenario
    style: str
    ego: np.ndarray                 # (M, 2) world-frame ego positions
    headings: np.ndarray            # (M,)
    agents: np.ndarray              # (M, N, 2)
    plans: list                     # world-frame plans, one per replanning round
    failed: bool = False
    failure: str = ""
    report: Optional[MetricReport] = None

    def timeline(self, dt: float, reference: Optional[float]) -> Timeline:
        return Timeline(self.ego, self.agents, self.scenario.lanes, self.scenario.route,
                        self.scenario.speed_limit, dt, reference)


def closed_loop(bundle: PlannerBundle, scenarios: Sequence[Scenario], styles, seed: int,
                horizon: float = 5.0, stride: int = 5, guidance: bool = True, variant: str = "full",
                thresholds: MetricThresholds = MetricThresholds(),
                guidance_cfg: Optional[GuidanceConfig] = None) -> list[RolloutLog]:
    """Replan every ``stride`` steps, execute the first ``stride`` points, advance agents.

    All rollouts advance in lockstep so every replanning round is one batched
    sampler call.  A planner failure truncates the affected log and the
    metrics are computed on the prefix.
    """
    scenarios = list(scenarios)
    if isinstance(styles, str) or not isinstance(styles, (list, tuple)):
        styles = [styles] * len(scenarios)
    dt = bundle.dt
    n_steps = int(round(horizon / dt))
    if stride < 1 or stride > bundle.t_pred:
        raise ConfigurationError("stride must lie in [1, t_pred]")
    n = len(scenarios)
    logs = []
    for sc, st in zip(scenarios, styles):
        fut, _ = predict_agents(sc, n_steps, dt)
        agents = np.concatenate([agent_positions(sc)[None], fut], axis=0)
        logs.append(RolloutLog(sc, get_style(st).tag, np.asarray(sc.ego.position, dtype=float)[None],
                               np.array([sc.ego.heading]), agents, []))
    poses = [(np.asarray(sc.ego.position, dtype=float), float(sc.ego.heading)) for sc in scenarios]
    local = list(scenarios)
    active = list(range(n))
    done = 0
    rnd = 0
    ss = np.random.SeedSequence(int(seed))
    round_seeds = ss.generate_state(n_steps // stride + 2)
    while done < n_steps and active:
        k = min(stride, n_steps - done)
        try:
            plans = plan(bundle, [local[i] for i in active], [styles[i] for i in active],
                         int(round_seeds[rnd]), guidance=guidance, variant=variant, guidance_cfg=guidance_cfg)
        except NumericalError as exc:
            for i in active:
                logs[i].failed, logs[i].failure = True, str(exc)
            break
        still = []
        for row, i in enumerate(active):
            p = plans[row]
            if not np.all(np.isfinite(p)):
                logs[i].failed, logs[i].failure = True, f"non-finite plan in round {rnd}"
                continue
            origin, heading = poses[i]
            world = from_frame(p, origin, heading)
            logs[i].plans.append(world)
            logs[i].ego = np.vstack([logs[i].ego, world[:k]])
            prev = p[k - 2] if k >= 2 else np.zeros(2)
            step_vec = p[k - 1] - prev
            speed = float(np.hypot(*step_vec) / dt)
            local_heading = float(np.arctan2(step_vec[1], step_vec[0])) if speed > 1e-3 else 0.0
            logs[i].headings = np.concatenate([logs[i].headings, np.full(k, heading + local_heading)])
            moved = step_agents(local[i], k * dt)
            local[i] = recenter(moved, p[k - 1], local_heading, speed)
            poses[i] = (world[k - 1], heading + local_heading)
            still.append(i)
        active = still
        done += k
        rnd += 1

    for lg in logs:
        m = len(lg.ego)
        lg.agents = lg.agents[:m]
        ref = reference_progress(lg.scenario, m - 1, dt) if m > 1 else None
        if m >= 2:
            lg.report = compute_metrics(lg.timeline(dt, ref), lg.style, thresholds)
    return logs


def plan_metrics(scenario: Scenario, style, traj: np.ndarray, dt: float = 0.1,
                 thresholds: MetricThresholds = MetricThresholds()) -> MetricReport:
    ref = reference_progress(scenario, len(traj), dt)
    return compute_metrics(timeline_from_plan(scenario, traj, dt, ref), style, thresholds)


def scenario_suite(n: int, seed: int, kinds: Sequence[str] = KINDS, params: Optional[GenerationParams] = None,
                   **overrides) -> list[Scenario]:
    """``n`` scenes cycling through ``kinds``; scene seeds derive from ``seed``."""
    if n < 1:
        raise ConfigurationError("suite size must be positive")
    seeds = np.random.SeedSequence([int(seed), 0x5171]).generate_state(n)
    return [generate_scenario(kinds[i % len(kinds)], int(seeds[i]), params, **overrides) for i in range(n)]


def obstacle_suite(n: int, seed: int, kinds: Sequence[str] = KINDS) -> list[Scenario]:
    """Scenes with a stationary vehicle 15-35 m ahead, sticking 1.5-3 m out from the ego lane centre."""
    return scenario_suite(n, seed, kinds, slow_lead=True, lead_speed=(0.0, 0.0), lead_offset=(1.5, 3.0))


@dataclass
class Evaluation:
    scenario: Scenario
    style: str
    report: MetricReport
    accel: np.ndarray
    trajectory: np.ndarray   # ego positions, current state first, in the scenario frame


def evaluate(bundle: PlannerBundle, scenarios: Sequence[Scenario], styles, seed: int, variant: str = "full",
             guidance: bool = True, loop: str = "closed", horizon: float = 5.0,
             guidance_cfg: Optional[GuidanceConfig] = None,
             thresholds: MetricThresholds = MetricThresholds()) -> list[Evaluation]:
    """Score every (scenario, style) pair open-loop (one plan) or closed-loop (replanning rollout)."""
    scenarios = list(scenarios)
    if isinstance(styles, str) or not isinstance(styles, (list, tuple)):
        styles = [styles] * len(scenarios)
    out = []
    if loop == "open":
        plans = plan(bundle, scenarios, styles, seed, guidance=guidance, variant=variant, guidance_cfg=guidance_cfg)
        for sc, st, p in zip(scenarios, styles, plans):
            ref = reference_progress(sc, len(p), bundle.dt)
            tl = timeline_from_plan(sc, p, bundle.dt, ref)
            rep = compute_metrics(tl, st, thresholds)
            out.append(Evaluation(sc, get_style(st).tag, rep, kinematics(tl, thresholds)[1], tl.ego))
    elif loop == "closed":
        logs = closed_loop(bundle, scenarios, styles, seed, horizon=horizon, guidance=guidance, variant=variant,
                           thresholds=thresholds, guidance_cfg=guidance_cfg)
        for lg in logs:
            tl = lg.timeline(bundle.dt, None)
            acc = kinematics(tl, thresholds)[1] if len(lg.ego) >= 2 else np.zeros(len(lg.ego))
            out.append(Evaluation(lg.scenario, lg.style, lg.report, acc, lg.ego))
    else:
        raise ConfigurationError(f"loop must be 'open' or 'closed', not {loop!r}")
    return out
