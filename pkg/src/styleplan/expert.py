"""Analytic expert demonstrations: lane-centre following with IDM car-following.

The expert tracks the route centreline and chooses its speed with the
Intelligent Driver Model, using the style's benchmark speed as the desired
speed and style-specific headway and acceleration limits.  Leaders are agents
whose constant-velocity forecast lies in the ego corridor ahead; red (and
stoppable yellow) lights act as a stationary leader at the stop line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Polyline
from .guidance import get_style
from .scenario import Scenario, predict_agents

VEHICLE_LENGTH = 5.0


@dataclass(frozen=True)
class DriverParams:
    headway: float
    a_max: float
    b_comf: float
    min_gap: float = 2.0


DRIVERS = {
    "aggressive": DriverParams(headway=1.0, a_max=2.0, b_comf=2.5),
    "normal": DriverParams(headway=1.5, a_max=1.5, b_comf=2.0),
    "conservative": DriverParams(headway=2.2, a_max=1.0, b_comf=1.5),
}


def idm_accel(v, v0, gap, v_lead, p: DriverParams):
    free = 1.0 - (v / max(v0, 0.1)) ** 4
    if gap is None:
        return p.a_max * free
    s_star = p.min_gap + max(0.0, v * p.headway + v * (v - v_lead) / (2.0 * np.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (free - (s_star / max(gap, 0.1)) ** 2)


def expert_trajectory(scenario: Scenario, style, n_points: int = 50, dt: float = 0.1,
                      corridor_half_width: float = 2.5) -> np.ndarray:
    """Expert plan as (n_points, 2) ego-frame positions at times dt .. n_points*dt."""
    style = get_style(style)
    p = DRIVERS[style.tag]
    route = Polyline(scenario.route)
    v0 = style.desired_speed(scenario.speed_limit)
    s_arr, _ = route.project(np.asarray(scenario.ego.position)[None])
    s = float(s_arr[0])
    v = float(scenario.ego.speed)

    fut, fut_v = predict_agents(scenario, n_points, dt)
    if scenario.n_agents:
        # current states first so the leader at step k is seen before moving
        now = np.array([a.position for a in scenario.agents])[None]
        now_v = np.array([a.velocity for a in scenario.agents])[None]
        obs = np.concatenate([now, fut[:-1]])
        obs_v = np.concatenate([now_v, fut_v[:-1]])
        flat_s, flat_d = route.project(obs.reshape(-1, 2))
        obs_s = flat_s.reshape(obs.shape[:2])
        obs_d = flat_d.reshape(obs.shape[:2])
        tang = route.tangent_at(obs_s)
        obs_vs = np.einsum("kni,kni->kn", obs_v, tang)
    stop_s = None
    for tl in scenario.traffic_lights:
        ls, _ = route.project(np.asarray(tl.position)[None])
        if ls[0] > s and tl.phase != "green":
            gap = ls[0] - s - 1.0
            if tl.phase == "red" or v * v / (2 * 3.0) < gap:
                stop_s = float(ls[0]) if stop_s is None else min(stop_s, float(ls[0]))

    out = np.zeros((n_points, 2))
    for k in range(n_points):
        gap, v_lead = None, 0.0
        if scenario.n_agents:
            ahead = (np.abs(obs_d[k]) < corridor_half_width) & (obs_s[k] > s)
            if ahead.any():
                j = np.flatnonzero(ahead)[np.argmin(obs_s[k][ahead])]
                gap = obs_s[k, j] - s - VEHICLE_LENGTH
                v_lead = max(0.0, float(obs_vs[k, j]))
        if stop_s is not None and stop_s > s - 0.5:
            g_stop = stop_s - s - 1.0
            if gap is None or g_stop < gap:
                gap, v_lead = g_stop, 0.0
        a = float(np.clip(idm_accel(v, v0, gap, v_lead, p), -8.0, p.a_max))
        v_new = max(0.0, v + a * dt)
        s += 0.5 * (v + v_new) * dt
        v = v_new
        out[k] = route.point_at(s)
    return out


def expert_speed_profile(traj: np.ndarray, dt: float = 0.1) -> np.ndarray:
    seg = np.diff(np.vstack([[0.0, 0.0], traj]), axis=0)
    return np.hypot(seg[:, 0], seg[:, 1]) / dt
