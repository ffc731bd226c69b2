"""Simplified driving-quality scores computed on ego/agent timelines.

The aggregate is a desk-scale stand-in with PDMS-like multiplicative safety
gating; it is *not* SM-PDMS and its numbers are not comparable to benchmark
tables.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.signal import savgol_filter

from .errors import InputError
from .geometry import Polyline
from .guidance import get_style


@dataclass(frozen=True)
class MetricThresholds:
    ego_radius: float = 1.0
    agent_radius: float = 1.0
    ttc_good: float = 3.0
    ttc_cap: float = 10.0
    accel_max: float = 3.0
    jerk_max: float = 5.0
    progress_fraction: float = 0.9
    savgol_window: int = 15
    savgol_order: int = 2
    weights: tuple = (0.3, 0.2, 0.3, 0.2)  # ttc, comfort, progress, style


@dataclass
class Timeline:
    """Ego and agent positions sampled every ``dt`` seconds in one fixed frame."""

    ego: np.ndarray          # (M, 2)
    agents: np.ndarray       # (M, N, 2)
    lanes: Sequence          # Lane objects in the same frame
    route: np.ndarray        # reference polyline in the same frame
    speed_limit: float
    dt: float = 0.1
    reference_progress: Optional[float] = None

    def __post_init__(self):
        self.ego = np.asarray(self.ego, dtype=float)
        self.agents = np.asarray(self.agents, dtype=float).reshape(len(self.agents), -1, 2) \
            if np.size(self.agents) else np.zeros((len(self.ego), 0, 2))
        if len(self.agents) != len(self.ego):
            raise InputError(f"ego timeline has {len(self.ego)} samples but agents have {len(self.agents)}")

    @property
    def duration(self) -> float:
        return (len(self.ego) - 1) * self.dt


@dataclass
class MetricReport:
    nc: float
    dac: float
    ttc_score: float
    min_ttc: float
    comfort: float
    progress: float
    style_alignment: float
    aggregate: float
    mean_speed: float
    max_abs_accel: float
    max_abs_jerk: float

    def to_row(self) -> dict:
        return asdict(self)


def timeline_from_plan(scenario, plan: np.ndarray, dt: float = 0.1, reference_progress=None) -> Timeline:
    """Open-loop timeline: the current state followed by the planned points."""
    from .scenario import agent_positions, predict_agents

    plan = np.asarray(plan, dtype=float)
    ego = np.vstack([np.asarray(scenario.ego.position, dtype=float)[None], plan])
    fut, _ = predict_agents(scenario, len(plan), dt)
    agents = np.concatenate([agent_positions(scenario)[None], fut], axis=0)
    return Timeline(ego, agents, scenario.lanes, scenario.route, scenario.speed_limit, dt, reference_progress)


def collision_mask(tl: Timeline, th: MetricThresholds) -> np.ndarray:
    if tl.agents.shape[1] == 0:
        return np.zeros(len(tl.ego), dtype=bool)
    d = np.linalg.norm(tl.agents - tl.ego[:, None, :], axis=-1)
    return (d < th.ego_radius + th.agent_radius).any(axis=1)


def collision_count(tl: Timeline, th: MetricThresholds = MetricThresholds()) -> int:
    """Number of distinct agents the ego touches at some sample."""
    if tl.agents.shape[1] == 0:
        return 0
    d = np.linalg.norm(tl.agents - tl.ego[:, None, :], axis=-1)
    return int((d < th.ego_radius + th.agent_radius).any(axis=0).sum())


def corridor_mask(points: np.ndarray, lanes) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for lane in lanes:
        inside |= Polyline(lane.centerline).distance(points) <= lane.width / 2.0
    return inside


def min_time_to_collision(tl: Timeline, th: MetricThresholds) -> float:
    """Smallest time until disc contact under constant velocities, capped at ``ttc_cap``.

    Only agents ahead of the moving ego count (positive offset along the ego
    velocity); vehicles closing in from behind are not the planner's doing.
    """
    if tl.agents.shape[1] == 0 or len(tl.ego) < 2:
        return th.ttc_cap
    ego_v = np.gradient(tl.ego, tl.dt, axis=0)
    ag_v = np.gradient(tl.agents, tl.dt, axis=0)
    p = tl.agents - tl.ego[:, None, :]
    v = ag_v - ego_v[:, None, :]
    r = th.ego_radius + th.agent_radius
    a = np.einsum("mni,mni->mn", v, v)
    b = 2 * np.einsum("mni,mni->mn", p, v)
    c = np.einsum("mni,mni->mn", p, p) - r * r
    ahead = np.einsum("mni,mi->mn", p, ego_v) > 0
    ttc = np.full(a.shape, np.inf)
    ttc[(c <= 0) & ahead] = 0.0
    disc = b * b - 4 * a * c
    ok = ahead & (c > 0) & (a > 1e-12) & (disc >= 0)
    root = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(ok, 2 * a, 1.0), np.inf)
    ttc = np.where(ok & (root >= 0), root, ttc)
    return float(min(np.min(ttc), th.ttc_cap))


def _smooth_derivative(x, dt, th: MetricThresholds):
    n = len(x)
    win = min(th.savgol_window, n if n % 2 else n - 1)
    if win <= th.savgol_order:
        return np.gradient(x, dt, axis=0)
    return savgol_filter(x, win, th.savgol_order, deriv=1, delta=dt, axis=0)


def kinematics(tl: Timeline, th: MetricThresholds = MetricThresholds()):
    """Speed, longitudinal acceleration and jerk (Savitzky-Golay derivatives)."""
    vel = _smooth_derivative(tl.ego, tl.dt, th)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    accel = _smooth_derivative(speed, tl.dt, th)
    jerk = _smooth_derivative(accel, tl.dt, th)
    return speed, accel, jerk


def route_progress(tl: Timeline) -> float:
    route = Polyline(tl.route)
    s, _ = route.project(tl.ego[[0, -1]])
    return float(max(0.0, s[1] - s[0]))


def compute_metrics(tl: Timeline, style, th: MetricThresholds = MetricThresholds()) -> MetricReport:
    style = get_style(style)
    if len(tl.ego) < 2:
        raise InputError("timeline needs at least two samples")
    nc = 0.0 if collision_mask(tl, th).any() else 100.0
    dac = 100.0 * float(corridor_mask(tl.ego, tl.lanes).mean())
    min_ttc = min_time_to_collision(tl, th)
    ttc_score = 100.0 * float(np.clip(min_ttc / th.ttc_good, 0.0, 1.0))

    _, accel, jerk = kinematics(tl, th)
    bad = (np.abs(accel) > th.accel_max) | (np.abs(jerk) > th.jerk_max)
    comfort = 100.0 * (1.0 - float(bad.mean()))

    reference = tl.reference_progress
    if reference is None:
        reference = th.progress_fraction * tl.speed_limit * tl.duration
    achieved = route_progress(tl)
    progress = 100.0 * min(1.0, achieved / reference) if reference > 1e-6 else 100.0

    seg = np.diff(tl.ego, axis=0)
    mean_speed = float(np.hypot(seg[:, 0], seg[:, 1]).sum() / tl.duration)
    v_des = style.desired_speed(tl.speed_limit)
    style_alignment = 100.0 * float(np.exp(-abs(mean_speed - v_des) / v_des))

    rep = MetricReport(nc, dac, ttc_score, min_ttc, comfort, progress, style_alignment, 0.0, mean_speed,
                       float(np.max(np.abs(accel))), float(np.max(np.abs(jerk))))
    rep.aggregate = aggregate_score(rep, th)
    return rep


def aggregate_score(r: MetricReport, th: MetricThresholds = MetricThresholds()) -> float:
    w_ttc, w_comfort, w_progress, w_style = th.weights
    return (r.nc / 100.0) * (r.dac / 100.0) * (
        w_ttc * r.ttc_score + w_comfort * r.comfort + w_progress * r.progress + w_style * r.style_alignment)


METRIC_COLUMNS = [f.name for f in fields(MetricReport)]


def write_metrics_csv(path, rows: Sequence[dict], key_columns: Sequence[str]) -> None:
    """One row per evaluated case; key columns first, then every metric component."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(key_columns) + METRIC_COLUMNS)
        for row in rows:
            wr.writerow([row[k] for k in key_columns] + [_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
