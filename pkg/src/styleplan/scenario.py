"""Scene data model, reproducible synthetic scenario generation and agent rollout.

Everything is expressed in the ego-centric frame: x forward, y to the left,
metres, m/s, radians.  Scenarios are immutable snapshots; ``step_agents`` and
``recenter`` return new instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InputError
from .geometry import Polyline, curvature, from_frame, to_frame, vectors_to_frame

FORMAT_VERSION = 1
CONFIDENCE_THRESHOLD = 0.6
MAX_AGENTS = 100
PHASES = ("red", "yellow", "green")
KINDS = ("straight", "curve", "intersection", "merge")
DENSITY_RADIUS = 50.0


@dataclass(frozen=True)
class EgoState:
    position: tuple = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0


@dataclass(frozen=True)
class AgentState:
    """A dynamic traffic participant.

    Agents bound to a lane (``lane`` not None) keep constant speed along that
    lane and a constant lateral offset, i.e. constant velocity in the lane's
    curvilinear frame; unbound agents move in a straight line.
    """

    position: tuple
    velocity: tuple
    confidence: float = 1.0
    in_range: bool = True
    lane: Optional[int] = None
    lane_s: float = 0.0
    lane_d: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError(f"agent confidence {self.confidence} outside [0, 1]")

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class Lane:
    centerline: np.ndarray
    speed_limit: float
    width: float = 3.5

    def __post_init__(self):
        if not self.speed_limit > 0:
            raise ConfigurationError("lane speed_limit must be positive")
        if not self.width > 0:
            raise ConfigurationError("lane width must be positive")
        object.__setattr__(self, "centerline", np.asarray(self.centerline, dtype=float))

    @property
    def polyline(self) -> Polyline:
        return Polyline(self.centerline)


@dataclass(frozen=True)
class TrafficLight:
    position: tuple
    phase: str = "green"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InputError(f"unknown traffic-light phase {self.phase!r}")


@dataclass(frozen=True)
class Scenario:
    ego: EgoState
    agents: tuple
    lanes: tuple
    route: np.ndarray
    traffic_lights: tuple = ()
    ego_lane: int = 0
    kind: str = "straight"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "traffic_lights", tuple(self.traffic_lights))
        object.__setattr__(self, "route", np.asarray(self.route, dtype=float))
        if len(self.agents) > MAX_AGENTS:
            raise ConfigurationError(f"at most {MAX_AGENTS} agents are supported")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def speed_limit(self) -> float:
        return self.lanes[self.ego_lane].speed_limit

    @property
    def curvature_profile(self) -> tuple[np.ndarray, np.ndarray]:
        return curvature(self.route)

    def curvature_ahead(self, horizon: float = 80.0) -> float:
        """Largest absolute route curvature within ``horizon`` metres ahead of the ego."""
        s, c = self.curvature_profile
        s0, _ = Polyline(self.route).project(np.asarray(self.ego.position)[None])
        sel = (s >= s0[0]) & (s <= s0[0] + horizon)
        return float(np.max(np.abs(c[sel]))) if np.any(sel) else 0.0

    @property
    def density(self) -> float:
        """Agents within 50 m of the ego, per 100 m."""
        if not self.agents:
            return 0.0
        pos = agent_positions(self) - np.asarray(self.ego.position)
        near = np.hypot(pos[:, 0], pos[:, 1]) <= DENSITY_RADIUS
        return float(np.count_nonzero(near) / (DENSITY_RADIUS / 100.0))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "ego": {
                "position": [float(v) for v in self.ego.position],
                "heading": float(self.ego.heading),
                "speed": float(self.ego.speed),
                "lane": int(self.ego_lane),
            },
            "agents": [
                {
                    "position": [float(v) for v in a.position],
                    "velocity": [float(v) for v in a.velocity],
                    "confidence": float(a.confidence),
                    "in_range": bool(a.in_range),
                    "lane": a.lane,
                    "lane_s": float(a.lane_s),
                    "lane_d": float(a.lane_d),
                }
                for a in self.agents
            ],
            "lanes": [
                {
                    "centerline": lane.centerline.round(6).tolist(),
                    "speed_limit": float(lane.speed_limit),
                    "width": float(lane.width),
                }
                for lane in self.lanes
            ],
            "route": self.route.round(6).tolist(),
            "traffic_lights": [
                {"position": [float(v) for v in tl.position], "phase": tl.phase}
                for tl in self.traffic_lights
            ],
            "meta": {"seed": int(self.seed), "params": dict(self.params)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported scenario format_version {version!r}")
        try:
            ego = data["ego"]
            return cls(
                ego=EgoState(tuple(ego["position"]), float(ego["heading"]), float(ego["speed"])),
                agents=tuple(
                    AgentState(
                        position=tuple(a["position"]),
                        velocity=tuple(a["velocity"]),
                        confidence=float(a["confidence"]),
                        in_range=bool(a["in_range"]),
                        lane=a.get("lane"),
                        lane_s=float(a.get("lane_s", 0.0)),
                        lane_d=float(a.get("lane_d", 0.0)),
                    )
                    for a in data["agents"]
                ),
                lanes=tuple(
                    Lane(np.asarray(lane["centerline"]), float(lane["speed_limit"]), float(lane["width"]))
                    for lane in data["lanes"]
                ),
                route=np.asarray(data["route"], dtype=float),
                traffic_lights=tuple(
                    TrafficLight(tuple(tl["position"]), tl["phase"]) for tl in data["traffic_lights"]
                ),
                ego_lane=int(ego.get("lane", 0)),
                kind=data.get("kind", "straight"),
                seed=int(data["meta"]["seed"]),
                params=dict(data["meta"].get("params", {})),
            )
        except KeyError as exc:
            raise InputError(f"scenario file missing key {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        fh.write(scenario.dumps())


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.loads(fh.read())


@dataclass(frozen=True)
class GenerationParams:
    """Knobs for :func:`generate_scenario`; ``None`` means "draw from the seed"."""

    n_agents: int = 8
    n_lanes: Optional[int] = None
    speed_limit: Optional[float] = None
    lane_width: float = 3.5
    route_length: float = 200.0
    perception_range: float = 100.0
    curvature: Optional[float] = None
    light_phase: Optional[str] = None
    invalid_fraction: float = 0.15
    # add one slow, confidently perceived vehicle 15-35 m ahead in the ego lane
    slow_lead: bool = False
    # its speed as a fraction of the limit and its |lateral offset| range in metres
    lead_speed: tuple = (0.0, 0.3)
    lead_offset: tuple = (0.0, 0.5)

    def validate(self):
        if not 0 <= self.n_agents + int(self.slow_lead) <= MAX_AGENTS:
            raise ConfigurationError(f"n_agents must be in [0, {MAX_AGENTS}]")
        if self.n_lanes is not None and not 1 <= self.n_lanes <= 4:
            raise ConfigurationError("n_lanes must be in [1, 4]")
        if self.speed_limit is not None and not self.speed_limit > 0:
            raise ConfigurationError("speed_limit must be positive")
        if not self.lane_width > 0 or not self.route_length > 0 or not self.perception_range > 0:
            raise ConfigurationError("lane_width, route_length and perception_range must be positive")
        if self.curvature is not None and abs(self.curvature) > 0.05:
            raise ConfigurationError("|curvature| must not exceed 0.05 1/m")
        if self.light_phase is not None and self.light_phase not in PHASES:
            raise ConfigurationError(f"light_phase must be one of {PHASES}")
        if not 0.0 <= self.invalid_fraction <= 1.0:
            raise ConfigurationError("invalid_fraction must be in [0, 1]")


_BACK = 60.0
_SPACING = 1.0


def _centerline(kind: str, length: float, offset: float, curv: float, curve_start: float) -> np.ndarray:
    s = np.arange(-_BACK, length + _BACK + _SPACING, _SPACING)
    if kind == "curve" and curv != 0.0:
        heading = np.where(s > curve_start, (s - curve_start) * curv, 0.0)
        heading = np.clip(heading, -np.pi / 2, np.pi / 2)
        ds = np.diff(s)
        mid_heading = 0.5 * (heading[:-1] + heading[1:])
        xy = np.zeros((len(s), 2))
        xy[0] = (s[0], 0.0)
        xy[1:, 0] = s[0] + np.cumsum(ds * np.cos(mid_heading))
        xy[1:, 1] = np.cumsum(ds * np.sin(mid_heading))
    else:
        xy = np.stack([s, np.zeros_like(s)], axis=1)
    if offset != 0.0:
        line = Polyline(xy)
        xy = line.frenet_to_xy(line.s, np.full(len(line.s), offset))
    return xy


def _merge_ramp(width: float, start: float, end: float, length: float) -> np.ndarray:
    s = np.arange(-_BACK, length + _BACK + _SPACING, _SPACING)
    frac = np.clip((s - start) / (end - start), 0.0, 1.0)
    y = -(width + 2.0) * 0.5 * (1.0 + np.cos(np.pi * frac))
    return np.stack([s, y], axis=1)


def generate_scenario(kind: str = "straight", seed: int = 0, params: Optional[GenerationParams] = None,
                      **overrides) -> Scenario:
    """Build a synthetic scene; a pure function of ``(kind, seed, params)``."""
    if kind not in KINDS:
        raise ConfigurationError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    params = replace(params or GenerationParams(), **overrides)
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, KINDS.index(kind)]))

    n_lanes = params.n_lanes or int(rng.integers(1, 4))
    speed_limit = params.speed_limit or float(rng.choice([10.0, 12.5, 15.0]))
    ego_lane = 0 if kind == "merge" else int(rng.integers(0, n_lanes))
    w = params.lane_width
    curv = 0.0
    curve_start = 0.0
    if kind == "curve":
        curv = params.curvature if params.curvature is not None else float(
            rng.uniform(0.008, 0.025) * rng.choice([-1.0, 1.0]))
        curve_start = float(rng.uniform(0.0, 25.0))

    lanes = []
    for j in range(n_lanes):
        cl = _centerline(kind, params.route_length, (j - ego_lane) * w, curv, curve_start)
        lanes.append(Lane(cl, speed_limit, w))
    route = lanes[ego_lane].centerline.copy()
    # truncate route to the forward horizon plus a short tail behind the ego
    rs = Polyline(route).s - _BACK
    route = route[(rs >= -20.0) & (rs <= params.route_length + 1e-9)]

    lights = []
    stop_s = None
    if kind == "merge":
        merge_start = float(rng.uniform(15.0, 40.0))
        ramp = _merge_ramp(w, merge_start, merge_start + 60.0, params.route_length)
        lanes.append(Lane(ramp, speed_limit, w))
    if kind == "intersection":
        stop_s = float(rng.uniform(30.0, 70.0))
        phase = params.light_phase or str(rng.choice(PHASES, p=[0.45, 0.15, 0.4]))
        stop_xy = Polyline(lanes[ego_lane].centerline).point_at(stop_s + _BACK)
        lights.append(TrafficLight((float(stop_xy[0]), float(stop_xy[1])), phase))
        cross_x = stop_s + 4.0 + 0.5 * n_lanes * w
        ys = np.arange(-100.0, 100.0 + _SPACING, _SPACING)
        for side in (-1.0, 1.0):
            cl = np.stack([np.full_like(ys, cross_x + side * w / 2), ys * side], axis=1)
            lanes.append(Lane(cl, speed_limit, w))

    agents = _place_agents(rng, kind, params, lanes, ego_lane, n_lanes, speed_limit, lights)
    ego_speed = float(rng.uniform(0.75, 1.0) * speed_limit)
    sc = Scenario(
        ego=EgoState((0.0, 0.0), 0.0, ego_speed),
        agents=tuple(agents),
        lanes=tuple(lanes),
        route=route,
        traffic_lights=tuple(lights),
        ego_lane=ego_lane,
        kind=kind,
        seed=int(seed),
        params={k: v for k, v in vars(params).items()},
    )
    return sc


def _place_agents(rng, kind, params, lanes, ego_lane, n_lanes, speed_limit, lights):
    n = params.n_agents
    occupied: dict[int, list[float]] = {}
    agents = []
    if params.slow_lead:
        line = lanes[ego_lane].polyline
        s = float(rng.uniform(15.0, 35.0)) + _BACK
        d = float(rng.uniform(*params.lead_offset) * rng.choice([-1.0, 1.0]))
        speed = float(rng.uniform(*params.lead_speed) * speed_limit)
        pos = line.frenet_to_xy(s, d)
        tangent = line.tangent_at(s)
        occupied[ego_lane] = [s]
        agents.append(AgentState((float(pos[0]), float(pos[1])),
                                 (float(speed * tangent[0]), float(speed * tangent[1])),
                                 float(rng.uniform(0.8, 1.0)), True, ego_lane, s, d))
    if n == 0:
        return agents
    n += len(agents)
    candidate_lanes = list(range(len(lanes)))
    red = bool(lights) and lights[0].phase != "green"
    if kind == "intersection" and not red:
        candidate_lanes = list(range(n_lanes))
    far = max(150.0, 40.0 + 14.0 * n / max(1, len(candidate_lanes)))
    attempts = 0
    while len(agents) < n:
        attempts += 1
        if attempts > 200 * n:
            far += 50.0
            attempts = 0
        lane_idx = int(rng.choice(candidate_lanes))
        lane = lanes[lane_idx]
        line = lane.polyline
        is_cross = kind == "intersection" and lane_idx >= n_lanes
        if is_cross:
            s_local = float(rng.uniform(20.0, 160.0))
        elif lane_idx == ego_lane:
            s_local = float(rng.uniform(20.0, far))
        elif kind == "merge" and lane_idx == n_lanes:
            s_local = float(rng.uniform(-10.0, far * 0.5))
        else:
            s_local = float(rng.uniform(-40.0, far))
        s = s_local + _BACK
        if s > line.length - 5.0:
            continue
        if any(abs(s - o) < 9.0 for o in occupied.get(lane_idx, [])):
            continue
        # keep the ego's own footprint clear
        d = float(rng.uniform(-0.4, 0.4))
        pos = line.frenet_to_xy(s, d)
        if np.hypot(*pos) < 8.0:
            continue
        lo, hi = (0.5, 1.0) if lane_idx == ego_lane else (0.6, 1.1)
        speed = float(rng.uniform(lo, hi) * speed_limit)
        if is_cross:
            speed = float(rng.uniform(0.7, 1.0) * speed_limit)
        tangent = line.tangent_at(s)
        conf = float(rng.uniform(0.3, 0.6)) if rng.random() < params.invalid_fraction else float(
            rng.uniform(0.6, 1.0))
        occupied.setdefault(lane_idx, []).append(s)
        agents.append(AgentState(
            position=(float(pos[0]), float(pos[1])),
            velocity=(float(speed * tangent[0]), float(speed * tangent[1])),
            confidence=conf,
            in_range=bool(np.hypot(*pos) <= params.perception_range),
            lane=lane_idx,
            lane_s=s,
            lane_d=d,
        ))
    return agents


def _advance(agent: AgentState, lanes, dt: float) -> AgentState:
    if agent.lane is None:
        pos = (agent.position[0] + agent.velocity[0] * dt, agent.position[1] + agent.velocity[1] * dt)
        return replace(agent, position=pos)
    line = lanes[agent.lane].polyline
    speed = agent.speed
    s = agent.lane_s + speed * dt
    pos = line.frenet_to_xy(s, agent.lane_d)
    t = line.tangent_at(s)
    return replace(agent, position=(float(pos[0]), float(pos[1])),
                   velocity=(float(speed * t[0]), float(speed * t[1])), lane_s=float(s))


def step_agents(scenario: Scenario, dt: float) -> Scenario:
    """Advance every agent by ``dt`` seconds; the ego is left untouched."""
    if dt < 0:
        raise InputError("dt must be non-negative")
    if dt == 0:
        return scenario
    return replace(scenario, agents=tuple(_advance(a, scenario.lanes, dt) for a in scenario.agents))


def agent_positions(scenario: Scenario) -> np.ndarray:
    if not scenario.agents:
        return np.zeros((0, 2))
    return np.array([a.position for a in scenario.agents], dtype=float)


def agent_velocities(scenario: Scenario) -> np.ndarray:
    if not scenario.agents:
        return np.zeros((0, 2))
    return np.array([a.velocity for a in scenario.agents], dtype=float)


def predict_agents(scenario: Scenario, n_steps: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Agent positions and velocities at times ``dt, 2 dt, ..., n_steps dt``.

    Returns arrays of shape (n_steps, N, 2).  Closed form of repeated
    :func:`step_agents`.
    """
    n = scenario.n_agents
    pos = np.zeros((n_steps, n, 2))
    vel = np.zeros((n_steps, n, 2))
    times = dt * np.arange(1, n_steps + 1)
    for i, a in enumerate(scenario.agents):
        v = np.asarray(a.velocity)
        if a.lane is None:
            pos[:, i] = np.asarray(a.position) + times[:, None] * v
            vel[:, i] = v
        else:
            line = scenario.lanes[a.lane].polyline
            s = a.lane_s + a.speed * times
            pos[:, i] = line.frenet_to_xy(s, np.full_like(s, a.lane_d))
            vel[:, i] = a.speed * line.tangent_at(s)
    return pos, vel


def validity_mask(scenario: Scenario, threshold: float = CONFIDENCE_THRESHOLD) -> np.ndarray:
    """Boolean validity per agent: confident enough and inside perception range."""
    return np.array([(a.confidence >= threshold) and a.in_range for a in scenario.agents], dtype=bool)


def batch_validity_mask(scenarios, n_max: int) -> np.ndarray:
    """B x n_max mask; padding slots are invalid."""
    mask = np.zeros((len(scenarios), n_max), dtype=bool)
    for b, sc in enumerate(scenarios):
        m = validity_mask(sc)[:n_max]
        mask[b, : len(m)] = m
    return mask


def recenter(scenario: Scenario, position, heading: float, speed: float,
             perception_range: float = 100.0) -> Scenario:
    """Re-express the scene in a new ego frame located at ``position``/``heading``.

    ``position`` and ``heading`` are given in the current frame.  Agent
    perception flags are refreshed against ``perception_range``.
    """
    agents = []
    for a in scenario.agents:
        p = to_frame(np.asarray(a.position), position, heading)
        v = vectors_to_frame(np.asarray(a.velocity), heading)
        agents.append(replace(a, position=(float(p[0]), float(p[1])), velocity=(float(v[0]), float(v[1])),
                              in_range=bool(np.hypot(*p) <= perception_range)))
    lanes = tuple(replace(lane, centerline=to_frame(lane.centerline, position, heading)) for lane in scenario.lanes)
    lights = tuple(replace(tl, position=tuple(float(v) for v in to_frame(np.asarray(tl.position), position, heading)))
                   for tl in scenario.traffic_lights)
    return replace(
        scenario,
        ego=EgoState((0.0, 0.0), 0.0, float(speed)),
        agents=tuple(agents),
        lanes=lanes,
        route=to_frame(scenario.route, position, heading),
        traffic_lights=lights,
    )


def frame_to_world(points, origin, heading):
    return from_frame(points, origin, heading)
