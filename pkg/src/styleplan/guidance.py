"""Time-step-adaptive energy guidance for the reverse diffusion process.

Energies are evaluated on metric trajectories (..., K, 2).  The collision and
speed energies are combined with weights that depend on the diffusion step,
the traffic situation and the driving style, and the fused energy's exact
gradient is injected into the noise prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InputError, NumericalError


@dataclass(frozen=True)
class StyleProfile:
    tag: str
    desired_speed_multiplier: float
    alpha0: float
    beta0: float

    def __post_init__(self):
        if not self.desired_speed_multiplier > 0:
            raise InputError("desired_speed_multiplier must be positive")
        if self.alpha0 < 0 or self.beta0 < 0:
            raise InputError("base weights must be non-negative")

    def desired_speed(self, speed_limit: float) -> float:
        return self.desired_speed_multiplier * speed_limit


STYLES = {
    "aggressive": StyleProfile("aggressive", 1.1, 0.5, 1.2),
    "normal": StyleProfile("normal", 1.0, 0.7, 0.8),
    "conservative": StyleProfile("conservative", 0.9, 1.0, 0.5),
}
STYLE_TAGS = tuple(STYLES)


def get_style(style) -> StyleProfile:
    if isinstance(style, StyleProfile):
        return style
    try:
        return STYLES[str(style).lower()]
    except KeyError:
        raise InputError(f"unknown style {style!r}; expected one of {STYLE_TAGS}") from None


@dataclass(frozen=True)
class GuidanceConfig:
    sigma_d: float = 2.5
    lambda_base: float = 1.5
    lambda_slope: float = 1.2
    alpha_max: float = 1.2
    beta_max: float = 2.5
    eps_d: float = 1e-3
    sigma_c: float = 0.1
    sigma_rho: float = 2.0
    gamma_w: float = 0.5
    v_max_rel: float = 15.0
    # evaluate lambda at T - t instead of t (experimentation only)
    reverse_schedule: bool = False
    # constant (collision, speed) weights replace the dynamic ones when set
    fixed_weights: Optional[tuple] = None

    def __post_init__(self):
        if not (self.sigma_d > 0 and self.eps_d > 0 and self.sigma_c > 0 and self.sigma_rho > 0
                and self.v_max_rel > 0):
            raise InputError("guidance scales must be positive")
        if self.alpha_max < 0 or self.beta_max < 0:
            raise InputError("weight caps must be non-negative")


@dataclass
class EnergyReport:
    e_collision: float
    e_speed: float
    e_fused: float
    w_collision: float
    w_speed: float
    wn_collision: float
    wn_speed: float
    lam: float = 0.0
    degenerate: bool = False


@dataclass
class GuidanceContext:
    """Everything the energies need besides the trajectory itself.

    ``obstacles`` holds predicted obstacle positions aligned with the
    trajectory points, shape (K, N, 2); ``obstacle_velocities`` likewise.
    """

    obstacles: np.ndarray
    obstacle_velocities: np.ndarray
    valid: np.ndarray
    v_desired: float
    v_limit: float
    dt: float = 0.1
    curvature: float = 0.0
    density: float = 0.0
    style: Optional[StyleProfile] = None
    weights: tuple = field(default=(0.5, 0.5))


def lambda_schedule(t, T: int, cfg: GuidanceConfig = GuidanceConfig()):
    """Guidance intensity: affine in t, 1.5 at t=0 and 0.3 at t=T by default."""
    if cfg.reverse_schedule:
        t = T - np.asarray(t)
    lam = cfg.lambda_base - cfg.lambda_slope * np.asarray(t, dtype=float) / T
    lam = np.maximum(lam, 0.0)
    return float(lam) if np.ndim(lam) == 0 else lam


def _sq_dist(traj, obstacles):
    diff = traj[..., :, None, :] - obstacles
    return diff, np.einsum("...i,...i->...", diff, diff)


def collision_energy(traj, obstacles, sigma_d: float = 2.5, valid=None):
    """Sum over points and obstacles of exp(-d^2 / sigma_d^2).

    ``traj`` (..., K, 2); ``obstacles`` (K, N, 2) or broadcastable (..., K, N, 2).
    """
    traj = np.asarray(traj, dtype=float)
    obstacles = np.asarray(obstacles, dtype=float)
    if obstacles.shape[-2] == 0:
        return np.zeros(traj.shape[:-2]) if traj.ndim > 2 else 0.0
    _, d2 = _sq_dist(traj, obstacles)
    terms = np.exp(-d2 / sigma_d**2)
    if valid is not None:
        terms = terms * np.asarray(valid, dtype=float)
    e = terms.sum(axis=(-1, -2))
    return float(e) if np.ndim(e) == 0 else e


def point_speeds(traj, dt: float):
    seg = np.diff(np.asarray(traj, dtype=float), axis=-2)
    return np.hypot(seg[..., 0], seg[..., 1]) / dt


def speed_energy(traj, v_desired, v_limit: float, dt: float = 0.1):
    """Squared relative deviation of per-segment speed from the style benchmark."""
    if not v_limit > 0:
        raise InputError("v_limit must be positive")
    v = point_speeds(traj, dt)
    e = (((v - np.asarray(v_desired, dtype=float)) / v_limit) ** 2).sum(axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def alpha_schedule(t, T, alpha0):
    return alpha0 * (1.0 + 0.8 * t / T)


def beta_schedule(t, T, beta0):
    return beta0 * (1.0 - 0.6 * t / T)


def dynamic_weights(t, T, distances, v_rel, curvature, density, delta_v, v_desired,
                    cfg: GuidanceConfig, style: StyleProfile):
    """Raw (collision, speed) weights, each capped at alpha_max / beta_max.

    ``distances`` and ``v_rel`` are per-obstacle; ``v_rel`` is the closing
    speed (positive when the obstacle approaches).
    """
    if v_desired == 0:
        raise InputError("v_desired must be non-zero")
    distances = np.asarray(distances, dtype=float)
    v_rel = np.asarray(v_rel, dtype=float)
    risk = np.sum(1.0 / (distances + cfg.eps_d) * np.maximum(0.0, v_rel / cfg.v_max_rel))
    w_c = alpha_schedule(t, T, style.alpha0) * risk * np.exp(curvature / cfg.sigma_c)
    w_s = (beta_schedule(t, T, style.beta0) * min(1.0, abs(delta_v) / abs(v_desired))
           * (1.0 + cfg.gamma_w * np.exp(-density / cfg.sigma_rho)))
    return float(min(w_c, cfg.alpha_max)), float(min(w_s, cfg.beta_max))


def fuse_energies(e_c: float, e_s: float, w_c: float, w_s: float) -> EnergyReport:
    total = w_c + w_s
    if total <= 0:
        return EnergyReport(e_c, e_s, 0.0, w_c, w_s, 0.5, 0.5, degenerate=True)
    wn_c = w_c / total
    wn_s = w_s / total
    return EnergyReport(e_c, e_s, wn_c * e_c + wn_s * e_s, w_c, w_s, wn_c, wn_s)


def build_context(scenario, style, n_points: int, dt: float = 0.1,
                  curvature_horizon: float = 80.0) -> GuidanceContext:
    """Constant-velocity obstacle forecasts aligned with the plan's time stamps."""
    from .scenario import predict_agents, validity_mask

    style = get_style(style)
    pos, vel = predict_agents(scenario, n_points, dt)
    return GuidanceContext(
        obstacles=pos,
        obstacle_velocities=vel,
        valid=validity_mask(scenario),
        v_desired=style.desired_speed(scenario.speed_limit),
        v_limit=scenario.speed_limit,
        dt=dt,
        curvature=scenario.curvature_ahead(curvature_horizon),
        density=scenario.density,
        style=style,
    )


def _risk_terms(d2, rel_p, rel_v, cfg: GuidanceConfig):
    """Distance, closing speed and risk 1/(d+eps)*max(0, v_rel/v_max_rel) for every (point, obstacle)."""
    dist = np.sqrt(d2)
    closing = -np.einsum("...i,...i->...", rel_p, rel_v) / np.maximum(dist, 1e-9)
    return dist, closing, 1.0 / (dist + cfg.eps_d) * np.maximum(0.0, closing / cfg.v_max_rel)


def weight_inputs(traj, ctx: GuidanceContext, cfg: GuidanceConfig = GuidanceConfig()):
    """Per-obstacle distance and closing speed at the plan point where that obstacle is most threatening.

    The chosen point maximises 1/(d+eps)*max(0, v_rel/v_max_rel); when an
    obstacle never closes in, its closest approach is reported instead.
    """
    traj = np.asarray(traj, dtype=float)
    speeds = point_speeds(traj, ctx.dt)
    delta_v = float(speeds.mean() - ctx.v_desired) if len(speeds) else 0.0
    valid = np.asarray(ctx.valid, dtype=bool)
    if not valid.any():
        return np.zeros(0), np.zeros(0), delta_v
    obs = ctx.obstacles[:, valid]
    obs_v = ctx.obstacle_velocities[:, valid]
    diff, d2 = _sq_dist(traj, obs)
    ego_v = np.gradient(traj, ctx.dt, axis=0)
    dist, closing, risk = _risk_terms(d2, -diff, obs_v - ego_v[:, None, :], cfg)
    cols = np.arange(obs.shape[1])
    k = np.where(risk.max(axis=0) > 0, np.argmax(risk, axis=0), np.argmin(d2, axis=0))
    return dist[k, cols], closing[k, cols], delta_v


def step_report(traj, ctx: GuidanceContext, t: int, T: int, cfg: GuidanceConfig) -> EnergyReport:
    """Energies, weights and lambda for one plan at diffusion step t."""
    style = ctx.style or STYLES["normal"]
    e_c = collision_energy(traj, ctx.obstacles, cfg.sigma_d, ctx.valid)
    e_s = speed_energy(traj, ctx.v_desired, ctx.v_limit, ctx.dt)
    if cfg.fixed_weights is not None:
        w_c, w_s = cfg.fixed_weights
    else:
        dist, closing, delta_v = weight_inputs(traj, ctx, cfg)
        w_c, w_s = dynamic_weights(t, T, dist, closing, ctx.curvature, ctx.density, delta_v,
                                   ctx.v_desired, cfg, style)
    rep = fuse_energies(e_c, e_s, w_c, w_s)
    rep.lam = lambda_schedule(t, T, cfg)
    return rep


def fused_energy(traj, ctx: GuidanceContext, cfg: GuidanceConfig):
    """Fused energy with the normalised weights frozen in ``ctx.weights``."""
    wn_c, wn_s = ctx.weights
    return (wn_c * collision_energy(traj, ctx.obstacles, cfg.sigma_d, ctx.valid)
            + wn_s * speed_energy(traj, ctx.v_desired, ctx.v_limit, ctx.dt))


def energy_gradient(traj, ctx: GuidanceContext, cfg: GuidanceConfig):
    """Analytic gradient of :func:`fused_energy` w.r.t. the trajectory points.

    The normalised weights are treated as constants of the step.
    """
    traj = np.asarray(traj, dtype=float)
    wn_c, wn_s = ctx.weights
    grad = np.zeros_like(traj)

    if wn_c != 0 and ctx.obstacles.shape[-2] > 0:
        diff, d2 = _sq_dist(traj, ctx.obstacles)
        terms = np.exp(-d2 / cfg.sigma_d**2) * np.asarray(ctx.valid, dtype=float)
        grad += wn_c * np.einsum("...kn,...kni->...ki", terms, diff) * (-2.0 / cfg.sigma_d**2)

    if wn_s != 0:
        seg = np.diff(traj, axis=-2)
        norm = np.hypot(seg[..., 0], seg[..., 1])
        unit = np.divide(seg, norm[..., None], out=np.zeros_like(seg), where=norm[..., None] > 1e-12)
        v = norm / ctx.dt
        coef = 2.0 * (v - np.asarray(ctx.v_desired, dtype=float)) / ctx.v_limit**2 / ctx.dt
        dseg = wn_s * coef[..., None] * unit
        grad[..., 1:, :] += dseg
        grad[..., :-1, :] -= dseg

    bad = ~np.isfinite(grad)
    if bad.any():
        idx = int(np.argwhere(bad.any(axis=-1))[0][-1])
        raise NumericalError("non-finite energy gradient", index=idx)
    return grad


def guided_score(eps_hat, grad, lam: float, alpha_bar_t: float):
    """Shift a noise prediction so the implied score descends the energy.

    With score = -eps / sqrt(1 - alpha_bar), subtracting lam * grad from the
    score equals adding lam * sqrt(1 - alpha_bar) * grad to eps.
    """
    if lam == 0:
        return eps_hat
    return eps_hat + float(lam) * float(np.sqrt(1.0 - alpha_bar_t)) * grad


def with_weights(ctx: GuidanceContext, report: EnergyReport) -> GuidanceContext:
    return replace(ctx, weights=(report.wn_collision, report.wn_speed))


@dataclass
class BatchContext:
    """Guidance contexts stacked along a batch axis; absent obstacles are padded as invalid."""

    obstacles: np.ndarray            # (B, K, N, 2)
    obstacle_velocities: np.ndarray  # (B, K, N, 2)
    valid: np.ndarray                # (B, N) float
    v_desired: np.ndarray            # (B,)
    v_limit: np.ndarray
    curvature: np.ndarray
    density: np.ndarray
    alpha0: np.ndarray
    beta0: np.ndarray
    dt: float

    @classmethod
    def stack(cls, contexts) -> "BatchContext":
        contexts = list(contexts)
        if not contexts:
            raise InputError("no guidance contexts to stack")
        dts = {c.dt for c in contexts}
        if len(dts) != 1:
            raise InputError("all contexts in a batch must share dt")
        k = {c.obstacles.shape[0] for c in contexts}
        if len(k) != 1:
            raise InputError("all contexts in a batch must share the horizon")
        k = k.pop()
        n = max(c.obstacles.shape[1] for c in contexts)
        b = len(contexts)
        obs = np.zeros((b, k, n, 2))
        vel = np.zeros((b, k, n, 2))
        valid = np.zeros((b, n))
        for i, c in enumerate(contexts):
            m = c.obstacles.shape[1]
            obs[i, :, :m] = c.obstacles
            vel[i, :, :m] = c.obstacle_velocities
            valid[i, :m] = np.asarray(c.valid, dtype=float)
        styles = [c.style or STYLES["normal"] for c in contexts]
        return cls(obs, vel, valid,
                   np.array([c.v_desired for c in contexts], dtype=float),
                   np.array([c.v_limit for c in contexts], dtype=float),
                   np.array([c.curvature for c in contexts], dtype=float),
                   np.array([c.density for c in contexts], dtype=float),
                   np.array([s.alpha0 for s in styles]), np.array([s.beta0 for s in styles]),
                   dts.pop())


@dataclass
class BatchReport:
    e_collision: np.ndarray
    e_speed: np.ndarray
    w_collision: np.ndarray
    w_speed: np.ndarray
    wn_collision: np.ndarray
    wn_speed: np.ndarray
    degenerate: np.ndarray
    lam: float

    def row(self, i: int) -> EnergyReport:
        e = self.wn_collision[i] * self.e_collision[i] + self.wn_speed[i] * self.e_speed[i]
        return EnergyReport(float(self.e_collision[i]), float(self.e_speed[i]),
                            0.0 if self.degenerate[i] else float(e),
                            float(self.w_collision[i]), float(self.w_speed[i]),
                            float(self.wn_collision[i]), float(self.wn_speed[i]), self.lam,
                            bool(self.degenerate[i]))


def batch_step_report(traj, bc: BatchContext, t: int, T: int, cfg: GuidanceConfig) -> BatchReport:
    """Vectorised :func:`step_report` over a batch of plans (B, K, 2)."""
    traj = np.asarray(traj, dtype=float)
    diff, d2 = _sq_dist(traj, bc.obstacles)                       # (B,K,N,2), (B,K,N)
    e_c = (np.exp(-d2 / cfg.sigma_d**2) * bc.valid[:, None, :]).sum(axis=(1, 2))
    v = point_speeds(traj, bc.dt)                                  # (B,K-1)
    e_s = (((v - bc.v_desired[:, None]) / bc.v_limit[:, None]) ** 2).sum(axis=1)
    if cfg.fixed_weights is not None:
        w_c = np.full(len(traj), float(cfg.fixed_weights[0]))
        w_s = np.full(len(traj), float(cfg.fixed_weights[1]))
    else:
        delta_v = v.mean(axis=1) - bc.v_desired if v.shape[1] else np.zeros(len(traj))
        risk = np.zeros(len(traj))
        if bc.obstacles.shape[2]:
            ego_v = np.gradient(traj, bc.dt, axis=1)
            _, _, r = _risk_terms(d2, -diff, bc.obstacle_velocities - ego_v[:, :, None, :], cfg)
            risk = (r.max(axis=1) * bc.valid).sum(axis=1)
        w_c = alpha_schedule(t, T, bc.alpha0) * risk * np.exp(bc.curvature / cfg.sigma_c)
        w_s = (beta_schedule(t, T, bc.beta0) * np.minimum(1.0, np.abs(delta_v) / np.abs(bc.v_desired))
               * (1.0 + cfg.gamma_w * np.exp(-bc.density / cfg.sigma_rho)))
        w_c = np.minimum(w_c, cfg.alpha_max)
        w_s = np.minimum(w_s, cfg.beta_max)
    total = w_c + w_s
    degenerate = total <= 0
    safe = np.where(degenerate, 1.0, total)
    wn_c = np.where(degenerate, 0.5, w_c / safe)
    wn_s = np.where(degenerate, 0.5, w_s / safe)
    return BatchReport(e_c, e_s, w_c, w_s, wn_c, wn_s, degenerate, lambda_schedule(t, T, cfg))


def batch_energy_gradient(traj, bc: BatchContext, wn_c, wn_s, cfg: GuidanceConfig):
    """Vectorised :func:`energy_gradient`; ``wn_c``/``wn_s`` are per-plan weights (B,)."""
    traj = np.asarray(traj, dtype=float)
    wn_c = np.asarray(wn_c, dtype=float)[:, None, None]
    wn_s = np.asarray(wn_s, dtype=float)[:, None, None]
    grad = np.zeros_like(traj)
    if bc.obstacles.shape[2]:
        diff, d2 = _sq_dist(traj, bc.obstacles)
        terms = np.exp(-d2 / cfg.sigma_d**2) * bc.valid[:, None, :]
        grad += wn_c * np.einsum("bkn,bkni->bki", terms, diff) * (-2.0 / cfg.sigma_d**2)
    seg = np.diff(traj, axis=1)
    norm = np.hypot(seg[..., 0], seg[..., 1])
    unit = np.divide(seg, norm[..., None], out=np.zeros_like(seg), where=norm[..., None] > 1e-12)
    coef = 2.0 * (norm / bc.dt - bc.v_desired[:, None]) / bc.v_limit[:, None] ** 2 / bc.dt
    dseg = wn_s * coef[..., None] * unit
    grad[:, 1:] += dseg
    grad[:, :-1] -= dseg
    bad = ~np.isfinite(grad)
    if bad.any():
        idx = int(np.argwhere(bad.any(axis=-1))[0][-1])
        raise NumericalError("non-finite energy gradient", index=idx)
    return grad
