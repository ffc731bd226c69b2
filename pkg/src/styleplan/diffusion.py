"""DDPM backbone: schedule, forward corruption, conditional denoiser, sampler, loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import EncoderConfig, EncoderInputs, StyleEncoder, sinusoidal
from .errors import ConfigurationError, InputError, NumericalError
from .guidance import (BatchContext, GuidanceConfig, GuidanceContext, EnergyReport, batch_energy_gradient,
                       batch_step_report, guided_score)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; index t runs 1..T, position 0 holds the alpha_bar_0 = 1 convention."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigma2: np.ndarray = field(repr=False)

    def beta(self, t):
        return self.betas[t]

    def alpha(self, t):
        return self.alphas[t]

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not (0 < beta_start < beta_end < 1) or int(T) < 2:
        raise ConfigurationError("need 0 < beta_start < beta_end < 1 and T >= 2")
    T = int(T)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigma2 = np.zeros(T + 1)
    sigma2[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * (1.0 - alphas[1:])
    return NoiseSchedule(T, beta_start, beta_end, betas, alphas, alpha_bars, sigma2)


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per-sample."""
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise InputError(f"diffusion step must lie in [1, {sched.T}]")
    if tuple(eps.shape) != tuple(x0.shape):
        raise InputError("noise and trajectory shapes differ")
    ab = sched.alpha_bars[t_arr]
    if torch.is_tensor(x0):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
        if ab.ndim:
            ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps
    if np.ndim(ab):
        ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 256
    n_blocks: int = 4
    time_dim: int = 64
    n_queries: int = 4
    t_pred: int = 50

    def to_dict(self):
        return asdict(self)


class ScaleShiftBlock(nn.Module):
    """Residual MLP block whose normalised input is modulated as h * (1 + scale) + shift."""

    def __init__(self, width, cond_dim):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.modulation = nn.Linear(cond_dim, 2 * width)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, h, cond):
        scale, shift = self.modulation(cond).chunk(2, dim=-1)
        return h + self.mlp(self.norm(h) * (1 + scale) + shift)


class Denoiser(nn.Module):
    """Noise predictor over flattened trajectories, conditioned on pooled z_style and t."""

    def __init__(self, cfg: DenoiserConfig, d_model: int):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d_model) / math.sqrt(d_model))
        self.key = nn.Linear(d_model, d_model)
        self.pool_out = nn.Linear(cfg.n_queries * d_model, w)
        self.mean_out = nn.Linear(d_model, w)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.inp = nn.Linear(2 * cfg.t_pred, w)
        self.blocks = nn.ModuleList([ScaleShiftBlock(w, w) for _ in range(cfg.n_blocks)])
        self.out_norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, 2 * cfg.t_pred)

    def condition(self, z: torch.Tensor, token_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Cross-attention pooling plus a masked mean of z_style, one vector per batch element."""
        keys = self.key(z)
        logits = torch.einsum("qd,bld->bql", self.queries, keys) / math.sqrt(z.shape[-1])
        if token_valid is None:
            token_valid = torch.ones(z.shape[:2], dtype=torch.bool)
        logits = logits.masked_fill(~token_valid.bool()[:, None, :], -1e9)
        w = torch.softmax(logits, dim=-1)
        pooled = torch.einsum("bql,bld->bqd", w, z)
        m = token_valid.to(z.dtype)[..., None]
        mean = (z * m).sum(1) / m.sum(1).clamp_min(1.0)
        return self.pool_out(pooled.reshape(z.shape[0], -1)) + self.mean_out(mean)

    def predict(self, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        b = x_t.shape[0]
        if x_t.ndim != 3 or x_t.shape[1:] != (self.cfg.t_pred, 2) or cond.shape[0] != b:
            raise InputError(f"expected x_t of shape (B, {self.cfg.t_pred}, 2) matching the condition batch")
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(b)
        temb = self.time_mlp(sinusoidal(t, self.cfg.time_dim).to(x_t.dtype))
        c = torch.nn.functional.silu(cond + temb)
        h = self.inp(x_t.reshape(b, -1))
        for blk in self.blocks:
            h = blk(h, c)
        return self.out(self.out_norm(h)).reshape(b, self.cfg.t_pred, 2)

    def forward(self, x_t, t, z, token_valid=None):
        return self.predict(x_t, t, self.condition(z, token_valid))


def denoiser_forward(x_t, t, z, model: "Planner", token_valid=None):
    return model.denoiser(x_t, t, z, token_valid)


class Planner(nn.Module):
    """Encoder + denoiser + trajectory normalisation statistics."""

    def __init__(self, enc_cfg: EncoderConfig = EncoderConfig(), den_cfg: Optional[DenoiserConfig] = None):
        super().__init__()
        den_cfg = den_cfg or DenoiserConfig(t_pred=enc_cfg.t_pred)
        if den_cfg.t_pred != enc_cfg.t_pred:
            raise ConfigurationError("encoder and denoiser horizons differ")
        self.enc_cfg = enc_cfg
        self.den_cfg = den_cfg
        self.encoder = StyleEncoder(enc_cfg)
        self.denoiser = Denoiser(den_cfg, enc_cfg.d_model)
        self.register_buffer("traj_mean", torch.zeros(enc_cfg.t_pred, 2))
        self.register_buffer("traj_std", torch.ones(enc_cfg.t_pred, 2))

    def set_normalization(self, trajectories: np.ndarray):
        x = np.asarray(trajectories, dtype=np.float64)
        self.traj_mean.copy_(torch.as_tensor(x.mean(0)))
        self.traj_std.copy_(torch.as_tensor(np.maximum(x.std(0), 1e-2)))

    def normalize(self, x):
        return (x - self.traj_mean) / self.traj_std

    def denormalize(self, x):
        return x * self.traj_std + self.traj_mean

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def training_loss(model: Planner, inputs: EncoderInputs, x0: torch.Tensor, sched: NoiseSchedule,
                  generator: torch.Generator, repeats: int = 1, eps_fn: Optional[Callable] = None):
    """Mean squared epsilon-prediction error with t uniform in 1..T.

    ``repeats`` draws several (t, eps) pairs per encoded scene, which amortises
    the encoder cost.  ``eps_fn(x_t, t, eps)`` can replace the network (used to
    check the objective itself).
    """
    if x0.shape[0] == 0:
        raise InputError("empty batch")
    dtype = x0.dtype
    b = x0.shape[0]
    xn = model.normalize(x0).repeat(repeats, 1, 1)
    t = torch.randint(1, sched.T + 1, (b * repeats,), generator=generator)
    eps = torch.randn(xn.shape, generator=generator, dtype=dtype)
    x_t = forward_noise(xn, t, eps, sched)
    if eps_fn is not None:
        pred = eps_fn(x_t, t, eps)
    else:
        z, tv = model.encoder(inputs)
        cond = model.denoiser.condition(z, tv).repeat(repeats, 1)
        pred = model.denoiser.predict(x_t, t.to(torch.float64), cond)
    loss = ((pred - eps) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite training loss")
    return loss


# Default trust region for one guidance step, in metres of x0-estimate displacement.
# Loose enough that the early high-noise steps act, tight enough that a near-singular
# 1/sqrt(alpha_bar) factor cannot throw the sample off the data manifold.
DEFAULT_MAX_SHIFT = 300.0


@dataclass
class GuidanceSetup:
    """Per-sample guidance contexts plus the shared configuration."""

    cfg: GuidanceConfig
    contexts: Sequence[GuidanceContext]
    # largest metric displacement of any x0-estimate point one guidance step may induce
    max_shift: float = DEFAULT_MAX_SHIFT
    batch: BatchContext = field(init=False, repr=False)

    def __post_init__(self):
        self.batch = BatchContext.stack(self.contexts)


@dataclass
class Telemetry:
    rows: list = field(default_factory=list)

    def add(self, t, report: EnergyReport, batch_index: int = 0):
        self.rows.append({
            "sample": batch_index, "t": int(t), "lambda": report.lam,
            "w_collision": report.w_collision, "w_speed": report.w_speed,
            "E_collision": report.e_collision, "E_speed": report.e_speed,
        })

    def to_csv(self, path, sample: Optional[int] = None):
        import csv
        cols = ["t", "lambda", "w_collision", "w_speed", "E_collision", "E_speed"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow((["sample"] if sample is None else []) + cols)
            for r in self.rows:
                if sample is not None and r["sample"] != sample:
                    continue
                wr.writerow(([r["sample"]] if sample is None else []) + [repr(float(r[c])) if c != "t" else r[c]
                                                                          for c in cols])


def guidance_gradient(model: Planner, x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                      setup: GuidanceSetup, telemetry: Optional[Telemetry] = None):
    """Gradient of the fused energy w.r.t. normalised x_t (eps treated as constant).

    Energies are evaluated on the de-normalised x0 estimate.  The gradient is
    uniformly rescaled whenever the x0 displacement it would cause exceeds
    ``setup.max_shift`` metres at any point.
    """
    ab = float(sched.alpha_bars[t])
    x0_hat = (x_t.double() - math.sqrt(1 - ab) * eps_hat.double()) / math.sqrt(ab)
    traj = model.denormalize(x0_hat).detach().numpy()
    std = model.traj_std.double().numpy()
    rep = batch_step_report(traj, setup.batch, t, sched.T, setup.cfg)
    if telemetry is not None:
        for b in range(len(traj)):
            telemetry.add(t, rep.row(b), b)
    lam = rep.lam
    if lam == 0:
        return lam, torch.zeros_like(x_t)
    g = batch_energy_gradient(traj, setup.batch, rep.wn_collision, rep.wn_speed, setup.cfg) * std / math.sqrt(ab)
    # x0 displacement implied by the eps shift, in metres
    shift = lam * (1 - ab) / math.sqrt(ab) * std * np.abs(g)
    peak = shift.reshape(len(g), -1).max(axis=1) if g.size else np.zeros(len(g))
    scale = np.where(peak > setup.max_shift, setup.max_shift / np.maximum(peak, 1e-300), 1.0)
    g = g * scale[:, None, None]
    return lam, torch.as_tensor(g, dtype=x_t.dtype)


def denoise_step(x_t, t: int, eps_hat, sched: NoiseSchedule, noise=None):
    """One ancestral update x_t -> x_{t-1}; the noise term vanishes at t = 1."""
    if not 1 <= t <= sched.T:
        raise InputError(f"diffusion step must lie in [1, {sched.T}]")
    a = float(sched.alphas[t])
    ab = float(sched.alpha_bars[t])
    mean = (x_t - (1 - a) / math.sqrt(1 - ab) * eps_hat) / math.sqrt(a)
    sigma = math.sqrt(float(sched.sigma2[t]))
    out = mean if (noise is None or sigma == 0.0) else mean + sigma * noise
    if torch.is_tensor(out):
        ok = bool(torch.isfinite(out).all())
    else:
        ok = bool(np.all(np.isfinite(out)))
    if not ok:
        raise NumericalError("non-finite sample", step=t)
    return out


@torch.no_grad()
def sample(model: Planner, inputs: EncoderInputs, sched: NoiseSchedule, generator: torch.Generator,
           guidance: Optional[GuidanceSetup] = None, fixed_attention: bool = False,
           telemetry: Optional[Telemetry] = None) -> np.ndarray:
    """Run t = T..1 and return metric trajectories of shape (B, t_pred, 2)."""
    dtype = next(model.parameters()).dtype
    inputs = inputs.to(dtype)
    z, tv = model.encoder(inputs, fixed_attention=fixed_attention)
    cond = model.denoiser.condition(z, tv)
    b = cond.shape[0]
    x = torch.randn((b, model.enc_cfg.t_pred, 2), generator=generator, dtype=dtype)
    for t in range(sched.T, 0, -1):
        eps = model.denoiser.predict(x, float(t), cond)
        if guidance is not None:
            lam, grad = guidance_gradient(model, x, eps, t, sched, guidance, telemetry)
            eps = guided_score(eps, grad, lam, float(sched.alpha_bars[t]))
        noise = torch.randn(x.shape, generator=generator, dtype=dtype) if t > 1 else None
        x = denoise_step(x, t, eps, sched, noise)
    return model.denormalize(x).double().numpy()
