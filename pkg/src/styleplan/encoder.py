"""Multi-source style-aware scene encoder.

Scene tokens live on a (time x agent) grid: slot 0 is the ego, slots 1.. are
dynamic agents (padded to ``n_max``), and every slot is rolled forward over the
prediction horizon with constant-velocity forecasts.  Encoding runs in two
attention stages:

1. agent-level multi-head attention at each time step, biased by
   ``-kappa * distance`` and masked for invalid agents;
2. attention over the full grid whose weights are multiplied by the
   Kronecker product of a temporal and a spatial affinity matrix.

The output ``z_style`` has shape (B, n_max * t_pred, d_model) in row-major
(time, agent) order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, ResourceError
from .guidance import STYLE_TAGS, get_style
from .scenario import PHASES, Scenario, agent_positions, agent_velocities, predict_agents, validity_mask
from .geometry import Polyline

MASK_PENALTY = -1e9
FAR_SENTINEL = 1e9
RAW_FEATURES = 5 + len(STYLE_TAGS)
ROUTE_STATIONS = np.arange(10.0, 130.0, 10.0)
CONTEXT_FEATURES = 3 + (len(PHASES) + 1) + 1 + 2 + 2 * len(ROUTE_STATIONS) + 1 + 3
LEAD_CORRIDOR = 2.0


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 128
    n_heads: int = 8
    kappa_init: float = 0.1
    gamma_t: float = 0.05
    t_pred: int = 50
    n_max: int = 8
    dt: float = 0.1
    fusion_cap: int = 8192

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if not 0 < self.kappa_init <= 1:
            raise ConfigurationError("kappa must lie in (0, 1]")
        if self.n_max < 1 or self.t_pred < 2:
            raise ConfigurationError("n_max >= 1 and t_pred >= 2 required")

    @property
    def l_feat(self) -> int:
        return self.n_max * self.t_pred

    def to_dict(self):
        return asdict(self)


def _check_kappa(kappa):
    k = float(kappa.detach()) if torch.is_tensor(kappa) else float(kappa)
    if not 0.0 < k <= 1.0:
        raise ConfigurationError(f"kappa={k} outside (0, 1]")


def pairwise_distances(positions: torch.Tensor, in_range: torch.Tensor, sentinel: float = math.inf) -> torch.Tensor:
    """B x N x N Euclidean distances; pairs touching an out-of-range agent get ``sentinel``."""
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    d = torch.sqrt((diff**2).sum(-1))
    in_range = in_range.bool()
    pair = in_range[..., :, None] & in_range[..., None, :]
    return torch.where(pair, d, torch.full_like(d, sentinel))


def build_attention_mask(distances: torch.Tensor, kappa, n_heads: int, valid: torch.Tensor) -> torch.Tensor:
    """Additive attention bias of shape B x H x N x N.

    Infinite distances are replaced by a 1e9 m sentinel first.  Entries whose
    row or column agent is invalid carry only the -1e9 penalty.
    """
    _check_kappa(kappa)
    d = torch.where(torch.isfinite(distances), distances, torch.full_like(distances, FAR_SENTINEL))
    valid = valid.bool()
    pair = valid[..., :, None] & valid[..., None, :]
    bias = torch.where(pair, -kappa * d, torch.zeros_like(d))
    bias = bias + (~pair).to(d.dtype) * MASK_PENALTY
    return bias.unsqueeze(-3).expand(*bias.shape[:-2], n_heads, *bias.shape[-2:])


def log_temporal_attention(v: torch.Tensor, gamma: float, r_temporal: torch.Tensor) -> torch.Tensor:
    sq = ((v[..., :, None, :] - v[..., None, :, :]) ** 2).sum(-1)
    return -gamma * sq + r_temporal


def temporal_attention(v: torch.Tensor, gamma: float, r_temporal: torch.Tensor) -> torch.Tensor:
    """A_t[i, j] = exp(-gamma * |v_i - v_j|^2 + r_temporal[i, j])."""
    return torch.exp(log_temporal_attention(v, gamma, r_temporal))


def spatial_logits(v: torch.Tensor, positions: torch.Tensor, w_s: torch.Tensor, rel_embed) -> torch.Tensor:
    """Per-channel pre-activations W_s [v_m || v_n || r_emb(m, n)], shape (..., N, N, D)."""
    d = v.shape[-1]
    w_m, w_n, w_r = w_s[:, :d], w_s[:, d:2 * d], w_s[:, 2 * d:]
    rel = (positions[..., :, None, :] - positions[..., None, :, :]) / 100.0
    r_emb = rel_embed(rel)
    return ((v @ w_m.T)[..., :, None, :] + (v @ w_n.T)[..., None, :, :] + r_emb @ w_r.T)


def spatial_attention(v: torch.Tensor, positions: torch.Tensor, w_s: torch.Tensor, rel_embed) -> torch.Tensor:
    """A_s[m, n] in (0, 1): channel mean of sigmoid(W_s [v_m || v_n || r_emb])."""
    return torch.sigmoid(spatial_logits(v, positions, w_s, rel_embed)).mean(-1)


def fuse_spatiotemporal(a_t: torch.Tensor, a_s: torch.Tensor, cap: int = 8192) -> torch.Tensor:
    """Batched Kronecker product; index i*N + m pairs time i with agent m."""
    t, n = a_t.shape[-1], a_s.shape[-1]
    if t * n > cap:
        raise ResourceError(f"fused attention size {t * n} exceeds cap {cap}")
    out = a_t[..., :, None, :, None] * a_s[..., None, :, None, :]
    return out.reshape(*out.shape[:-4], t * n, t * n)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def temporal_relative_init(t_pred: int, n_freq: int = 8) -> torch.Tensor:
    """Sinusoidal initialisation of the learned temporal relative-position term."""
    idx = torch.arange(t_pred, dtype=torch.float64)
    delta = idx[:, None] - idx[None, :]
    freqs = math.pi / t_pred * torch.arange(1, n_freq + 1, dtype=torch.float64)
    return 0.5 * torch.cos(delta[..., None] * freqs).mean(-1)


class BiasedSelfAttention(nn.Module):
    """Multi-head self-attention with an additive logit bias and an optional log-prior."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, bias=None, log_prior=None, key_valid=None, return_weights=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        if bias is not None:
            logits = logits + bias
        if log_prior is not None:
            logits = logits + log_prior.unsqueeze(1)
        if key_valid is not None:
            logits = logits + (~key_valid).to(logits.dtype)[:, None, None, :] * MASK_PENALTY
        w = torch.softmax(logits, dim=-1)
        out = self.proj((w @ v).transpose(1, 2).reshape(b, n, d))
        return (out, w) if return_weights else out


@dataclass
class EncoderInputs:
    tokens: torch.Tensor      # B x T x N x RAW_FEATURES
    positions: torch.Tensor   # B x N x 2
    in_range: torch.Tensor    # B x N
    valid: torch.Tensor       # B x N
    context: torch.Tensor     # B x CONTEXT_FEATURES
    style: torch.Tensor       # B (long)

    def to(self, dtype):
        return EncoderInputs(self.tokens.to(dtype), self.positions.to(dtype), self.in_range, self.valid,
                             self.context.to(dtype), self.style)

    def index(self, idx):
        return EncoderInputs(self.tokens[idx], self.positions[idx], self.in_range[idx], self.valid[idx],
                             self.context[idx], self.style[idx])

    @staticmethod
    def cat(items):
        return EncoderInputs(*(torch.cat([getattr(it, f) for it in items]) for f in
                               ("tokens", "positions", "in_range", "valid", "context", "style")))


@dataclass
class StyleFeatures:
    z_style: torch.Tensor
    valid: torch.Tensor       # B x L_feat token validity
    style_tags: tuple


def scene_context(scenario: Scenario, style) -> np.ndarray:
    """Global (ego / map / signal) feature vector broadcast to every token."""
    style = get_style(style)
    limit = scenario.speed_limit
    feats = [scenario.ego.speed / 20.0, limit / 20.0, style.desired_speed(limit) / 20.0]
    phase = np.zeros(len(PHASES) + 1)
    stop = 1.0
    ahead = [tl for tl in scenario.traffic_lights if tl.position[0] > 0]
    if ahead:
        tl = ahead[0]
        phase[PHASES.index(tl.phase)] = 1.0
        stop = min(float(np.hypot(*tl.position)) / 100.0, 1.5)
    else:
        phase[-1] = 1.0
    feats += list(phase) + [stop]
    feats += [scenario.curvature_ahead() * 10.0, scenario.density / 10.0]
    route = Polyline(scenario.route)
    s0, d0 = route.project(np.zeros((1, 2)))
    pts = route.point_at(s0[0] + ROUTE_STATIONS)
    feats += list((pts[:, 0] / 100.0)) + list(pts[:, 1] / 25.0)
    feats.append(float(d0[0]))
    feats += list(lead_features(scenario, route, s0[0]))
    return np.asarray(feats, dtype=np.float64)


def lead_features(scenario: Scenario, route: Polyline, s_ego: float) -> tuple:
    """Gap to, speed of and closing speed on the nearest valid agent ahead inside the route corridor."""
    none = (2.0, scenario.speed_limit / 20.0, 0.0)
    if not scenario.n_agents:
        return none
    vm = validity_mask(scenario)
    if not vm.any():
        return none
    pos = agent_positions(scenario)[vm]
    vel = agent_velocities(scenario)[vm]
    s, d = route.project(pos)
    ahead = (s > s_ego) & (np.abs(d) < LEAD_CORRIDOR)
    if not ahead.any():
        return none
    j = np.flatnonzero(ahead)[np.argmin(s[ahead])]
    v_lead = float(vel[j] @ route.tangent_at(s[j]))
    gap = min((float(s[j]) - s_ego) / 50.0, 2.0)
    return gap, v_lead / 20.0, (scenario.ego.speed - v_lead) / 20.0


def build_inputs(scenarios, styles, cfg: EncoderConfig) -> EncoderInputs:
    """Assemble padded encoder tensors for a batch of (scenario, style) pairs."""
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    if isinstance(styles, (str,)) or not isinstance(styles, (list, tuple)):
        styles = [styles] * len(scenarios)
    b, t, n = len(scenarios), cfg.t_pred, cfg.n_max
    tokens = np.zeros((b, t, n, RAW_FEATURES))
    positions = np.zeros((b, n, 2))
    in_range = np.zeros((b, n), dtype=bool)
    valid = np.zeros((b, n), dtype=bool)
    context = np.zeros((b, CONTEXT_FEATURES))
    style_idx = np.zeros(b, dtype=np.int64)
    times = cfg.dt * np.arange(1, t + 1)
    for i, (sc, st) in enumerate(zip(scenarios, styles)):
        st = get_style(st)
        onehot = np.zeros(len(STYLE_TAGS))
        onehot[STYLE_TAGS.index(st.tag)] = 1.0
        style_idx[i] = STYLE_TAGS.index(st.tag)
        context[i] = scene_context(sc, st)
        # ego slot
        tokens[i, :, 0, 0] = sc.ego.speed * times / 50.0
        tokens[i, :, 0, 2] = sc.ego.speed / 20.0
        tokens[i, :, 0, 4] = 1.0
        tokens[i, :, 0, 5:] = onehot
        in_range[i, 0] = valid[i, 0] = True
        if sc.n_agents and n > 1:
            # valid agents first, then nearest (agents behind count double)
            # when the scene exceeds the slot budget
            pos = agent_positions(sc)
            vm = validity_mask(sc)
            reach = np.hypot(pos[:, 0], pos[:, 1]) * np.where(pos[:, 0] < 0, 2.0, 1.0)
            order = np.lexsort((reach, ~vm))[: n - 1]
            fut, vel = predict_agents(sc, t, cfg.dt)
            conf = np.array([a.confidence for a in sc.agents])
            rng_flag = np.array([a.in_range for a in sc.agents])
            k = len(order)
            tokens[i, :, 1:k + 1, 0:2] = fut[:, order] / 50.0
            tokens[i, :, 1:k + 1, 2:4] = vel[:, order] / 20.0
            tokens[i, :, 1:k + 1, 4] = conf[order]
            tokens[i, :, 1:k + 1, 5:] = onehot
            positions[i, 1:k + 1] = pos[order]
            in_range[i, 1:k + 1] = rng_flag[order]
            valid[i, 1:k + 1] = vm[order]
    f = torch.float32
    return EncoderInputs(torch.as_tensor(tokens, dtype=f), torch.as_tensor(positions, dtype=f),
                         torch.as_tensor(in_range), torch.as_tensor(valid), torch.as_tensor(context, dtype=f),
                         torch.as_tensor(style_idx))


class StyleEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.kappa = nn.Parameter(torch.tensor(float(cfg.kappa_init)))
        self.token_in = nn.Sequential(nn.Linear(RAW_FEATURES, d), nn.SiLU(), nn.Linear(d, d))
        self.context_in = nn.Sequential(nn.Linear(CONTEXT_FEATURES, d), nn.SiLU(), nn.Linear(d, d))
        self.style_embed = nn.Embedding(len(STYLE_TAGS), d)
        nn.init.normal_(self.style_embed.weight, std=1.0)
        self.slot_embed = nn.Parameter(torch.zeros(2, d))
        self.register_buffer("time_embed", sinusoidal(torch.arange(cfg.t_pred), d).float())
        self.norm1 = nn.LayerNorm(d)
        self.agent_attn = BiasedSelfAttention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.grid_attn = BiasedSelfAttention(d, cfg.n_heads)
        self.r_temporal = nn.Parameter(temporal_relative_init(cfg.t_pred).float())
        self.w_s = nn.Parameter(torch.randn(d, 3 * d) / math.sqrt(3 * d))
        self.rel_embed = nn.Sequential(nn.Linear(2, d), nn.SiLU(), nn.Linear(d, d))
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.norm_out = nn.LayerNorm(d)

    @torch.no_grad()
    def clamp_(self):
        self.kappa.clamp_(1e-4, 1.0)

    def attention_bias(self, inp: EncoderInputs, fixed_attention: bool = False):
        valid = inp.valid
        pos = inp.positions * valid[..., None].to(inp.positions.dtype)
        dist = pairwise_distances(pos, inp.in_range)
        kappa = self.kappa
        if fixed_attention:
            dist = torch.zeros_like(dist)
        return build_attention_mask(dist, kappa, self.cfg.n_heads, valid)

    def forward(self, inp: EncoderInputs, fixed_attention: bool = False, return_attention: bool = False):
        cfg = self.cfg
        b, t, n, _ = inp.tokens.shape
        d = cfg.d_model
        valid = inp.valid.bool()
        vf = valid.to(inp.tokens.dtype)
        slot = torch.zeros(n, dtype=torch.long, device=inp.tokens.device)
        slot[1:] = 1
        h = self.token_in(inp.tokens) * vf[:, None, :, None]
        h = (h + self.time_embed[:t, None, :] + self.slot_embed[slot][None, None]
             + self.context_in(inp.context)[:, None, None, :] + self.style_embed(inp.style)[:, None, None, :])

        # stage 1: distance-biased attention among agents at every time step
        bias = self.attention_bias(inp, fixed_attention)
        bias_t = bias.unsqueeze(1).expand(b, t, *bias.shape[1:]).reshape(b * t, *bias.shape[1:])
        flat = h.reshape(b * t, n, d)
        a1, w1 = self.agent_attn(self.norm1(flat), bias=bias_t, return_weights=True)
        h = (flat + a1).reshape(b, t, n, d)

        # stage 2: grid attention reweighted by the Kronecker spatio-temporal prior
        hn = self.norm2(h)
        denom = vf.sum(-1).clamp(min=1.0)
        v_time = (hn * vf[:, None, :, None]).sum(2) / denom[:, None, None]
        v_agent = hn.mean(1) * vf[..., None]
        log_at = log_temporal_attention(v_time, cfg.gamma_t, self.r_temporal[:t, :t])
        pos = inp.positions * vf[..., None]
        a_s = spatial_attention(v_agent, pos, self.w_s, self.rel_embed)
        log_prior = (log_at[:, :, None, :, None] + torch.log(a_s)[:, None, :, None, :]).reshape(b, t * n, t * n)
        if t * n > cfg.fusion_cap:
            raise ResourceError(f"fused attention size {t * n} exceeds cap {cfg.fusion_cap}")
        token_valid = valid[:, None, :].expand(b, t, n).reshape(b, t * n)
        grid = hn.reshape(b, t * n, d)
        h = h.reshape(b, t * n, d) + self.grid_attn(grid, log_prior=log_prior, key_valid=token_valid)
        h = h + self.ffn(self.norm3(h))
        z = self.norm_out(h)
        if return_attention:
            return z, token_valid, w1.reshape(b, t, *w1.shape[1:])
        return z, token_valid

    def encode(self, inp: EncoderInputs, fixed_attention: bool = False) -> StyleFeatures:
        z, tv = self(inp, fixed_attention=fixed_attention)
        return StyleFeatures(z, tv, tuple(STYLE_TAGS[int(i)] for i in inp.style))


def encode(scenarios, styles, encoder: StyleEncoder, fixed_attention: bool = False) -> StyleFeatures:
    """Scenario(s) + style(s) -> z_style of shape B x (n_max * t_pred) x d_model."""
    inp = build_inputs(scenarios, styles, encoder.cfg)
    dtype = next(encoder.parameters()).dtype
    return encoder.encode(inp.to(dtype), fixed_attention=fixed_attention)
