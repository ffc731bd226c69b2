"""Synthetic expert datasets and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .diffusion import DenoiserConfig, NoiseSchedule, Planner, training_loss
from .encoder import EncoderConfig, EncoderInputs, build_inputs
from .errors import NumericalError
from .expert import expert_trajectory
from .guidance import STYLE_TAGS
from .scenario import KINDS, GenerationParams, generate_scenario

log = logging.getLogger(__name__)


@dataclass
class ExpertDataset:
    scenarios: list
    styles: list
    trajectories: np.ndarray  # (M, K, 2)

    def __len__(self):
        return len(self.scenarios)

    def inputs(self, model: Planner) -> EncoderInputs:
        return build_inputs(self.scenarios, self.styles, model.enc_cfg)


def make_expert_dataset(n_scenes: int, seed: int, kinds: Sequence[str] = KINDS,
                        styles: Sequence[str] = STYLE_TAGS, params: Optional[GenerationParams] = None,
                        t_pred: int = 50, dt: float = 0.1, slow_lead_every: int = 4) -> ExpertDataset:
    """Every scene is paired with every style; scene seeds derive from ``seed``.

    Every ``slow_lead_every``-th scene (0 disables) carries a slow vehicle
    ahead in the ego lane so the data covers hard braking.
    """
    ss = np.random.SeedSequence(seed)
    scene_seeds = ss.generate_state(n_scenes)
    params = params or GenerationParams()
    scenarios, style_list, trajs = [], [], []
    for i in range(n_scenes):
        kind = kinds[i % len(kinds)]
        slow = bool(slow_lead_every) and i % slow_lead_every == slow_lead_every - 1
        sc = generate_scenario(kind, int(scene_seeds[i]), params, slow_lead=slow or params.slow_lead)
        for st in styles:
            scenarios.append(sc)
            style_list.append(st)
            trajs.append(expert_trajectory(sc, st, t_pred, dt))
    return ExpertDataset(scenarios, style_list, np.asarray(trajs))


def train(model: Planner, data: ExpertDataset, sched: NoiseSchedule, steps: int, batch_size: int = 32,
          lr: float = 1e-3, seed: int = 0, repeats: int = 32, clip: float = 1.0,
          optimizer: Optional[torch.optim.Optimizer] = None, inputs: Optional[EncoderInputs] = None,
          callback: Optional[Callable[[int, float], None]] = None, cosine: bool = True,
          start_step: int = 0, total_steps: Optional[int] = None) -> list[float]:
    """Adam on the epsilon-prediction loss; kappa is clamped to (0, 1] after every update.

    With ``cosine`` the learning rate decays from ``lr`` to ``lr / 20`` over
    ``total_steps`` (default ``start_step + steps``); a resumed run passes the
    original ``start_step``/``total_steps`` so the schedule continues.
    """
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([int(seed), int(start_step)]).generate_state(1)[0]))
    dtype = next(model.parameters()).dtype
    inputs = (inputs or data.inputs(model)).to(dtype)
    x0 = torch.as_tensor(data.trajectories, dtype=dtype)
    opt = optimizer or torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    n = len(data)
    total = total_steps if total_steps is not None else start_step + steps
    for step in range(start_step, start_step + steps):
        if cosine:
            frac = min(step / max(total, 1), 1.0)
            for g in opt.param_groups:
                g["lr"] = lr * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * frac)))
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        loss = training_loss(model, inputs.index(idx), x0[idx], sched, gen, repeats=repeats)
        opt.zero_grad()
        loss.backward()
        if clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
        grads_ok = all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)
        if not grads_ok:
            raise NumericalError(f"non-finite gradient at training step {step}")
        opt.step()
        model.encoder.clamp_()
        history.append(float(loss.detach()))
        if callback is not None:
            callback(step, history[-1])
    model.eval()
    return history


# model sizes that train in minutes on a laptop CPU; the encoder/denoiser
# config defaults describe the full-size model
DESK_ENCODER = EncoderConfig(d_model=32, n_heads=4, n_max=5)
DESK_DENOISER = DenoiserConfig(width=192)


def desk_planner(data: Optional[ExpertDataset] = None) -> Planner:
    model = Planner(DESK_ENCODER, DESK_DENOISER)
    if data is not None:
        model.set_normalization(data.trajectories)
    return model
