"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE_COLORS = {"aggressive": "tab:red", "normal": "tab:blue", "conservative": "tab:green"}
VARIANT_COLORS = {"full": "black", "fixed_attention": "tab:orange", "fixed_guidance": "tab:purple",
                  "full_ablation": "tab:red"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_plan(path, scenario, plans: Mapping[str, np.ndarray], title: str = "") -> Path:
    """Lanes, agents (current position plus constant-velocity arrow) and one or more plans."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for lane in scenario.lanes:
        c = np.asarray(lane.centerline)
        ax.plot(c[:, 0], c[:, 1], color="0.7", lw=0.8, ls="--")
    r = np.asarray(scenario.route)
    ax.plot(r[:, 0], r[:, 1], color="0.4", lw=1.0, label="route")
    for a in scenario.agents:
        mk = "o" if a.confidence >= 0.6 else "x"
        ax.plot(*a.position, mk, color="tab:gray", ms=4)
        ax.arrow(a.position[0], a.position[1], a.velocity[0] * 0.5, a.velocity[1] * 0.5,
                 color="tab:gray", width=0.05, length_includes_head=True)
    for light in scenario.traffic_lights:
        ax.plot(*light.position, "s", color={"red": "red", "yellow": "gold", "green": "green"}[light.phase])
    for label, traj in plans.items():
        traj = np.asarray(traj)
        ax.plot(traj[:, 0], traj[:, 1], lw=1.8, color=STYLE_COLORS.get(label), label=label)
    ax.plot(*scenario.ego.position, "k^", ms=7, label="ego")
    pts = np.vstack([np.asarray(t) for t in plans.values()] + [np.asarray(scenario.ego.position)[None]])
    lo, hi = pts.min(0) - 15, pts.max(0) + 15
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(min(lo[1], -15), max(hi[1], 15))
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=7, loc="upper left")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_telemetry(path, rows: Sequence[dict]) -> Path:
    """Guidance scale, fused weights and both energies against the diffusion step."""
    t = np.array([r["t"] for r in rows])
    fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
    axes[0].plot(t, [r["lambda"] for r in rows], color="k")
    axes[0].set_ylabel("lambda")
    axes[1].plot(t, [r["w_collision"] for r in rows], label="w_collision")
    axes[1].plot(t, [r["w_speed"] for r in rows], label="w_speed")
    axes[1].set_ylabel("weight")
    axes[1].legend(fontsize=7)
    axes[2].semilogy(t, np.maximum([r["E_collision"] for r in rows], 1e-12), label="E_collision")
    axes[2].semilogy(t, np.maximum([r["E_speed"] for r in rows], 1e-12), label="E_speed")
    axes[2].set_ylabel("energy")
    axes[2].set_xlabel("diffusion step t")
    axes[2].legend(fontsize=7)
    axes[2].invert_xaxis()
    return _save(fig, path)


def plot_accel_traces(path, traces: Mapping[str, np.ndarray], dt: float, title: str = "") -> Path:
    """Longitudinal acceleration over time, one line per ablation variant."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for name, acc in traces.items():
        acc = np.asarray(acc)
        ax.plot(np.arange(len(acc)) * dt, acc, lw=1.2, color=VARIANT_COLORS.get(name), label=name)
    ax.axhline(0.0, color="0.8", lw=0.6)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("acceleration [m/s^2]")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_sweep(path, alphas: Sequence[float], betas: Sequence[float], scores: np.ndarray,
               reference: Optional[tuple] = None) -> Path:
    """Heatmap of the suite-mean aggregate; ``scores[i, j]`` belongs to (alphas[i], betas[j])."""
    scores = np.asarray(scores, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(scores, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(betas)))
    ax.set_xticklabels([f"{b:g}" for b in betas])
    ax.set_yticks(range(len(alphas)))
    ax.set_yticklabels([f"{a:g}" for a in alphas])
    ax.set_xlabel("beta_max")
    ax.set_ylabel("alpha_max")
    for i in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            ax.text(j, i, f"{scores[i, j]:.1f}", ha="center", va="center", fontsize=7, color="w")
    if reference is not None and reference[0] in alphas and reference[1] in betas:
        i, j = list(alphas).index(reference[0]), list(betas).index(reference[1])
        ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, ec="red", lw=2))
    fig.colorbar(im, ax=ax, label="mean aggregate")
    return _save(fig, path)


def plot_loss(path, losses: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(np.arange(1, len(losses) + 1), losses, lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean epsilon loss")
    return _save(fig, path)
