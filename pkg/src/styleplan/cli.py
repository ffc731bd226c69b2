"""Command-line harness: train, plan, rollout, ablate, sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, restore_adam, save_checkpoint
from .diffusion import Telemetry, build_schedule
from .errors import ConfigurationError, InputError, NumericalError, StylePlanError
from .guidance import STYLE_TAGS, GuidanceConfig
from .metrics import METRIC_COLUMNS, kinematics, timeline_from_plan, compute_metrics, write_metrics_csv
from .planning import (VARIANTS, PlannerBundle, closed_loop, evaluate, plan, reference_progress,
                       scenario_suite)
from .scenario import KINDS, GenerationParams, generate_scenario, load_scenario, save_scenario
from .training import desk_planner, make_expert_dataset, train

log = logging.getLogger("styleplan")

DEFAULT_ALPHAS = (0.8, 1.0, 1.2, 1.4, 1.6)
DEFAULT_BETAS = (1.5, 2.0, 2.5, 2.75, 3.0)
REFERENCE_CELL = (1.2, 2.5)
TRAJECTORY_FORMAT = 1


def _float(v) -> str:
    return repr(float(v))


def parse_grid(text: Optional[str]):
    """``"a1,a2,...:b1,b2,..."`` -> (alphas, betas); ``None`` gives the default grid."""
    if text is None:
        return list(DEFAULT_ALPHAS), list(DEFAULT_BETAS)
    try:
        a_txt, b_txt = text.split(":")
        alphas = [float(x) for x in a_txt.split(",") if x.strip()]
        betas = [float(x) for x in b_txt.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"cannot parse grid {text!r}; expected 'a1,a2,...:b1,b2,...'") from None
    if not alphas or not betas:
        raise ConfigurationError("sweep grid is empty")
    if any(v < 0 or not math.isfinite(v) for v in alphas + betas):
        raise ConfigurationError("grid values must be finite and non-negative")
    return alphas, betas


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("--checkpoint", type=Path, default=None)
    common.add_argument("--scenario-kind", choices=KINDS, default=None)
    common.add_argument("--scenario-file", type=Path, default=None)
    common.add_argument("--style", choices=STYLE_TAGS, default=None)
    common.add_argument("--variant", choices=VARIANTS, default="full")
    common.add_argument("--guidance", choices=("on", "off"), default="on")
    common.add_argument("--alpha-max", type=float, default=None)
    common.add_argument("--beta-max", type=float, default=None)
    common.add_argument("--n-agents", type=int, default=None, help="generator agent count")
    common.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="styleplan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train on synthetic expert trajectories")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--n-scenes", type=int, default=400)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--repeats", type=int, default=32, help="noise draws per encoded scene")
    t.add_argument("--resume", action="store_true", help="continue from --checkpoint")

    for name, helptext in (("plan", "one open-loop plan"), ("rollout", "closed-loop replanning rollout")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--horizon", type=float, default=5.0)

    a = sub.add_parser("ablate", parents=[common], help="compare ablation variants on a scenario suite")
    a.add_argument("--suite-size", type=int, default=8)
    a.add_argument("--loop", choices=("open", "closed"), default="closed")
    a.add_argument("--horizon", type=float, default=5.0)

    s = sub.add_parser("sweep", parents=[common], help="aggregate over an (alpha_max, beta_max) grid")
    s.add_argument("--grid", default=None, help="'a1,a2,...:b1,b2,...'")
    s.add_argument("--suite-size", type=int, default=8)
    s.add_argument("--loop", choices=("open", "closed"), default="open")
    s.add_argument("--horizon", type=float, default=5.0)
    return p


# ---------------------------------------------------------------- helpers

def _prepare_out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def _write_sidecar(out: Path, args, extra: Optional[dict] = None):
    """Timestamps and host details live here so every other artifact stays byte-reproducible."""
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "python": platform.python_version(),
        "torch": torch.__version__,
    }
    meta.update(extra or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _guidance_cfg(base: GuidanceConfig, args) -> GuidanceConfig:
    cfg = base
    if args.alpha_max is not None:
        cfg = replace(cfg, alpha_max=args.alpha_max)
    if args.beta_max is not None:
        cfg = replace(cfg, beta_max=args.beta_max)
    return cfg


def _bundle(args) -> PlannerBundle:
    if args.checkpoint is None:
        raise ConfigurationError("--checkpoint is required")
    ck = load_checkpoint(args.checkpoint)
    return PlannerBundle(ck.model, ck.sched, _guidance_cfg(ck.guidance, args), ck.max_shift)


def _scenario(args):
    if args.scenario_file is not None:
        return load_scenario(args.scenario_file)
    params = GenerationParams() if args.n_agents is None else GenerationParams(n_agents=args.n_agents)
    return generate_scenario(args.scenario_kind or "straight", args.seed, params)


def _suite_kinds(args):
    return (args.scenario_kind,) if args.scenario_kind else KINDS


def _suite_styles(args):
    return [args.style] if args.style else list(STYLE_TAGS)


def _write_trajectory(path: Path, points: np.ndarray, dt: float, style: str, frame: str, extra=None):
    doc = {"format_version": TRAJECTORY_FORMAT, "frame": frame, "dt": dt, "style": style,
           "points": [[float(x), float(y)] for x, y in np.asarray(points)]}
    doc.update(extra or {})
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _metric_row(key: dict, report) -> dict:
    row = dict(key)
    row.update(report.to_row())
    return row


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    out = _prepare_out(args)
    torch.manual_seed(args.seed)
    kinds = _suite_kinds(args)
    params = GenerationParams() if args.n_agents is None else GenerationParams(n_agents=args.n_agents)
    start_step, total = 0, args.steps
    opt_state = None
    if args.resume:
        if args.checkpoint is None or not Path(args.checkpoint).is_file():
            raise ConfigurationError("--resume needs an existing --checkpoint")
        ck = load_checkpoint(args.checkpoint)
        model, sched, meta = ck.model, ck.sched, ck.meta
        start_step = int(meta.get("step", 0))
        total = start_step + args.steps
        opt_state = ck.optimizer_state
        data = make_expert_dataset(meta.get("n_scenes", args.n_scenes), meta.get("data_seed", args.seed),
                                   tuple(meta.get("kinds", kinds)), params=params)
        model.train()
    else:
        data = make_expert_dataset(args.n_scenes, args.seed, kinds, params=params)
        model = desk_planner(data)
        sched = build_schedule()
    opt = restore_adam(model, opt_state, args.lr)
    ck_path = Path(args.checkpoint) if args.checkpoint is not None else out / "model.sddp"
    inputs = data.inputs(model)
    per_epoch = max(1, math.ceil(len(data) / args.batch_size))
    loss_path = out / "loss.csv"
    rows = []
    if args.resume and loss_path.is_file():
        with open(loss_path) as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= start_step]
    step = start_step
    meta = {"n_scenes": len(data) // len(STYLE_TAGS), "data_seed": args.seed if not args.resume
            else meta.get("data_seed", args.seed), "kinds": list(kinds)}

    def save(at):
        save_checkpoint(ck_path, model, sched, meta={**meta, "step": at}, optimizer=opt)

    while step < total:
        n = min(per_epoch, total - step)
        try:
            hist = train(model, data, sched, n, args.batch_size, args.lr, args.seed, args.repeats,
                         optimizer=opt, inputs=inputs, start_step=step, total_steps=total)
        except NumericalError:
            log.error("training diverged after step %d; last good checkpoint kept at %s", step, ck_path)
            raise
        step += n
        model.train()
        rows.append({"epoch": len(rows) + 1, "step": step, "mean_loss": _float(np.mean(hist)),
                     "lr": _float(opt.param_groups[0]["lr"])})
        save(step)
        log.info("epoch %d step %d loss %.4f", len(rows), step, np.mean(hist))
    model.eval()
    with open(loss_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["epoch", "step", "mean_loss", "lr"])
        wr.writeheader()
        wr.writerows(rows)
    if not args.no_plots:
        from .plots import plot_loss
        plot_loss(out / "loss.png", [float(r["mean_loss"]) for r in rows])
    _write_sidecar(out, args, {"checkpoint": str(ck_path), "steps": step})
    print(f"trained to step {step}; checkpoint {ck_path}; loss curve {loss_path}")
    return 0


def cmd_plan(args) -> int:
    out = _prepare_out(args)
    bundle = _bundle(args)
    sc = _scenario(args)
    style = args.style or "normal"
    guided = args.guidance == "on"
    tel = Telemetry() if guided else None
    traj = plan(bundle, [sc], [style], args.seed, guidance=guided, variant=args.variant, telemetry=tel)[0]
    save_scenario(sc, out / "scenario.json")
    _write_trajectory(out / "plan.json", traj, bundle.dt, style, "ego")
    ref = reference_progress(sc, len(traj), bundle.dt)
    rep = compute_metrics(timeline_from_plan(sc, traj, bundle.dt, ref), style)
    key = {"scenario": sc.kind, "scenario_seed": sc.seed, "style": style, "seed": args.seed,
           "variant": args.variant, "guidance": args.guidance}
    write_metrics_csv(out / "metrics.csv", [_metric_row(key, rep)], list(key))
    if tel is not None:
        tel.to_csv(out / "telemetry.csv", sample=0)
    if not args.no_plots:
        from .plots import plot_plan, plot_telemetry
        plot_plan(out / "plan.png", sc, {style: traj}, f"{sc.kind} seed {sc.seed}")
        if tel is not None:
            plot_telemetry(out / "telemetry.png", [r for r in tel.rows if r["sample"] == 0])
    _write_sidecar(out, args)
    print(f"aggregate {rep.aggregate:.2f}  nc {rep.nc:.0f}  dac {rep.dac:.1f}  progress {rep.progress:.1f}  "
          f"mean speed {rep.mean_speed:.2f} m/s")
    return 0


def cmd_rollout(args) -> int:
    out = _prepare_out(args)
    bundle = _bundle(args)
    sc = _scenario(args)
    style = args.style or "normal"
    lg = closed_loop(bundle, [sc], [style], args.seed, horizon=args.horizon, guidance=args.guidance == "on",
                     variant=args.variant, guidance_cfg=bundle.guidance)[0]
    save_scenario(sc, out / "scenario.json")
    _write_trajectory(out / "rollout.json", lg.ego, bundle.dt, style, "scenario",
                      {"headings": [float(h) for h in lg.headings], "failed": lg.failed,
                       "failure": lg.failure, "replans": len(lg.plans)})
    key = {"scenario": sc.kind, "scenario_seed": sc.seed, "style": style, "seed": args.seed,
           "variant": args.variant, "guidance": args.guidance}
    if lg.report is not None:
        write_metrics_csv(out / "metrics.csv", [_metric_row(key, lg.report)], list(key))
    if not args.no_plots:
        from .plots import plot_plan
        plot_plan(out / "rollout.png", sc, {style: lg.ego}, f"closed loop, {sc.kind} seed {sc.seed}")
    _write_sidecar(out, args, {"failed": lg.failed})
    if lg.failed:
        print(f"rollout truncated after {len(lg.ego) - 1} steps: {lg.failure}")
        raise NumericalError(lg.failure)
    print(f"aggregate {lg.report.aggregate:.2f}  progress {lg.report.progress:.1f}  nc {lg.report.nc:.0f}")
    return 0


def cmd_ablate(args) -> int:
    out = _prepare_out(args)
    bundle = _bundle(args)
    suite = scenario_suite(args.suite_size, args.seed, _suite_kinds(args))
    styles = _suite_styles(args)
    scenes = [sc for sc in suite for _ in styles]
    scene_styles = [st for _ in suite for st in styles]
    guided = args.guidance == "on"
    rows, summary, traces = [], [], {}
    for variant in VARIANTS:
        evs = evaluate(bundle, scenes, scene_styles, args.seed, variant, guided, args.loop, args.horizon,
                       bundle.guidance)
        scored = [e for e in evs if e.report is not None]
        for e in scored:
            rows.append(_metric_row({"variant": variant, "scenario": e.scenario.kind,
                                     "scenario_seed": e.scenario.seed, "style": e.style, "seed": args.seed},
                                    e.report))
        curved = [e for e in scored if e.scenario.kind == "curve"]
        summary.append({
            "variant": variant,
            "mean_aggregate": _float(np.mean([e.report.aggregate for e in scored])),
            "mean_max_abs_jerk": _float(np.mean([e.report.max_abs_jerk for e in scored])),
            "mean_max_abs_jerk_curve": _float(np.mean([e.report.max_abs_jerk for e in curved])) if curved else "",
            "n_cases": len(scored),
        })
        if curved:
            traces[variant] = curved[0].accel
    write_metrics_csv(out / "ablation.csv", rows, ["variant", "scenario", "scenario_seed", "style", "seed"])
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(summary[0]))
        wr.writeheader()
        wr.writerows(summary)
    if traces:
        with open(out / "accel_traces.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["variant", "time", "accel"])
            for v, acc in traces.items():
                for i, a in enumerate(acc):
                    wr.writerow([v, _float(i * bundle.dt), _float(a)])
        if not args.no_plots:
            from .plots import plot_accel_traces
            plot_accel_traces(out / "accel_traces.png", traces, bundle.dt, "first curved scene of the suite")
    _write_sidecar(out, args)
    for s in summary:
        print(f"{s['variant']:>16}  aggregate {float(s['mean_aggregate']):6.2f}  "
              f"max|jerk| {float(s['mean_max_abs_jerk']):6.2f}")
    return 0


def cmd_sweep(args) -> int:
    alphas, betas = parse_grid(args.grid)
    out = _prepare_out(args)
    bundle = _bundle(args)
    suite = scenario_suite(args.suite_size, args.seed, _suite_kinds(args))
    styles = _suite_styles(args)
    scenes = [sc for sc in suite for _ in styles]
    scene_styles = [st for _ in suite for st in styles]
    scores = np.zeros((len(alphas), len(betas)))
    rows = []
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            cfg = replace(bundle.guidance, alpha_max=a, beta_max=b)
            evs = [e for e in evaluate(bundle, scenes, scene_styles, args.seed, args.variant,
                                       args.guidance == "on", args.loop, args.horizon, cfg)
                   if e.report is not None]
            scores[i, j] = float(np.mean([e.report.aggregate for e in evs]))
            rows.append([_float(a), _float(b), _float(scores[i, j]), len(evs)])
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["alpha_max", "beta_max", "mean_aggregate", "n_cases"])
        wr.writerows(rows)
    if not args.no_plots:
        from .plots import plot_sweep
        plot_sweep(out / "sweep.png", alphas, betas, scores, REFERENCE_CELL)
    best = np.unravel_index(int(np.argmax(scores)), scores.shape)
    _write_sidecar(out, args, {"reference_cell": list(REFERENCE_CELL),
                               "note": "reference cell is the full-scale optimum, shown for comparison only"})
    print(f"{len(rows)} cells; best (alpha_max={alphas[best[0]]}, beta_max={betas[best[1]]}) "
          f"aggregate {scores[best]:.2f}")
    return 0


COMMANDS = {"train": cmd_train, "plan": cmd_plan, "rollout": cmd_rollout, "ablate": cmd_ablate,
            "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StylePlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
