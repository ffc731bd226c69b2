"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    4 bytes   magic  b"SDDP"
    uint32    format version
    uint64    header length H in bytes
    H bytes   UTF-8 JSON header
    payload   concatenated little-endian float32 tensors, in manifest order

The header holds the schedule, encoder, denoiser and guidance configurations,
free-form training metadata and the parameter manifest (name, shape, offset in
float32 elements).  Optimizer moments, when saved, are ordinary manifest
entries under the ``optim/`` prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .diffusion import DEFAULT_MAX_SHIFT, DenoiserConfig, NoiseSchedule, Planner, build_schedule
from .encoder import EncoderConfig
from .errors import ConfigurationError, InputError
from .guidance import GuidanceConfig

MAGIC = b"SDDP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model: Planner
    sched: NoiseSchedule
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    max_shift: float = DEFAULT_MAX_SHIFT
    meta: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None


def _guidance_to_dict(cfg: GuidanceConfig) -> dict:
    d = asdict(cfg)
    if d["fixed_weights"] is not None:
        d["fixed_weights"] = list(d["fixed_weights"])
    return d


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise InputError(f"unknown {cls.__name__} keys in checkpoint: {sorted(unknown)}")
    return cls(**d)


def _adam_tensors(opt: torch.optim.Optimizer, model: Planner):
    """Flatten Adam moments into named tensors keyed by parameter name."""
    names = {id(p): n for n, p in model.named_parameters()}
    out, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"optim/exp_avg/{n}"] = st["exp_avg"]
            out[f"optim/exp_avg_sq/{n}"] = st["exp_avg_sq"]
            steps[n] = int(st["step"])
    return out, steps


def save_checkpoint(path, model: Planner, sched: NoiseSchedule, guidance: GuidanceConfig = GuidanceConfig(),
                    max_shift: float = DEFAULT_MAX_SHIFT, meta: Optional[dict] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    tensors = dict(model.state_dict())
    adam_steps = {}
    if optimizer is not None:
        extra, adam_steps = _adam_tensors(optimizer, model)
        tensors.update(extra)
    manifest, chunks, offset = [], [], 0
    for name, value in tensors.items():
        # np.ascontiguousarray would promote 0-d tensors (kappa) to 1-d
        arr = np.require(value.detach().cpu().numpy().astype("<f4"), requirements="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "schedule": sched.to_dict(),
        "encoder": model.enc_cfg.to_dict(),
        "denoiser": model.den_cfg.to_dict(),
        "guidance": _guidance_to_dict(guidance),
        "max_shift": float(max_shift),
        "meta": meta or {},
        "adam": {"steps": adam_steps, "lr": optimizer.param_groups[0]["lr"]} if optimizer is not None else None,
        "manifest": manifest,
        "payload_floats": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_header(path) -> tuple[dict, int]:
    """Header dict and the byte offset at which the payload starts."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise InputError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise InputError(f"{path}: not a checkpoint (bad magic {magic!r})")
        if version != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(hlen)
    if len(raw) < hlen:
        raise InputError(f"{path}: truncated checkpoint header")
    return json.loads(raw.decode("utf-8")), _PREFIX.size + hlen


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    header, start = read_header(path)
    payload = np.frombuffer(path.read_bytes(), dtype="<f4", offset=start)
    if payload.size != header["payload_floats"]:
        raise InputError(f"{path}: payload holds {payload.size} floats, header says {header['payload_floats']}")

    enc_cfg = _from_dict(EncoderConfig, header["encoder"])
    den_cfg = _from_dict(DenoiserConfig, header["denoiser"])
    g = dict(header["guidance"])
    if g.get("fixed_weights") is not None:
        g["fixed_weights"] = tuple(g["fixed_weights"])
    guidance = _from_dict(GuidanceConfig, g)
    s = header["schedule"]
    sched = build_schedule(s["T"], s["beta_start"], s["beta_end"])

    model = Planner(enc_cfg, den_cfg)
    tensors = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = payload[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    state = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    expected = model.state_dict()
    missing = set(expected) - set(state)
    if missing or set(state) - set(expected):
        raise InputError(f"{path}: parameter manifest does not match the model configuration")
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise InputError(f"{path}: shape mismatch for {k}")
    model.load_state_dict(state)
    model.eval()

    opt_state = None
    if header.get("adam"):
        opt_state = {"lr": header["adam"]["lr"], "steps": header["adam"]["steps"],
                     "exp_avg": {k.split("/", 2)[2]: v for k, v in tensors.items() if k.startswith("optim/exp_avg/")},
                     "exp_avg_sq": {k.split("/", 2)[2]: v for k, v in tensors.items()
                                    if k.startswith("optim/exp_avg_sq/")}}
    return Checkpoint(model, sched, guidance, float(header.get("max_shift", DEFAULT_MAX_SHIFT)), header.get("meta", {}), opt_state)


def restore_adam(model: Planner, state: Optional[dict], lr: Optional[float] = None) -> torch.optim.Adam:
    """Rebuild an Adam optimizer, reinstating saved moments when present."""
    lr = lr if lr is not None else (state["lr"] if state else 1e-3)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if not state:
        return opt
    for n, p in model.named_parameters():
        if n in state["steps"]:
            opt.state[p] = {"step": torch.tensor(float(state["steps"][n])),
                            "exp_avg": state["exp_avg"][n].clone(),
                            "exp_avg_sq": state["exp_avg_sq"][n].clone()}
    return opt
