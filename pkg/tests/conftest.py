"""Shared fixtures.  The trained desk model is built once per session (about five minutes on one CPU)."""

import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from styleplan.checkpoint import save_checkpoint
from styleplan.diffusion import NoiseSchedule, Planner, build_schedule
from styleplan.planning import PlannerBundle
from styleplan.training import ExpertDataset, desk_planner, make_expert_dataset, train

TRAIN_SCENES = 400
TRAIN_STEPS = 2000
TRAIN_BATCH = 16


@dataclass
class TrainedModel:
    model: Planner
    sched: NoiseSchedule
    data: ExpertDataset
    losses: list
    seconds: float

    @property
    def bundle(self) -> PlannerBundle:
        return PlannerBundle(self.model, self.sched)


@pytest.fixture(scope="session")
def trained():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    data = make_expert_dataset(TRAIN_SCENES, 0)
    model = desk_planner(data)
    sched = build_schedule()
    losses = train(model, data, sched, TRAIN_STEPS, batch_size=TRAIN_BATCH, seed=0)
    model.eval()
    return TrainedModel(model, sched, data, losses, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def trained_checkpoint(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.sddp"
    save_checkpoint(path, trained.model, trained.sched, meta={"step": TRAIN_STEPS})
    return path


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
