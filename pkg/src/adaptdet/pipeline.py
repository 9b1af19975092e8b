"""End-to-end run lifecycle shared by the CLI and the experiment tests:
data generation, detector pre-training and per-method training."""

from __future__ import annotations

import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np

from . import detector as det
from . import fusion
from . import meta
from . import supervisor as sup
from . import world as W
from .config import RunConfig
from .evalbench import EvalSetup, TrainedModel

log = logging.getLogger(__name__)

# trained artefact -> how it is trained
TRAINABLE = {
    "interactron": dict(policy="learned", repeat_first=False),
    "interactron-rand": dict(policy="random", repeat_first=False),
    "repeated-first-frame": dict(policy="random", repeat_first=True),
    "multi-frame": None,
}

TASK_SPLITS = ("train", "test", "test_b")
FRAME_SPLITS = ("pretrain", "pretrain_b")


class PipelineError(RuntimeError):
    pass


def split_world(cfg: RunConfig, split: str) -> W.WorldConfig:
    return dataclasses.replace(cfg.world, appearance_domain=W.SPLITS[split].appearance_domain)


def generate(cfg: RunConfig, split: str, seed: int = 0, n: Optional[int] = None, count: Optional[int] = None):
    """Tasks (train/test splits) or single frames (pre-training splits)."""
    if split not in W.SPLITS:
        raise PipelineError(f"unknown split {split!r}; expected one of {sorted(W.SPLITS)}")
    ev = cfg.eval
    if split in FRAME_SPLITS:
        count = ev.pretrain_frames if count is None else count
        return W.sample_frames(count, W.SPLITS[split], cfg.world, first_seed=seed)
    count = (ev.num_train_tasks if split == "train" else ev.num_test_tasks) if count is None else count
    return W.sample_tasks(count, W.SPLITS[split], cfg.world, cfg.meta.n if n is None else n, first_seed=seed)


def frame_arrays(frames: Sequence[W.Frame]) -> tuple[np.ndarray, list[det.Target]]:
    images = np.stack([f.image for f in frames]).astype(np.float64)
    return images, [det.Target.from_annotations(f.annotations) for f in frames]


def pretrain_detector(frames: Sequence[W.Frame], cfg: RunConfig):
    images, targets = frame_arrays(frames)
    return det.pretrain(images, targets, cfg.detector, cfg.pretrain)


def setup_of(cfg: RunConfig) -> EvalSetup:
    return EvalSetup(cfg.detector, cfg.supervisor, cfg.meta.alpha, cfg.meta.test_action)


class Trainer:
    """Trains the per-seed models of each method from one pre-trained detector."""

    def __init__(self, cfg: RunConfig, det_params: dict, train_tasks: Sequence[W.TaskInstance]):
        self.cfg = cfg
        self.det_params = det_params
        self.tasks = list(train_tasks)
        n = {t.n for t in self.tasks}
        if len(n) != 1:
            raise PipelineError(f"training tasks mix rollout lengths {sorted(n)}")
        self.n = n.pop()
        self._tds = None

    @property
    def task_data(self) -> list[meta.TaskData]:
        if self._tds is None:
            self._tds = meta.prepare_tasks(self.tasks, self.det_params, self.cfg.detector)
        return self._tds

    def meta_config(self, name: str, seed: int) -> meta.MetaConfig:
        return dataclasses.replace(self.cfg.meta, seed=seed, n=self.n, **TRAINABLE[name])

    def train(self, name: str, seed: int, log_path=None):
        """``(TrainedModel, state)``; ``state`` is a meta.TrainState or the fusion history."""
        if name not in TRAINABLE:
            raise PipelineError(f"{name!r} is not a trainable model; expected one of {sorted(TRAINABLE)}")
        cfg = self.cfg
        log.info("training %s (seed %d) on %d tasks", name, seed, len(self.tasks))
        if name == "multi-frame":
            schedule = dataclasses.replace(cfg.fusion, seed=seed)
            fp, history = fusion.train_fusion(self.task_data, self.det_params, cfg.supervisor, cfg.detector, schedule)
            return TrainedModel("fusion", self.det_params, fp), history
        mc = self.meta_config(name, seed)
        model = meta.Model(cfg.detector, cfg.supervisor, self.n, mc.alpha)
        sp = sup.init_supervisor(cfg.supervisor, self.n, seed)
        state = meta.train(mc, self.task_data, self.det_params, sp, model, log_path=log_path)
        return TrainedModel("meta", state.det_params, state.sup_params), state
