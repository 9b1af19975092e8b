"""Baseline and ablation matrix, synthetic domain transfer, and result export.

Every method is scored on the initial frame of each test task. Ground truth
is read here, after inference, and never handed to the inference paths.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import detector as det
from . import fusion
from . import meta
from . import metrics
from . import rng as rngmod
from . import supervisor as sup
from .world import TaskInstance

log = logging.getLogger(__name__)

METHODS = (
    "single-frame",
    "multi-frame",
    "interactron-rand",
    "interactron",
    "no-train-at-test",
    "repeated-first-frame",
)

# trained model each method runs with
CHECKPOINT_OF = {
    "single-frame": "detector",
    "multi-frame": "multi-frame",
    "interactron-rand": "interactron-rand",
    "interactron": "interactron",
    "no-train-at-test": "interactron",
    "repeated-first-frame": "repeated-first-frame",
}

# policy each method acts with at test time
POLICY_OF = {
    "single-frame": None,
    "multi-frame": "random",
    "interactron-rand": "random",
    "interactron": "learned",
    "no-train-at-test": "learned",
    "repeated-first-frame": "random",
}

METRIC_KEYS = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


class EvalError(RuntimeError):
    pass


class MissingCheckpointError(EvalError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    method: str
    n: int = 4
    seeds: tuple[int, ...] = (0, 1, 2)
    split: str = "test"
    appearance_domain: int = 0
    policy: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise EvalError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise EvalError("an experiment needs at least one seed")
        if self.n < 1:
            raise EvalError("n must be >= 1")
        natural = POLICY_OF[self.method]
        if self.policy is not None and self.policy != natural:
            if self.method == "repeated-first-frame" and self.policy == "learned":
                raise EvalError("repeated-first-frame cannot use a learned policy: every frame is frame 0")
            raise EvalError(f"method {self.method!r} runs with policy {natural!r}, not {self.policy!r}")

    @property
    def checkpoint(self) -> str:
        return CHECKPOINT_OF[self.method]


@dataclass
class TrainedModel:
    """Parameters a method needs: the detector, plus supervisor or fusion weights."""

    kind: str  # detector | meta | fusion
    det_params: dict
    aux_params: Optional[dict] = None


@dataclass(frozen=True)
class EvalSetup:
    det_cfg: det.DetectorConfig
    sup_cfg: sup.SupervisorConfig
    alpha: float = 1e-2
    test_action: str = "greedy"


@dataclass
class ExperimentResult:
    method: str
    per_seed: dict[int, metrics.EvalResult]

    def values(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.per_seed.values()])

    def mean(self, key: str = "AP50") -> float:
        return float(self.values(key).mean())

    def std(self, key: str = "AP50") -> float:
        # population stddev over seeds
        return float(self.values(key).std())

    def summary(self) -> dict:
        return {k: {"mean": self.mean(k), "std": self.std(k)} for k in METRIC_KEYS}


def ground_truth(task: TaskInstance) -> det.Target:
    return det.Target.from_annotations(task.initial_frame.annotations)


def score(dets: det.DetectionSet, tasks: Sequence[TaskInstance], num_classes: int) -> metrics.EvalResult:
    s, lab, b = det.detections_for_eval(dets)
    images = []
    for i, task in enumerate(tasks):
        gt = ground_truth(task)
        images.append(metrics.ImageDetections.from_cxcywh(s[i], lab[i], b[i], gt.classes, gt.boxes))
    return metrics.evaluate(images, num_classes)


def random_rollouts(tasks: Sequence[TaskInstance], seed: int) -> list[int]:
    return [int(rngmod.child(seed, "rollout", t.task_id).integers(t.trajectories.shape[0])) for t in tasks]


def infer(method: str, model: TrainedModel, tasks: Sequence[TaskInstance], setup: EvalSetup, seed: int) -> det.DetectionSet:
    """The method's inference path on each task's initial frame (label-free)."""
    inputs = [meta.InferenceInputs.from_task(t) for t in tasks]
    cfg = setup.det_cfg
    if method == "single-frame":
        first = np.stack([x.images[x.trajectories[0, 0]] for x in inputs])
        return det.detect(model.det_params, first, cfg)
    if method == "multi-frame":
        trajs = random_rollouts(tasks, seed)
        feats = np.stack([det.image_features(model.det_params, x.images[x.trajectories[k]], cfg) for x, k in zip(inputs, trajs)])
        return fusion.fusion_detect(model.aux_params, model.det_params, feats, setup.sup_cfg, cfg)
    n = int(inputs[0].trajectories.shape[1]) - 1
    m = meta.Model(cfg, setup.sup_cfg, n, setup.alpha)
    kw = dict(seed=seed, greedy=setup.test_action == "greedy")
    if method == "interactron-rand":
        return meta.adapt_and_detect(model.det_params, model.aux_params, inputs, m, rollout="random", **kw)
    if method == "interactron":
        return meta.adapt_and_detect(model.det_params, model.aux_params, inputs, m, rollout="policy", **kw)
    if method == "no-train-at-test":
        return meta.adapt_and_detect(model.det_params, model.aux_params, inputs, m, rollout="policy", adapt=False, **kw)
    if method == "repeated-first-frame":
        return meta.adapt_and_detect(model.det_params, model.aux_params, inputs, m, rollout="repeat", **kw)
    raise EvalError(f"unknown method {method!r}")


def _lookup(checkpoints: Mapping, name: str, seed: int) -> TrainedModel:
    model = checkpoints.get((name, seed))
    if model is None:
        raise MissingCheckpointError(f"missing checkpoint {name!r} for seed {seed}")
    return model


def run_experiment(spec: ExperimentSpec, checkpoints: Mapping, tasks: Sequence[TaskInstance], setup: EvalSetup) -> ExperimentResult:
    """Score ``spec.method`` for every seed; ``checkpoints`` maps (name, seed) to a TrainedModel."""
    for t in tasks:
        if t.n != spec.n:
            raise EvalError(f"task {t.task_id} has n={t.n}, experiment expects n={spec.n}")
    models = {s: _lookup(checkpoints, spec.checkpoint, s) for s in spec.seeds}
    per_seed = {}
    for s in spec.seeds:
        dets = infer(spec.method, models[s], tasks, setup, s)
        per_seed[s] = score(dets, tasks, setup.det_cfg.num_classes)
        log.info("%s seed %d: AP50 %.4f on %d tasks", spec.method, s, per_seed[s].AP50, len(tasks))
    return ExperimentResult(spec.method, per_seed)


@dataclass
class TransferResult:
    frozen: ExperimentResult  # domain-A detector, single frame
    adaptive: ExperimentResult  # domain-A Interactron with adaptation
    upper: ExperimentResult  # detector pre-trained on domain B
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "frozen_a": self.frozen.summary(),
            "adaptive_a": self.adaptive.summary(),
            "pretrained_b": self.upper.summary(),
        }


def run_transfer(
    checkpoints_a: Mapping,
    detector_b: dict,
    tasks_b: Sequence[TaskInstance],
    setup: EvalSetup,
    seeds: Sequence[int] = (0, 1, 2),
) -> TransferResult:
    """Domain-A models on domain-B tasks, against a domain-B pre-trained detector."""
    n = tasks_b[0].n
    seeds = tuple(seeds)
    frozen = run_experiment(ExperimentSpec("single-frame", n, seeds, "test_b", 1), checkpoints_a, tasks_b, setup)
    adaptive = run_experiment(ExperimentSpec("interactron", n, seeds, "test_b", 1), checkpoints_a, tasks_b, setup)
    upper_ckpt = {("detector", s): TrainedModel("detector", detector_b) for s in seeds}
    upper = run_experiment(ExperimentSpec("single-frame", n, seeds, "test_b", 1), upper_ckpt, tasks_b, setup)
    return TransferResult(frozen, adaptive, upper)


# ---------------------------------------------------------------- export


def write_csv(results: Sequence[ExperimentResult], path) -> None:
    """One row per (method, seed)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", *METRIC_KEYS])
        for r in results:
            for s, res in r.per_seed.items():
                w.writerow([r.method, s, *(repr(float(getattr(res, k))) for k in METRIC_KEYS)])


def write_summary(results: Sequence[ExperimentResult], path, extra: Optional[dict] = None) -> dict:
    out = {r.method: r.summary() for r in results}
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
