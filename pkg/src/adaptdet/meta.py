"""Interactive adaptive meta-learning: inner adaptation, IFGA, exploitation
targets, behaviour cloning, the training loop and label-free inference.

Tasks in a mini-batch are processed together. The adapted detector
parameters are broadcast to one copy per task, ``[B, ...]``, so a single
backward pass of the summed learned loss yields every task's own gradient.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import detector as det
from . import nn
from . import rng as rngmod
from . import supervisor as sup
from .world import TaskInstance

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
POLICIES = ("learned", "random")


class MetaError(RuntimeError):
    pass


class MetaConfigError(MetaError, ValueError):
    pass


class DivergenceError(MetaError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-2
    beta1: float = 3e-5
    beta2: float = 3e-4
    beta3: float = 3e-4
    weight_decay: float = 0.0
    n: int = 4
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    first_order: bool = False
    policy: str = "learned"
    repeat_first: bool = False
    sweep: bool = True
    test_action: str = "greedy"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise MetaConfigError("alpha must be >= 0")
        if self.n < 1:
            raise MetaConfigError("n must be >= 1")
        if self.policy not in POLICIES:
            raise MetaConfigError(f"policy must be one of {POLICIES}")
        if self.repeat_first and self.policy == "learned":
            raise MetaConfigError("a learned policy is meaningless when every frame repeats frame 0")
        if self.test_action not in ("greedy", "sample"):
            raise MetaConfigError("test_action must be 'greedy' or 'sample'")


@dataclass
class TaskData:
    """Label-carrying training view of a task: cached features of every
    reachable frame, per-frame targets and the trajectory index table."""

    task_id: str
    feats: np.ndarray  # [U, P, D]
    targets: list
    trajectories: np.ndarray  # [4**n, n+1]

    @property
    def n(self) -> int:
        return self.trajectories.shape[1] - 1


def prepare_tasks(tasks: Sequence[TaskInstance], det_params, det_cfg: det.DetectorConfig) -> list[TaskData]:
    sizes = [len(t.frames) for t in tasks]
    images = np.concatenate([np.stack([f.image for f in t.frames]) for t in tasks]).astype(np.float64)
    feats = det.image_features(det_params, images, det_cfg)
    out, at = [], 0
    for t, s in zip(tasks, sizes):
        targets = [det.Target.from_annotations(f.annotations) for f in t.frames]
        out.append(TaskData(t.task_id, feats[at : at + s], targets, t.trajectories))
        at += s
    return out


# ---------------------------------------------------------------- IFGA table


class IfgaTable:
    """Most recent IFGA value per (task, complete trajectory), with visit counts.

    Trajectories are stored by their lexicographic index, so all completions
    of an action prefix occupy one contiguous range.
    """

    def __init__(self, task_ids: Sequence[str], n: int, num_actions: int = 4):
        self.task_ids = list(task_ids)
        self.row = {t: i for i, t in enumerate(self.task_ids)}
        self.n = n
        self.num_actions = num_actions
        size = num_actions**n
        self.values = np.full((len(self.task_ids), size), np.nan)
        self.visits = np.zeros((len(self.task_ids), size), dtype=np.int64)

    def index(self, actions) -> int:
        if len(actions) != self.n:
            raise MetaError(f"IFGA keys are complete trajectories of length {self.n}, got {len(actions)}")
        k = 0
        for a in actions:
            k = k * self.num_actions + int(a)
        return k

    def record(self, task_id: str, actions, value: float) -> None:
        self.record_index(self.row[task_id], self.index(actions), value)

    def record_index(self, row: int, traj: int, value: float) -> None:
        self.values[row, traj] = value
        self.visits[row, traj] += 1

    def get(self, task_id: str, actions) -> float:
        return float(self.values[self.row[task_id], self.index(actions)])

    def complete(self, task_id: str) -> bool:
        return bool(np.isfinite(self.values[self.row[task_id]]).all())


def exp_policy_target(table: IfgaTable, task_id: str, prefix) -> np.ndarray:
    """One-hot P_exp: first action after ``prefix`` on the lowest-IFGA completion.

    Ties go to the lexicographically smallest action list.
    """
    t = len(prefix)
    if t >= table.n:
        raise MetaError(f"prefix of length {t} leaves no action to choose (n={table.n})")
    a = table.num_actions
    lo = 0
    for x in prefix:
        lo = lo * a + int(x)
    span = a ** (table.n - t)
    lo *= span
    block = table.values[table.row[task_id], lo : lo + span]
    if not np.isfinite(block).all():
        raise MetaError(f"IFGA table for task {task_id} lacks entries under prefix {list(prefix)}")
    best = int(np.argmin(block))  # first minimum = lexicographic tie-break
    action = best // a ** (table.n - t - 1)
    out = np.zeros(a)
    out[action] = 1.0
    return out


def exp_policy_targets(table: IfgaTable, task_id: str, actions) -> np.ndarray:
    """Targets for every step of a rollout, ``[n, 4]``."""
    return np.stack([exp_policy_target(table, task_id, actions[:t]) for t in range(table.n)])


# ---------------------------------------------------------------- graph pieces


@dataclass
class Model:
    det_cfg: det.DetectorConfig
    sup_cfg: sup.SupervisorConfig
    n: int
    alpha: float


def batched(theta: dict, batch: int) -> dict:
    """One copy of each adapted parameter per task (graph-connected when live)."""
    out = {}
    for k, v in theta.items():
        v = v if isinstance(v, ag.Tensor) else ag.Tensor(v)
        shaped = ag.reshape(v, (1,) + v.shape)
        out[k] = ag.broadcast_to(shaped, (batch,) + v.shape)
    return out


def batched_leaves(theta: dict[str, np.ndarray], batch: int) -> dict:
    return {k: ag.Tensor(np.broadcast_to(v, (batch,) + v.shape).copy(), requires_grad=True) for k, v in theta.items()}


def forward_supervisor(sup_p, feats, embeddings, model: Model, num_policy: Optional[int] = None):
    """Learned loss per task and policy logits from one trunk pass."""
    m = model.n if num_policy is None else num_policy
    seq = sup.build_tokens(sup_p, feats, embeddings, m, model.sup_cfg)
    h = sup.trunk(sup_p, seq, model.sup_cfg)
    frame_h = ag.getitem(h, (Ellipsis, seq.frame_positions, slice(None)))
    out = nn.mlp(frame_h, sup_p, "lossdec", 3)
    lead = tuple(out.shape[:-2])
    l_ada = ag.l2_norm(ag.reshape(out, lead + (out.shape[-2] * out.shape[-1],)), axis=-1)
    logits = sup.policy_logits(sup_p, seq, model.sup_cfg, trunk_out=h) if m else None
    return l_ada, logits


def _check_finite(grads, where: str) -> None:
    for g in grads:
        if not np.isfinite(g.data).all():
            raise DivergenceError(f"non-finite gradient in {where}")


def inner_adapt(theta_b: dict, sup_p, feats: np.ndarray, model: Model, create_graph: bool = True):
    """One SGD step on L_ada for every task: ``theta' = theta - alpha * grad L_ada``.

    ``theta_b`` holds per-task parameter nodes ``[B, ...]`` that require grad;
    ``feats`` is ``[B, n+1, P, D]``. Returns ``(theta', L_ada [B], grads,
    detections, policy logits)``.
    """
    if feats.shape[-3] != model.n + 1:
        raise sup.SupervisorError(f"inner adaptation needs {model.n + 1} frames, got {feats.shape[-3]}")
    names = list(theta_b)
    dets = det.decode(theta_b, feats, model.det_cfg)
    l_ada, logits = forward_supervisor(sup_p, feats, dets.embeddings, model)
    grads = ag.grad(ag.sum(l_ada), [theta_b[k] for k in names], create_graph=create_graph)
    _check_finite(grads, "inner_adapt")
    if model.alpha == 0.0:
        adapted = dict(theta_b)
    else:
        adapted = {k: ag.sub(theta_b[k], ag.mul(g, model.alpha)) for k, g in zip(names, grads)}
    return adapted, l_ada, grads, dets, logits


def flat_l1(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    """Per-task l1 distance between two lists of ``[B, ...]`` gradient arrays."""
    if len(a) != len(b):
        raise MetaError(f"gradient partitions differ: {len(a)} vs {len(b)} tensors")
    total = 0.0
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise MetaError(f"gradient partitions differ: {x.shape} vs {y.shape}")
        total = total + np.abs(x - y).reshape(x.shape[0], -1).sum(axis=1)
    return np.asarray(total)


def ada_grads(theta: dict[str, np.ndarray], sup_params, feats: np.ndarray, model: Model) -> list[np.ndarray]:
    """Per-rollout ``grad_theta L_ada(theta, F)`` for ``feats`` ``[B, n+1, P, D]``."""
    names = sorted(theta)
    leaves = batched_leaves(theta, feats.shape[0])
    dets = det.decode(leaves, feats, model.det_cfg)
    l_ada, _ = forward_supervisor(nn.constants(sup_params), feats, dets.embeddings, model)
    grads = ag.grad(ag.sum(l_ada), [leaves[k] for k in names])
    _check_finite(grads, "learned-loss gradient")
    return [g.data for g in grads]


def frame0_det_grads(theta: dict[str, np.ndarray], feats0: np.ndarray, targets0, model: Model) -> list[np.ndarray]:
    """Per-task ``grad_theta L_det(theta, [f0])`` for ``feats0`` ``[B, P, D]``."""
    names = sorted(theta)
    leaves = batched_leaves(theta, feats0.shape[0])
    d0 = det.decode(leaves, feats0[:, None], model.det_cfg)
    l0 = det.detection_loss(d0, list(targets0), model.det_cfg)
    grads = ag.grad(ag.sum(l0), [leaves[k] for k in names])
    _check_finite(grads, "initial-frame detection gradient")
    return [g.data for g in grads]


def compute_ifga(theta: dict[str, np.ndarray], sup_params, feats: np.ndarray, frame0_targets, model: Model, det_grads=None) -> np.ndarray:
    """IFGA per rollout: l1 gap between grad L_ada(theta, F) and grad L_det(theta, [f0]).

    ``feats`` is ``[B, n+1, P, D]``; ``frame0_targets`` holds B targets.
    ``det_grads`` may supply the initial-frame gradients (``[B, ...]`` per
    parameter, or ``[...]`` shared by every rollout) when already known.
    """
    g_ada = ada_grads(theta, sup_params, feats, model)
    if det_grads is None:
        det_grads = frame0_det_grads(theta, feats[:, 0], frame0_targets, model)
    b = feats.shape[0]
    det_grads = [np.broadcast_to(g, (b,) + a.shape[1:]) for g, a in zip(det_grads, g_ada)]
    return flat_l1(g_ada, det_grads)


def policy_loss(logits, targets: np.ndarray):
    """L_pol per rollout: cross-entropy against one-hot targets summed over steps.

    log-probabilities are clamped from below at ``log(1e-12)``.
    """
    logp = ag.maximum(ag.log_softmax(logits, axis=-1), math.log(LOG_FLOOR))
    return ag.neg(ag.sum(ag.sum(ag.mul(logp, targets), axis=-1), axis=-1))


# ---------------------------------------------------------------- rollouts


def rollout_feats(td: TaskData, traj: int, repeat_first: bool = False) -> np.ndarray:
    idx = td.trajectories[traj]
    if repeat_first:
        idx = np.full_like(idx, idx[0])
    return td.feats[idx]


def _actions_of(traj: int, n: int) -> tuple[int, ...]:
    return tuple(int(d) for d in np.base_repr(traj, 4).zfill(n)) if n else ()


def sample_policy_rollouts(theta, sup_params, tds: Sequence[TaskData], model: Model, rng, greedy: bool) -> list[int]:
    """Roll out ``n`` actions per task with P_int; returns trajectory indices."""
    b, n = len(tds), model.n
    prefix = np.zeros(b, dtype=np.int64)
    consts = nn.constants(theta)
    sp = nn.constants(sup_params)
    embs = []
    feats = []
    span = 4**n
    with ag.no_grad():
        for t in range(n):
            span //= 4
            cols = [td.trajectories[prefix[i] * 4 ** (n - t), t] for i, td in enumerate(tds)]
            f = np.stack([td.feats[c] for td, c in zip(tds, cols)])[:, None]
            feats.append(f)
            embs.append(det.decode(consts, f, model.det_cfg).embeddings.data)
            all_f = np.concatenate(feats, axis=1)
            all_e = np.concatenate(embs, axis=1)
            seq = sup.build_tokens(sp, all_f, all_e, t + 1, model.sup_cfg)
            probs = ag.softmax(sup.policy_logits(sp, seq, model.sup_cfg), axis=-1).data[:, t]
            if greedy:
                acts = probs.argmax(-1)
            else:
                acts = np.array([rng.choice(4, p=p / p.sum()) for p in probs])
            prefix = prefix * 4 + acts
    return [int(x) for x in prefix]


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    det_params: dict
    sup_params: dict
    phi_opt: ag.OptimState
    rho_opt: ag.OptimState
    epoch: int = 0
    table: Optional[IfgaTable] = None
    history: list = field(default_factory=list)


def _lr(base: float, step: int, total: int) -> float:
    return ag.linear_anneal(base, step, total)


def ifga_prepass(state: TrainState, tds: Sequence[TaskData], model: Model, chunk: int = 64) -> None:
    """Record IFGA for every complete trajectory of every task."""
    theta = {k: state.det_params[k] for k in det.adapted_names(state.det_params)}
    for row, td in enumerate(tds):
        f0 = td.trajectories[0, 0]
        g0 = [g[0] for g in frame0_det_grads(theta, td.feats[f0][None], [td.targets[f0]], model)]
        total = td.trajectories.shape[0]
        for lo in range(0, total, chunk):
            trajs = range(lo, min(total, lo + chunk))
            feats = np.stack([rollout_feats(td, k) for k in trajs])
            vals = compute_ifga(theta, state.sup_params, feats, None, model, det_grads=g0)
            for k, v in zip(trajs, vals):
                state.table.record_index(row, k, float(v))


def meta_step(state: TrainState, tds: Sequence[TaskData], trajs: Sequence[int], model: Model, cfg: MetaConfig, lrs, rows=None, det_grads0=None) -> dict:
    """One outer update of theta (SGD), phi (AdamW) and, with a learned policy, rho (AdamW)."""
    b = len(tds)
    det_p, sup_p = state.det_params, state.sup_params
    theta_names = det.adapted_names(det_p)
    phi_names = sup.phi_names(sup_p, model.sup_cfg)
    rho_names = sup.rho_names(sup_p, model.sup_cfg) if cfg.policy == "learned" else []
    theta = nn.leaves(det_p, theta_names)
    sp = nn.leaves(sup_p, sorted(sup_p))
    feats = np.stack([rollout_feats(td, k, cfg.repeat_first) for td, k in zip(tds, trajs)])
    theta_b = batched(theta, b)
    adapted, l_ada, g_ada, dets, logits = inner_adapt(theta_b, sp, feats, model, create_graph=not cfg.first_order)
    if cfg.first_order:
        adapted = {k: ag.sub(theta_b[k], ag.mul(g.detach(), model.alpha)) for k, g in zip(theta_names, g_ada)}

    frame_idx = [td.trajectories[k] if not cfg.repeat_first else np.full(model.n + 1, td.trajectories[k, 0]) for td, k in zip(tds, trajs)]
    targets = [td.targets[i] for td, idx in zip(tds, frame_idx) for i in idx]
    post = det.decode(adapted, feats, model.det_cfg)
    l_det = ag.mean(det.detection_loss(post, targets, model.det_cfg), axis=-1)  # [B]
    outer = ag.sum(l_det)
    if not np.isfinite(outer.data):
        raise DivergenceError(f"outer detection loss is not finite at epoch {state.epoch}, tasks {[td.task_id for td in tds]}")
    wrt = [theta[k] for k in theta_names] + [sp[k] for k in phi_names]
    grads = ag.grad(outer, wrt)
    _check_finite(grads, f"outer update (epoch {state.epoch})")
    g_theta = {k: g.data for k, g in zip(theta_names, grads[: len(theta_names)])}
    g_phi = {k: g.data for k, g in zip(phi_names, grads[len(theta_names) :])}

    stats = {"l_det": float(l_det.data.mean()), "l_ada": float(l_ada.data.mean())}
    new_det = dict(det_p)
    new_det.update(ag.sgd_step({k: det_p[k] for k in theta_names}, g_theta, lrs[0]))
    new_sup, state.phi_opt = ag.adamw_step(dict(sup_p), g_phi, state.phi_opt, lr=lrs[1])

    if rho_names:
        tg = np.stack([exp_policy_targets(state.table, td.task_id, _actions_of(k, model.n)) for td, k in zip(tds, trajs)])
        l_pol = policy_loss(logits, tg)
        g_rho = ag.grad(ag.sum(l_pol), [sp[k] for k in rho_names])
        _check_finite(g_rho, f"policy update (epoch {state.epoch})")
        new_sup, state.rho_opt = ag.adamw_step(new_sup, {k: g.data for k, g in zip(rho_names, g_rho)}, state.rho_opt, lr=lrs[2])
        stats["l_pol"] = float(l_pol.data.mean())

        # IFGA of the visited rollouts, reusing the inner-step gradients
        if det_grads0 is None:
            starts = [td.trajectories[0, 0] for td in tds]
            det_grads0 = frame0_det_grads({k: det_p[k] for k in theta_names}, np.stack([td.feats[i] for td, i in zip(tds, starts)]), [td.targets[i] for td, i in zip(tds, starts)], model)
        if rows is None:
            rows = [state.table.row[td.task_id] for td in tds]
        vals = flat_l1([g.data for g in g_ada], det_grads0)
        for r, k, v in zip(rows, trajs, vals):
            state.table.record_index(int(r), k, float(v))
        stats["ifga"] = float(vals.mean())

    state.det_params = new_det
    state.sup_params = new_sup
    return stats


def train(
    cfg: MetaConfig,
    tds: Sequence[TaskData],
    det_params: dict,
    sup_params: dict,
    model: Model,
    log_path: Optional[str] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Interactive meta-training over the task set.

    Per epoch the tasks are shuffled into mini-batches; each task's rollout
    comes from P_int (or a uniform policy), and with a learned policy one
    more trajectory per task, chosen round-robin, has its IFGA refreshed.
    """
    det_before = {k: det_params[k] for k in det.frozen_names(det_params)}
    state = TrainState(
        dict(det_params),
        dict(sup_params),
        ag.OptimState(lr=cfg.beta2, weight_decay=cfg.weight_decay),
        ag.OptimState(lr=cfg.beta3, weight_decay=cfg.weight_decay),
    )
    if cfg.epochs == 0:
        return state
    learned = cfg.policy == "learned"
    gen = rngmod.child(cfg.seed, "meta", "train")
    steps_per_epoch = math.ceil(len(tds) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    # NaN/Inf surfaces in the losses and gradients, which are checked
    # explicitly; per-op checks are skipped on this hot path
    with ag.finite_checks(False), (open(log_path, "w") if log_path else contextlib.nullcontext()) as sink:
        if learned:
            state.table = IfgaTable([td.task_id for td in tds], model.n)
            ifga_prepass(state, tds, model)
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = gen.permutation(len(tds))
            agg: dict[str, list] = {}
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                batch = [tds[i] for i in idx]
                g0 = None
                if learned:
                    theta = {k: state.det_params[k] for k in det.adapted_names(state.det_params)}
                    trajs = sample_policy_rollouts(theta, state.sup_params, batch, model, gen, greedy=False)
                    starts = [td.trajectories[0, 0] for td in batch]
                    g0 = frame0_det_grads(theta, np.stack([td.feats[s0] for td, s0 in zip(batch, starts)]), [td.targets[s0] for td, s0 in zip(batch, starts)], model)
                    if cfg.sweep:
                        sweep = [int((epoch + i) % td.trajectories.shape[0]) for i, td in zip(idx, batch)]
                        feats = np.stack([rollout_feats(td, k) for td, k in zip(batch, sweep)])
                        vals = compute_ifga(theta, state.sup_params, feats, None, model, det_grads=g0)
                        for r, k, v in zip(idx, sweep, vals):
                            state.table.record_index(int(r), k, float(v))
                else:
                    trajs = [int(gen.integers(td.trajectories.shape[0])) for td in batch]
                lrs = (_lr(cfg.beta1, step, total), _lr(cfg.beta2, step, total), _lr(cfg.beta3, step, total))
                stats = meta_step(state, batch, trajs, model, cfg, lrs, rows=idx, det_grads0=g0)
                for k, v in stats.items():
                    agg.setdefault(k, []).append(v)
                step += 1
            rec = {"epoch": epoch, "lr": lrs[0]}
            rec.update({k: float(np.mean(v)) for k, v in agg.items()})
            if learned:
                vals = state.table.values
                rec.update(ifga_min=float(vals.min()), ifga_mean=float(vals.mean()), ifga_max=float(vals.max()))
            state.history.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
            if progress:
                progress(rec)
    for k, v in det_before.items():
        if not np.array_equal(state.det_params[k], v):
            raise MetaError(f"frozen parameter {k} changed during meta-training")
    return state


# ---------------------------------------------------------------- inference


@dataclass
class InferenceInputs:
    """Everything adaptive inference may look at: frame images and the
    reachable-pose index. Ground-truth annotations are not carried."""

    task_id: str
    images: np.ndarray  # [U, C, H, W]
    trajectories: np.ndarray

    @classmethod
    def from_task(cls, task: TaskInstance) -> "InferenceInputs":
        return cls(task.task_id, np.stack([f.image for f in task.frames]).astype(np.float64), task.trajectories)


def adapt_and_detect(
    det_params,
    sup_params,
    inputs: Sequence[InferenceInputs],
    model: Model,
    rollout: str = "policy",
    adapt: bool = True,
    greedy: bool = True,
    seed: int = 0,
) -> det.DetectionSet:
    """Label-free adaptive detection on the initial frame of each task.

    ``rollout`` is ``policy`` (P_int), ``random`` (uniform actions from a
    seeded per-task stream) or ``repeat`` (n+1 copies of frame 0). A fresh
    adapted copy of the detector is made per task and then discarded.
    """
    feats_all = [det.image_features(det_params, x.images, model.det_cfg) for x in inputs]
    tds = [TaskData(x.task_id, f, [], x.trajectories) for x, f in zip(inputs, feats_all)]
    theta = {k: det_params[k] for k in det.adapted_names(det_params)}
    if rollout == "policy":
        gen = rngmod.child(seed, "meta", "inference")
        trajs = sample_policy_rollouts(theta, sup_params, tds, model, gen, greedy=greedy)
    elif rollout in ("random", "repeat"):
        trajs = [int(rngmod.child(seed, "rollout", x.task_id).integers(x.trajectories.shape[0])) for x in inputs]
    else:
        raise MetaError(f"unknown rollout mode {rollout!r}")
    feats = np.stack([rollout_feats(td, k, rollout == "repeat") for td, k in zip(tds, trajs)])
    if not adapt:
        with ag.no_grad():
            return det.decode(nn.constants(theta), feats[:, 0], model.det_cfg)
    leaves = batched_leaves(theta, len(inputs))
    adapted, *_ = inner_adapt(leaves, nn.constants(sup_params), feats, model, create_graph=False)
    with ag.no_grad():
        final = {k: ag.Tensor(v.data) for k, v in adapted.items()}
        return det.decode(final, feats[:, 0], model.det_cfg)


def config_dict(cfg: MetaConfig) -> dict:
    return asdict(cfg)
