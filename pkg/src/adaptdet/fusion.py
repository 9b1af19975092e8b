"""Multi-frame baseline: the supervisor transformer used as a fusion layer.

The frozen pre-trained detector runs on every frame of a rollout; the
transformer attends over all frames' detection tokens (no causal mask) and a
3-layer MLP on frame 0's detection-token outputs predicts residual class
logits and box deltas (in logit space) for frame 0. The last layer starts at
zero, so an untrained fusion head reproduces the single-frame detector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import detector as det
from . import nn
from . import rng as rngmod
from . import supervisor as sup


@dataclass(frozen=True)
class FusionSchedule:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.0
    seed: int = 0


def init_fusion(sup_cfg: sup.SupervisorConfig, det_cfg: det.DetectorConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0xF05])
    p = {k: v for k, v in sup.init_supervisor(sup_cfg, 1, seed).items() if k.startswith(("embed.", "trunk."))}
    h = sup_cfg.mlp_hidden
    nn.init_mlp(rng, p, "fuse", [sup_cfg.dim, h, h, det_cfg.num_classes + 1 + 4])
    p["fuse.2_w"][:] = 0.0
    return p


def fused_frame0(fp, dets: det.DetectionSet, feats: np.ndarray, sup_cfg: sup.SupervisorConfig, det_cfg: det.DetectorConfig) -> det.DetectionSet:
    """Refined frame-0 detections from per-frame detector outputs ``[B, F, K, *]``."""
    seq = sup.build_tokens(fp, feats, dets.embeddings, 0, sup_cfg)
    h = sup.trunk(fp, seq, sup_cfg, causal=False)
    k = det_cfg.queries
    h0 = ag.getitem(h, (Ellipsis, slice(1, 1 + k), slice(None)))  # frame 0 detection tokens
    out = nn.mlp(h0, fp, "fuse", 3)
    c = det_cfg.num_classes + 1
    logits = ag.add(dets.class_logits[:, 0], out[..., :c])
    b0 = np.clip(dets.boxes.data[:, 0], 1e-6, 1 - 1e-6)
    boxes = ag.sigmoid(ag.add(out[..., c:], np.log(b0 / (1 - b0))))
    return det.DetectionSet(logits, boxes, dets.embeddings[:, 0], feats[:, 0])


def train_fusion(tds, det_params, sup_cfg: sup.SupervisorConfig, det_cfg: det.DetectorConfig, schedule: FusionSchedule, init=None):
    """AdamW on the frame-0 detection loss over random rollouts; detector frozen."""
    fp = dict(init) if init is not None else init_fusion(sup_cfg, det_cfg, schedule.seed)
    theta = nn.constants({k: det_params[k] for k in det.adapted_names(det_params)})
    # detector outputs per reachable frame are fixed: compute them once
    with ag.no_grad():
        cached = [det.decode(theta, td.feats, det_cfg) for td in tds]
    state = ag.OptimState(lr=schedule.lr, weight_decay=schedule.weight_decay)
    gen = rngmod.child(schedule.seed, "fusion", "train")
    steps = int(np.ceil(len(tds) / schedule.batch_size))
    total = schedule.epochs * steps
    history = []
    it = 0
    with ag.finite_checks(False):
        for _ in range(schedule.epochs):
            order = gen.permutation(len(tds))
            losses = []
            for s in range(steps):
                idx = order[s * schedule.batch_size : (s + 1) * schedule.batch_size]
                rows = [tds[i].trajectories[int(gen.integers(tds[i].trajectories.shape[0]))] for i in idx]
                dets, feats = _gather(cached, tds, idx, rows)
                leaves = nn.leaves(fp)
                pred = fused_frame0(leaves, dets, feats, sup_cfg, det_cfg)
                targets = [tds[i].targets[r[0]] for i, r in zip(idx, rows)]
                loss = ag.mean(det.detection_loss(pred, targets, det_cfg))
                names = list(leaves)
                grads = ag.grad(loss, [leaves[k] for k in names])
                for g in grads:
                    if not np.isfinite(g.data).all():
                        raise FloatingPointError("non-finite gradient in fusion training")
                lr = ag.linear_anneal(schedule.lr, it, total)
                fp, state = ag.adamw_step(fp, {k: g.data for k, g in zip(names, grads)}, state, lr=lr)
                losses.append(loss.item())
                it += 1
            history.append(float(np.mean(losses)))
    return fp, history


def _gather(cached, tds, idx, rows):
    logits = np.stack([cached[i].class_logits.data[r] for i, r in zip(idx, rows)])
    boxes = np.stack([cached[i].boxes.data[r] for i, r in zip(idx, rows)])
    emb = np.stack([cached[i].embeddings.data[r] for i, r in zip(idx, rows)])
    feats = np.stack([tds[i].feats[r] for i, r in zip(idx, rows)])
    return det.DetectionSet(ag.Tensor(logits), ag.Tensor(boxes), ag.Tensor(emb), feats), feats


def fusion_detect(fp, det_params, feats: np.ndarray, sup_cfg, det_cfg) -> det.DetectionSet:
    """Inference on rollouts ``feats`` ``[B, F, P, D]``; a pure function of the rollout."""
    theta = nn.constants({k: det_params[k] for k in det.adapted_names(det_params)})
    with ag.no_grad():
        dets = det.decode(theta, feats, det_cfg)
        return fused_frame0(nn.constants(fp), dets, feats, sup_cfg, det_cfg)
