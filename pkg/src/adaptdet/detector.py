"""Query-token detector, bipartite-matching detection loss and pre-training.

The parameter dict is split into a frozen partition (``backbone.*``: patch
embedding plus one encoder block) and the adapted partition (``decoder.*``
and ``head.*``), which is what test-time adaptation and meta-training touch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .boxes import cxcywh_to_xyxy, giou_matrix, giou_pairs
from .hungarian import MatchResult, hungarian

log = logging.getLogger(__name__)

FROZEN_PREFIXES = ("backbone.",)
ADAPTED_PREFIXES = ("decoder.", "head.")


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    heads: int = 4
    ffn: int = 128
    queries: int = 10
    num_classes: int = 8
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    noobj_weight: float = 0.1

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def background(self) -> int:
        return self.num_classes


@dataclass
class DetectionSet:
    """Detector outputs with arbitrary leading axes ``[..., K, *]``."""

    class_logits: ag.Tensor
    boxes: ag.Tensor
    embeddings: ag.Tensor
    image_features: np.ndarray


@dataclass(frozen=True)
class Target:
    """Ground truth of one frame: class ids [G] and cxcywh boxes [G, 4]."""

    classes: np.ndarray
    boxes: np.ndarray

    @classmethod
    def from_annotations(cls, annotations) -> "Target":
        if not annotations:
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
        return cls(
            np.array([a.class_id for a in annotations], dtype=np.int64),
            np.array([a.box for a in annotations], dtype=np.float64),
        )


def is_frozen(name: str) -> bool:
    return name.startswith(FROZEN_PREFIXES)


def adapted_names(params) -> list[str]:
    return sorted(k for k in params if k.startswith(ADAPTED_PREFIXES))


def frozen_names(params) -> list[str]:
    return sorted(k for k in params if is_frozen(k))


def init_detector(cfg: DetectorConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0xDE7])
    p: dict[str, np.ndarray] = {}
    d, f = cfg.dim, cfg.ffn
    patch_dim = cfg.channels * cfg.patch * cfg.patch
    nn.init_linear(rng, p, "backbone.patch", patch_dim, d)
    p["backbone.pos"] = rng.normal(0.0, 0.5, size=(cfg.num_patches, d))
    nn.init_self_attention(rng, p, "backbone.enc.attn", d)
    nn.init_mlp(rng, p, "backbone.enc.ff", [d, f, d])

    p["decoder.query"] = rng.normal(0.0, 1.0, size=(cfg.queries, d))
    nn.init_self_attention(rng, p, "decoder.self", d)
    nn.init_linear(rng, p, "decoder.cross.q", d, d)
    nn.init_linear(rng, p, "decoder.cross.k", d, d, bias=False)
    nn.init_linear(rng, p, "decoder.cross.v", d, d)
    nn.init_linear(rng, p, "decoder.cross.o", d, d)
    nn.init_mlp(rng, p, "decoder.ff", [d, f, d])

    nn.init_linear(rng, p, "head.cls", d, cfg.num_classes + 1, scale=0.5)
    p["head.cls_b"][cfg.background] = 2.0
    nn.init_mlp(rng, p, "head.box", [d, d, 4], last_scale=0.1)
    prior = np.array([0.12, 0.15])
    p["head.box.1_b"][2:] = np.log(prior / (1 - prior))
    return p


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[..., C, H, W] -> [..., (H/p)*(W/p), C*p*p]."""
    *lead, c, h, w = images.shape
    x = images.reshape(*lead, c, h // patch, patch, w // patch, patch)
    k = len(lead)
    x = np.transpose(x, tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
    return x.reshape(*lead, (h // patch) * (w // patch), c * patch * patch)


def encode(p, images: np.ndarray, cfg: DetectorConfig):
    """Backbone: patch embedding, learned positions and one encoder block."""
    if images.shape[-3:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ag.ShapeError("detect", images.shape, (cfg.channels, cfg.image_size, cfg.image_size))
    x = ag.Tensor(patchify(images, cfg.patch))
    x = ag.add(nn.linear(x, p["backbone.patch_w"], p["backbone.patch_b"]), p["backbone.pos"])
    x = ag.add(x, nn.self_attention(ag.layer_norm(x), p, "backbone.enc.attn", cfg.heads))
    x = ag.add(x, nn.mlp(ag.layer_norm(x), p, "backbone.enc.ff", 2))
    return ag.layer_norm(x)


def image_features(params: dict[str, np.ndarray], images: np.ndarray, cfg: DetectorConfig, batch: int = 256) -> np.ndarray:
    """Frozen backbone features [..., P, D] as a plain array."""
    lead = images.shape[:-3]
    flat = images.reshape((-1,) + images.shape[-3:])
    consts = nn.constants({k: params[k] for k in frozen_names(params)})
    out = []
    with ag.no_grad():
        for i in range(0, len(flat), batch):
            out.append(encode(consts, flat[i : i + batch], cfg).data)
    feats = np.concatenate(out, axis=0) if out else np.zeros((0, cfg.num_patches, cfg.dim))
    return feats.reshape(lead + feats.shape[1:])


def patch_centers(cfg: DetectorConfig) -> np.ndarray:
    """Normalised (x, y) centre of every patch, in patchify order."""
    g = cfg.image_size // cfg.patch
    c = (np.arange(g) + 0.5) / g
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def _per_head(w, heads: int, lead_ndim: int, keys: bool):
    """Split a ``[(B,) D, D]`` projection by output head.

    ``keys=True`` gives ``[..., H, dh, D]`` (transposed blocks), otherwise
    ``[..., H, D, dh]``; a per-task axis is aligned with ``lead_ndim``
    leading query axes.
    """
    batch = w.shape[:-2]
    d = w.shape[-2]
    dh = w.shape[-1] // heads
    k = len(batch)
    x = ag.reshape(w, batch + (d, heads, dh))
    perm = (k + 1, k + 2, k) if keys else (k + 1, k, k + 2)
    x = ag.transpose(x, tuple(range(k)) + perm)
    if k:
        x = ag.reshape(x, batch + (1,) * (lead_ndim - 1) + x.shape[k:])
    return x


def cross_attention(q, memory: np.ndarray, theta, cfg: DetectorConfig):
    """Multi-head attention of queries ``[..., K, D]`` over constant image features.

    Products are reassociated so the patch features never pass through a
    projection: scores use ``(q W_k^T) memory^T`` and values use
    ``(attn memory) W_v``. A key bias would shift every score of a query by
    the same amount, so the key projection has none.
    """
    h = cfg.heads
    dh = cfg.dim // h
    lead = len(q.shape) - 2
    qk = ag.matmul(nn.split_heads(q, h), _per_head(theta["decoder.cross.k_w"], h, lead, keys=True))
    mem = memory[..., None, :, :]  # [..., 1, P, D]
    scores = ag.mul(ag.matmul(qk, np.swapaxes(mem, -1, -2)), 1.0 / np.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)  # [..., H, K, P]
    ctx = ag.matmul(weights, mem)  # [..., H, K, D]
    out = nn.merge_heads(ag.matmul(ctx, _per_head(theta["decoder.cross.v_w"], h, lead, keys=False)))
    out = ag.add(out, nn.align(theta["decoder.cross.v_b"], out.ndim, 1))
    return out, weights


def decode(theta, features, cfg: DetectorConfig) -> DetectionSet:
    """Adapted partition: queries attend to image features and emit detections.

    ``theta`` may hold per-task copies with a leading batch axis that lines
    up with the first axis of ``features``.
    """
    feats = features if isinstance(features, ag.Tensor) else ag.Tensor(features)
    lead = feats.shape[:-2]
    q = theta["decoder.query"]
    q = nn.align(q, len(lead) + 2, 2)
    h = ag.broadcast_to(q, tuple(lead) + (cfg.queries, cfg.dim)) if q.shape[:-2] != tuple(lead) else q
    h = ag.add(h, nn.self_attention(ag.layer_norm(h), theta, "decoder.self", cfg.heads))
    hn = ag.layer_norm(h)
    cq = nn.linear(hn, theta["decoder.cross.q_w"], theta["decoder.cross.q_b"])
    att, weights = cross_attention(cq, feats.data, theta, cfg)
    h = ag.add(h, nn.linear(att, theta["decoder.cross.o_w"], theta["decoder.cross.o_b"]))
    h = ag.add(h, nn.mlp(ag.layer_norm(h), theta, "decoder.ff", 2))
    emb = ag.layer_norm(h)
    logits = nn.linear(emb, theta["head.cls_w"], theta["head.cls_b"])
    # box centre: attention-weighted patch position, refined in logit space
    ref = ag.mean(ag.matmul(weights, patch_centers(cfg)), axis=-3)  # [..., K, 2]
    ref_logit = ag.sub(ag.log(ref), ag.log(ag.sub(1.0, ref)))
    raw = nn.mlp(emb, theta, "head.box", 2)
    centre = ag.add(raw[..., :2], ref_logit)
    boxes = ag.sigmoid(ag.concat([centre, raw[..., 2:]], axis=-1))
    return DetectionSet(logits, boxes, emb, features.data if isinstance(features, ag.Tensor) else features)


def detect(params: dict[str, np.ndarray], images: np.ndarray, cfg: DetectorConfig) -> DetectionSet:
    """Full forward pass on raw images with constant parameters."""
    feats = image_features(params, images, cfg)
    with ag.no_grad():
        return decode(nn.constants({k: params[k] for k in adapted_names(params)}), feats, cfg)


# ---------------------------------------------------------------- matching loss


def match_cost(probs: np.ndarray, boxes: np.ndarray, target: Target, cfg: DetectorConfig) -> np.ndarray:
    """[G, K] matching cost for one frame."""
    cls_cost = -probs[:, target.classes].T
    l1 = np.abs(target.boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    g = giou_matrix(cxcywh_to_xyxy(target.boxes), cxcywh_to_xyxy(boxes))
    return cfg.lambda_cls * cls_cost + cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - g)


def match(pred: DetectionSet, targets: Sequence[Target], cfg: DetectorConfig) -> list[MatchResult]:
    logits = pred.class_logits.data.reshape(-1, cfg.queries, cfg.num_classes + 1)
    boxes = pred.boxes.data.reshape(-1, cfg.queries, 4)
    if len(targets) != len(logits):
        raise DetectorError(f"{len(targets)} targets for {len(logits)} frames")
    z = logits - logits.max(-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(-1, keepdims=True)
    out = []
    for f, t in enumerate(targets):
        if len(t.classes) > cfg.queries:
            raise DetectorError(f"{len(t.classes)} ground-truth objects exceed {cfg.queries} slots")
        if len(t.classes) == 0:
            out.append(MatchResult({}, 0.0))
            continue
        out.append(hungarian(match_cost(probs[f], boxes[f], t, cfg)))
    return out


def detection_loss(pred: DetectionSet, targets: Sequence[Target], cfg: DetectorConfig) -> ag.Tensor:
    """Per-frame Hungarian-matched detection loss, shape = leading axes of ``pred``.

    Class term: cross-entropy over every slot, unmatched slots targeting
    no-object with weight ``noobj_weight``. Box terms: L1 and ``1 - GIoU`` on
    matched slots, each normalised by the frame's object count.
    """
    lead = pred.class_logits.shape[:-2]
    k, c = cfg.queries, cfg.num_classes + 1
    n_frames = int(np.prod(lead)) if lead else 1
    matches = match(pred, targets, cfg)

    onehot = np.zeros((n_frames, k, c))
    onehot[:, :, cfg.background] = 1.0
    weights = np.full((n_frames, k), cfg.noobj_weight)
    pair_frame, pair_slot, pair_box = [], [], []
    for f, (t, m) in enumerate(zip(targets, matches)):
        rows, cols = m.pairs()
        onehot[f, cols, :] = 0.0
        onehot[f, cols, t.classes[rows]] = 1.0
        weights[f, cols] = 1.0
        pair_frame.extend([f] * len(rows))
        pair_slot.extend(cols.tolist())
        pair_box.extend(t.boxes[rows].tolist())

    logits = ag.reshape(pred.class_logits, (n_frames, k, c))
    nll = ag.neg(ag.sum(ag.mul(ag.log_softmax(logits, axis=-1), onehot), axis=-1))
    cls = ag.div(ag.sum(ag.mul(nll, weights), axis=-1), weights.sum(-1))
    loss = ag.mul(cls, cfg.lambda_cls)

    if pair_frame:
        pf = np.array(pair_frame, dtype=np.int64)
        ps = np.array(pair_slot, dtype=np.int64)
        tb = np.array(pair_box, dtype=np.float64)
        boxes = ag.reshape(pred.boxes, (n_frames, k, 4))
        pb = ag.getitem(boxes, (pf, ps))
        l1 = ag.sum(ag.abs(ag.sub(pb, tb)), axis=-1)
        gi = ag.sub(1.0, giou_pairs(pb, tb))
        per_pair = ag.add(ag.mul(l1, cfg.lambda_l1), ag.mul(gi, cfg.lambda_giou))
        counts = np.array([max(len(t.classes), 1) for t in targets], dtype=np.float64)
        scatter = np.zeros((n_frames, len(pf)))
        scatter[pf, np.arange(len(pf))] = 1.0 / counts[pf]
        box_term = ag.reshape(ag.matmul(scatter, ag.reshape(per_pair, (len(pf), 1))), (n_frames,))
        loss = ag.add(loss, box_term)
    return ag.reshape(loss, lead)


def detections_for_eval(pred: DetectionSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scores, labels, cxcywh boxes) per slot from constant outputs."""
    logits = pred.class_logits.data
    z = logits - logits.max(-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(-1, keepdims=True)
    fg = probs[..., :-1]
    return fg.max(-1), fg.argmax(-1), pred.boxes.data


# ---------------------------------------------------------------- pre-training


@dataclass(frozen=True)
class PretrainSchedule:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0


def pretrain(
    images: np.ndarray,
    targets: Sequence[Target],
    cfg: DetectorConfig,
    schedule: PretrainSchedule,
    init: dict[str, np.ndarray] | None = None,
    log_every: int = 0,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Supervised AdamW training of every parameter on single frames.

    Returns the trained parameters and the mean loss of each epoch.
    """
    if len(images) == 0:
        raise DetectorError("empty pre-training dataset")
    params = dict(init) if init is not None else init_detector(cfg, schedule.seed)
    state = ag.OptimState(lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng([schedule.seed, 0x9E7])
    n = len(images)
    steps_per_epoch = max(1, n // schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    history = []
    it = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * schedule.batch_size : (s + 1) * schedule.batch_size]
            leaves = nn.leaves(params)
            feats = encode(leaves, images[idx], cfg)
            pred = decode(leaves, feats, cfg)
            loss = ag.mean(detection_loss(pred, [targets[i] for i in idx], cfg))
            names = list(leaves)
            grads = ag.grad(loss, [leaves[k] for k in names])
            lr = ag.linear_anneal(schedule.lr, it, total)
            params, state = ag.adamw_step(params, {k: g.data for k, g in zip(names, grads)}, state, lr=lr)
            losses.append(loss.item())
            it += 1
        history.append(float(np.mean(losses)))
        if log_every and (epoch % log_every == 0 or epoch == schedule.epochs - 1):
            log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    return params, history


def evaluation_loss(params, images: np.ndarray, targets: Sequence[Target], cfg: DetectorConfig) -> float:
    pred = detect(params, images, cfg)
    with ag.no_grad():
        return float(np.mean(detection_loss(pred, targets, cfg).data))
