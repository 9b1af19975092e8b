"""Supervisor transformer: the learned adaptive loss and the interactive policy.

Token layout for ``F`` frames and ``m`` policy slots (``m`` is ``F - 1`` for a
complete rollout, ``F`` while the agent is still choosing action ``F - 1``)::

    [img_0, det_0^1..det_0^K, pol_0, img_1, det_1^1..det_1^K, pol_1, ..., img_{F-1}, det_{F-1}^*]

Every token carries a block index (its frame). Attention is block-causal:
a token sees tokens of blocks <= its own. Frame tokens never look at policy
tokens, so the learned loss does not depend on the policy parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn

TRUNK_OWNERS = ("phi", "rho", "both")
NUM_ACTIONS = 4


class SupervisorError(ValueError):
    pass


@dataclass(frozen=True)
class SupervisorConfig:
    det_dim: int = 64
    dim: int = 32
    layers: int = 1
    heads: int = 4
    mlp_hidden: int = 64
    loss_out: int = 32
    queries: int = 10
    max_steps: int = 8
    trunk_owner: str = "phi"

    def __post_init__(self):
        if self.trunk_owner not in TRUNK_OWNERS:
            raise SupervisorError(f"trunk_owner must be one of {TRUNK_OWNERS}, got {self.trunk_owner!r}")

    @property
    def frame_tokens(self) -> int:
        return self.queries + 1

    @property
    def max_tokens(self) -> int:
        return (self.max_steps + 1) * self.frame_tokens + self.max_steps


def init_supervisor(cfg: SupervisorConfig, n: int, seed: int) -> dict[str, np.ndarray]:
    """All supervisor parameters; ``n`` learned policy tokens."""
    if not 1 <= n <= cfg.max_steps:
        raise SupervisorError(f"n={n} outside [1, {cfg.max_steps}]")
    rng = np.random.default_rng([seed, 0x5E7])
    p: dict[str, np.ndarray] = {}
    d = cfg.dim
    nn.init_linear(rng, p, "embed.img", cfg.det_dim, d)
    nn.init_linear(rng, p, "embed.det", cfg.det_dim, d)
    p["embed.pos"] = rng.normal(0.0, 0.1, size=(cfg.max_tokens, d))
    for layer in range(cfg.layers):
        nn.init_self_attention(rng, p, f"trunk.{layer}.attn", d)
        nn.init_mlp(rng, p, f"trunk.{layer}.ff", [d, cfg.mlp_hidden, d])
    nn.init_mlp(rng, p, "lossdec", [d, cfg.mlp_hidden, cfg.mlp_hidden, cfg.loss_out])
    nn.init_mlp(rng, p, "poldec", [d, cfg.mlp_hidden, cfg.mlp_hidden, NUM_ACTIONS], last_scale=0.05)
    p["poltok"] = rng.normal(0.0, 1.0, size=(n, d))
    return p


def phi_names(params, cfg: SupervisorConfig) -> list[str]:
    own = ("embed.", "lossdec.") + (("trunk.",) if cfg.trunk_owner in ("phi", "both") else ())
    return sorted(k for k in params if k.startswith(own))


def rho_names(params, cfg: SupervisorConfig) -> list[str]:
    own = ("poldec.", "poltok") + (("trunk.",) if cfg.trunk_owner in ("rho", "both") else ())
    return sorted(k for k in params if k.startswith(own))


@dataclass
class TokenSequence:
    tokens: ag.Tensor  # [..., T, D_s]
    blocks: np.ndarray  # [T] frame index of each token
    is_policy: np.ndarray  # [T]
    num_frames: int
    num_policy: int

    @property
    def mask(self) -> np.ndarray:
        allowed = self.blocks[None, :] <= self.blocks[:, None]
        # frame tokens ignore policy tokens
        allowed &= ~(~self.is_policy[:, None] & self.is_policy[None, :])
        return allowed

    @property
    def frame_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.is_policy)

    @property
    def policy_positions(self) -> np.ndarray:
        return np.flatnonzero(self.is_policy)


def layout(num_frames: int, num_policy: int, queries: int) -> tuple[np.ndarray, np.ndarray]:
    blocks, pol = [], []
    for i in range(num_frames):
        blocks += [i] * (queries + 1)
        pol += [False] * (queries + 1)
        if i < num_policy:
            blocks.append(i)
            pol.append(True)
    return np.array(blocks, dtype=np.int64), np.array(pol, dtype=bool)


def build_tokens(p, image_features, embeddings, num_policy: int, cfg: SupervisorConfig) -> TokenSequence:
    """Embed frames ``[..., F, P, D]`` / ``[..., F, K, D]`` into the token layout.

    ``image_features`` is a constant array; ``embeddings`` may be a live graph
    node tied to the adapted detector parameters.
    """
    feats = np.asarray(image_features.data if isinstance(image_features, ag.Tensor) else image_features)
    emb = embeddings if isinstance(embeddings, ag.Tensor) else ag.Tensor(embeddings)
    f = emb.shape[-3]
    if emb.shape[-2] != cfg.queries:
        raise ag.ShapeError("build_tokens", emb.shape, (cfg.queries, cfg.det_dim))
    if num_policy and (num_policy not in (f - 1, f) or num_policy > p["poltok"].shape[0]):
        raise SupervisorError(f"{num_policy} policy slots do not fit {f} frames with n={p['poltok'].shape[0]}")
    total = f * cfg.frame_tokens + num_policy
    if total > cfg.max_tokens:
        raise SupervisorError(f"sequence of {total} tokens exceeds maximum {cfg.max_tokens}")

    pooled = feats.mean(axis=-2, keepdims=True)  # [..., F, 1, D]
    img_tok = nn.linear(ag.Tensor(pooled), p["embed.img_w"], p["embed.img_b"])
    det_tok = nn.linear(emb, p["embed.det_w"], p["embed.det_b"])
    lead = tuple(np.broadcast_shapes(img_tok.shape[:-3], det_tok.shape[:-3]))
    if img_tok.shape[:-3] != lead:
        img_tok = ag.broadcast_to(img_tok, lead + img_tok.shape[-3:])
    if det_tok.shape[:-3] != lead:
        det_tok = ag.broadcast_to(det_tok, lead + det_tok.shape[-3:])
    frames = ag.concat([img_tok, det_tok], axis=-2)  # [..., F, K+1, Ds]
    d = cfg.dim
    parts = []
    if num_policy:
        pol = ag.reshape(p["poltok"][:num_policy], (num_policy, 1, d))
        pol = ag.broadcast_to(pol, lead + (num_policy, 1, d))
        head = ag.concat([frames[..., :num_policy, :, :], pol], axis=-2)
        parts.append(ag.reshape(head, lead + (num_policy * (cfg.frame_tokens + 1), d)))
    if num_policy < f:
        parts.append(ag.reshape(frames[..., num_policy:, :, :], lead + ((f - num_policy) * cfg.frame_tokens, d)))
    seq = parts[0] if len(parts) == 1 else ag.concat(parts, axis=-2)
    seq = ag.add(seq, p["embed.pos"][:total])
    blocks, is_pol = layout(f, num_policy, cfg.queries)
    return TokenSequence(seq, blocks, is_pol, f, num_policy)


def trunk(p, seq: TokenSequence, cfg: SupervisorConfig, causal: bool = True):
    x = seq.tokens
    mask = seq.mask if causal else None
    for layer in range(cfg.layers):
        x = ag.add(x, nn.self_attention(ag.layer_norm(x), p, f"trunk.{layer}.attn", cfg.heads, mask))
        x = ag.add(x, nn.mlp(ag.layer_norm(x), p, f"trunk.{layer}.ff", 2))
    return ag.layer_norm(x)


def learned_loss(p, seq: TokenSequence, cfg: SupervisorConfig, n: int):
    """L_ada per leading index: l2 norm of the loss-decoder outputs on frame tokens."""
    if seq.num_frames != n + 1:
        raise SupervisorError(f"learned loss needs a complete rollout of {n + 1} frames, got {seq.num_frames}")
    h = trunk(p, seq, cfg)
    frame_h = ag.getitem(h, (Ellipsis, seq.frame_positions, slice(None)))
    out = nn.mlp(frame_h, p, "lossdec", 3)
    lead = tuple(out.shape[:-2])
    if not lead:
        return ag.l2_norm(out)
    flat = ag.reshape(out, lead + (out.shape[-2] * out.shape[-1],))
    return ag.l2_norm(flat, axis=-1)


def policy_logits(p, seq: TokenSequence, cfg: SupervisorConfig, trunk_out=None):
    """Action logits ``[..., m, 4]`` for every policy token in the sequence."""
    h = trunk(p, seq, cfg) if trunk_out is None else trunk_out
    pol_h = ag.getitem(h, (Ellipsis, seq.policy_positions, slice(None)))
    return nn.mlp(pol_h, p, "poldec", 3)


def policy_distribution(p, image_features, embeddings, t: int, n: int, cfg: SupervisorConfig) -> np.ndarray:
    """P_int at step ``t`` given frames ``0..t`` (extra frames are ignored)."""
    if not 0 <= t < n:
        raise SupervisorError(f"policy step t={t} outside [0, {n})")
    feats = np.asarray(image_features)[..., : t + 1, :, :]
    emb = embeddings.data if isinstance(embeddings, ag.Tensor) else np.asarray(embeddings)
    with ag.no_grad():
        seq = build_tokens(p, feats, emb[..., : t + 1, :, :], t + 1, cfg)
        logits = policy_logits(p, seq, cfg)
        probs = ag.softmax(logits, axis=-1).data
    return probs[..., t, :]
