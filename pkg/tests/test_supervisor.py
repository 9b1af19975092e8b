import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptdet import autograd as ag
from adaptdet import detector as D
from adaptdet import nn
from adaptdet import supervisor as S
from oracles import central_diff, rel_err

DET = D.DetectorConfig(image_size=8, patch=4, dim=8, heads=2, ffn=16, queries=3, num_classes=3)
SUP = S.SupervisorConfig(det_dim=8, dim=8, layers=1, heads=2, mlp_hidden=8, loss_out=4, queries=3, max_steps=4)


def _inputs(rng, frames, cfg=SUP, patches=4, lead=()):
    feats = rng.normal(size=lead + (frames, patches, cfg.det_dim))
    emb = rng.normal(size=lead + (frames, cfg.queries, cfg.det_dim))
    return feats, emb


def test_token_count_for_desk_layout():
    cfg = S.SupervisorConfig()
    p = S.init_supervisor(cfg, 4, 0)
    feats, emb = _inputs(np.random.default_rng(0), 5, cfg, patches=64)
    seq = S.build_tokens(p, feats, emb, 4, cfg)
    assert seq.tokens.shape == (59, cfg.dim)
    assert seq.is_policy.sum() == 4


def test_layout_interleaves_policy_tokens():
    blocks, pol = S.layout(3, 2, 2)
    assert blocks.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
    assert pol.tolist() == [False] * 3 + [True] + [False] * 3 + [True] + [False] * 3


def test_policy_token_cannot_see_the_next_frame():
    p = S.init_supervisor(SUP, 4, 0)
    feats, emb = _inputs(np.random.default_rng(1), 5)
    seq = S.build_tokens(p, feats, emb, 4, SUP)
    pol0 = seq.policy_positions[0]
    frame1 = np.flatnonzero((seq.blocks == 1) & ~seq.is_policy)
    assert not seq.mask[pol0, frame1].any()
    assert seq.mask[pol0, pol0]
    # frame tokens never read policy tokens
    assert not seq.mask[np.ix_(seq.frame_positions, seq.policy_positions)].any()


def test_tokens_are_bitwise_stable():
    p = S.init_supervisor(SUP, 4, 0)
    feats, emb = _inputs(np.random.default_rng(2), 5)
    a = S.build_tokens(p, feats, emb, 4, SUP).tokens.data
    b = S.build_tokens(p, feats, emb, 4, SUP).tokens.data
    assert np.array_equal(a, b)


def test_sequence_length_limit():
    p = S.init_supervisor(SUP, 4, 0)
    feats, emb = _inputs(np.random.default_rng(3), SUP.max_steps + 3)
    with pytest.raises(S.SupervisorError):
        S.build_tokens(p, feats, emb, 0, SUP)


def test_zero_loss_decoder_gives_zero_loss():
    p = S.init_supervisor(SUP, 4, 0)
    for k in list(p):
        if k.startswith("lossdec.2_"):
            p[k] = np.zeros_like(p[k])
    feats, emb = _inputs(np.random.default_rng(4), 5)
    seq = S.build_tokens(nn.constants(p), feats, emb, 4, SUP)
    assert S.learned_loss(nn.constants(p), seq, SUP, 4).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_learned_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = nn.constants(S.init_supervisor(SUP, 4, seed))
    feats, emb = _inputs(rng, 5, lead=(2,))
    out = S.learned_loss(p, S.build_tokens(p, feats, emb, 4, SUP), SUP, 4)
    assert out.shape == (2,) and (out.data >= 0).all()


def test_learned_loss_needs_a_complete_rollout():
    p = nn.constants(S.init_supervisor(SUP, 4, 0))
    feats, emb = _inputs(np.random.default_rng(5), 3)
    with pytest.raises(S.SupervisorError):
        S.learned_loss(p, S.build_tokens(p, feats, emb, 2, SUP), SUP, 4)


def test_loss_gradient_wrt_detector_matches_finite_differences():
    rng = np.random.default_rng(6)
    dp = D.init_detector(DET, 0)
    feats = rng.normal(size=(3, DET.num_patches, DET.dim))
    sp = nn.constants(S.init_supervisor(SUP, 2, 0))
    names = ["decoder.query", "decoder.cross.o_w"]
    rest = {k: dp[k] for k in D.adapted_names(dp) if k not in names}

    def l_ada(theta):
        emb = D.decode(theta, feats, DET).embeddings
        return S.learned_loss(sp, S.build_tokens(sp, feats, emb, 2, SUP), SUP, 2)

    def f(*arrays):
        theta = nn.constants(rest)
        theta.update({k: ag.Tensor(a) for k, a in zip(names, arrays)})
        return l_ada(theta).item()

    theta = nn.constants(rest)
    leaves = {k: ag.Tensor(dp[k], requires_grad=True) for k in names}
    theta.update(leaves)
    grads = ag.grad(l_ada(theta), [leaves[k] for k in names])
    assert rel_err([g.data for g in grads], central_diff(f, [dp[k] for k in names], h=1e-6)) < 1e-5


def test_policy_distribution_is_normalised_for_every_prefix():
    p = S.init_supervisor(SUP, 4, 0)
    feats, emb = _inputs(np.random.default_rng(7), 5)
    for t in range(4):
        probs = S.policy_distribution(p, feats, emb, t, 4, SUP)
        assert probs.shape == (4,)
        assert abs(probs.sum() - 1.0) < 1e-12 and (probs > 0).all()
    with pytest.raises(S.SupervisorError):
        S.policy_distribution(p, feats, emb, 4, 4, SUP)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_policy_is_causal(seed, t):
    rng = np.random.default_rng(seed)
    p = S.init_supervisor(SUP, 4, 1)
    feats, emb = _inputs(rng, 5)
    a = S.policy_distribution(p, feats, emb, t, 4, SUP)
    feats2, emb2 = feats.copy(), emb.copy()
    feats2[t + 1 :] += rng.normal(size=feats2[t + 1 :].shape)
    emb2[t + 1 :] += rng.normal(size=emb2[t + 1 :].shape)
    assert np.array_equal(a, S.policy_distribution(p, feats2, emb2, t, 4, SUP))
    # the full-sequence logits agree too: later frames are masked out
    seq = S.build_tokens(p, feats, emb, 4, SUP)
    seq2 = S.build_tokens(p, feats2, emb2, 4, SUP)
    with ag.no_grad():
        la = S.policy_logits(nn.constants(p), seq, SUP).data[t]
        lb = S.policy_logits(nn.constants(p), seq2, SUP).data[t]
    np.testing.assert_allclose(la, lb, atol=1e-12)


def test_fresh_policy_is_near_uniform():
    cfg = S.SupervisorConfig()
    p = S.init_supervisor(cfg, 4, 0)
    rng = np.random.default_rng(8)
    total = np.zeros(4)
    for _ in range(100):
        feats, emb = _inputs(rng, 5, cfg, patches=64)
        total += S.policy_distribution(p, feats, emb, int(rng.integers(4)), 4, cfg)
    mean = total / 100
    assert np.all(np.abs(mean - 0.25) <= 0.15)


def test_parameter_ownership():
    p = S.init_supervisor(SUP, 4, 0)
    phi, rho = set(S.phi_names(p, SUP)), set(S.rho_names(p, SUP))
    assert not phi & rho
    assert phi | rho == set(p)
    assert any(k.startswith("trunk.") for k in phi)
    both = S.SupervisorConfig(det_dim=8, dim=8, layers=1, heads=2, mlp_hidden=8, loss_out=4, queries=3, max_steps=4, trunk_owner="both")
    assert {k for k in p if k.startswith("trunk.")} <= set(S.rho_names(p, both)) & set(S.phi_names(p, both))
    with pytest.raises(S.SupervisorError):
        S.SupervisorConfig(trunk_owner="nobody")


def test_decoders_have_three_layers_and_n_policy_tokens():
    p = S.init_supervisor(SUP, 3, 0)
    assert p["poltok"].shape[0] == 3
    for dec in ("lossdec", "poldec"):
        assert sorted(k for k in p if k.startswith(dec) and k.endswith("_w")) == [f"{dec}.{i}_w" for i in range(3)]
    with pytest.raises(S.SupervisorError):
        S.init_supervisor(SUP, 5, 0)
