import csv
import json

import numpy as np
import pytest

from adaptdet import autograd as ag
from adaptdet import detector as D
from adaptdet import evalbench as EB
from adaptdet import fusion as F
from adaptdet import meta as MT
from adaptdet import supervisor as S
from adaptdet import world as W

WDET = D.DetectorConfig(patch=8, dim=8, heads=2, ffn=16, queries=10)
WSUP = S.SupervisorConfig(det_dim=8, dim=8, layers=1, heads=2, mlp_hidden=8, loss_out=4)
SETUP = EB.EvalSetup(WDET, WSUP, alpha=1e-2)


@pytest.fixture(scope="module")
def tasks():
    return W.sample_tasks(3, W.SPLITS["test"], W.WorldConfig(), 2)


@pytest.fixture(scope="module")
def models(tasks):
    dp = D.init_detector(WDET, 0)
    sp = S.init_supervisor(WSUP, 2, 0)
    fp = F.init_fusion(WSUP, WDET, 0)
    out = {}
    for s in (0, 1):
        out[("detector", s)] = EB.TrainedModel("detector", dp)
        out[("multi-frame", s)] = EB.TrainedModel("fusion", dp, fp)
        for name in ("interactron", "interactron-rand", "repeated-first-frame"):
            out[(name, s)] = EB.TrainedModel("meta", dp, sp)
    return out


def test_spec_validation():
    with pytest.raises(EB.EvalError):
        EB.ExperimentSpec("telepathy")
    with pytest.raises(EB.EvalError):
        EB.ExperimentSpec("interactron", seeds=())
    with pytest.raises(EB.EvalError):
        EB.ExperimentSpec("repeated-first-frame", policy="learned")
    with pytest.raises(EB.EvalError):
        EB.ExperimentSpec("interactron", policy="random")
    assert EB.ExperimentSpec("no-train-at-test").checkpoint == "interactron"


def test_every_method_runs_and_reports_each_seed(tasks, models):
    for m in EB.METHODS:
        r = EB.run_experiment(EB.ExperimentSpec(m, n=2, seeds=(0, 1)), models, tasks, SETUP)
        assert sorted(r.per_seed) == [0, 1]
        assert 0.0 <= r.mean() <= 1.0 and r.std() >= 0.0
        assert set(r.summary()) == set(EB.METRIC_KEYS)


def test_single_frame_is_the_plain_detector(tasks, models):
    dets = EB.infer("single-frame", models[("detector", 0)], tasks, SETUP, 0)
    ref = D.detect(models[("detector", 0)].det_params, np.stack([t.initial_frame.image for t in tasks]), WDET)
    np.testing.assert_array_equal(dets.class_logits.data, ref.class_logits.data)


def test_fresh_fusion_head_reproduces_frame_zero(tasks, models):
    m = models[("multi-frame", 0)]
    fused = EB.infer("multi-frame", m, tasks, SETUP, 0)
    ref = EB.infer("single-frame", m, tasks, SETUP, 0)
    np.testing.assert_allclose(fused.class_logits.data, ref.class_logits.data, atol=1e-9)
    np.testing.assert_allclose(fused.boxes.data, ref.boxes.data, atol=1e-9)


def test_fusion_training_lowers_its_loss(tasks):
    dp = D.init_detector(WDET, 0)
    tds = MT.prepare_tasks(tasks, dp, WDET)
    fp, hist = F.train_fusion(tds, dp, WSUP, WDET, F.FusionSchedule(epochs=15, batch_size=3, lr=3e-3))
    assert hist[-1] < hist[0]
    fp2, hist2 = F.train_fusion(tds, dp, WSUP, WDET, F.FusionSchedule(epochs=15, batch_size=3, lr=3e-3))
    assert hist == hist2 and all(np.array_equal(fp[k], fp2[k]) for k in fp)


def test_random_rollouts_are_seeded_per_task(tasks):
    assert EB.random_rollouts(tasks, 0) == EB.random_rollouts(tasks, 0)
    assert EB.random_rollouts(tasks[:1], 0) == EB.random_rollouts(tasks, 0)[:1]
    assert EB.random_rollouts(tasks, 0) != EB.random_rollouts(tasks, 1) or len(tasks) < 2


def test_missing_checkpoint(tasks):
    with pytest.raises(EB.MissingCheckpointError):
        EB.run_experiment(EB.ExperimentSpec("interactron", n=2, seeds=(0,)), {}, tasks, SETUP)


def test_rollout_length_mismatch(tasks, models):
    with pytest.raises(EB.EvalError):
        EB.run_experiment(EB.ExperimentSpec("interactron", n=4, seeds=(0,)), models, tasks, SETUP)


def test_perfect_detections_score_one(tasks):
    gts = [EB.ground_truth(t) for t in tasks]
    k, v = WDET.queries, WDET.num_classes
    logits = np.full((len(tasks), k, v + 1), -20.0)
    logits[..., v] = 20.0
    boxes = np.full((len(tasks), k, 4), 0.5)
    for i, g in enumerate(gts):
        logits[i, : len(g.classes), v] = -20.0
        logits[i, np.arange(len(g.classes)), g.classes] = 20.0
        boxes[i, : len(g.classes)] = g.boxes
    dets = D.DetectionSet(ag.Tensor(logits), ag.Tensor(boxes), None, None)
    assert EB.score(dets, tasks, v).AP50 == 1.0


def test_transfer_and_exports(tasks, models, tmp_path):
    tr = EB.run_transfer(models, models[("detector", 0)].det_params, tasks, SETUP, seeds=(0, 1))
    assert set(tr.summary()) == {"frozen_a", "adaptive_a", "pretrained_b"}
    results = [tr.frozen, tr.adaptive]
    EB.write_csv(results, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"method", "seed", *EB.METRIC_KEYS}
    out = EB.write_summary(results, tmp_path / "r.json", extra={"note": 1})
    assert json.load(open(tmp_path / "r.json")) == json.loads(json.dumps(out))
