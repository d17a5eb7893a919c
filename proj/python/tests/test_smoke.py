import json

import numpy as np
import pytest

import cteach


def test_harmonic_iou_rows():
    assert abs(100 * cteach.harmonic_iou(0.919, 0.778) - 84.3) <= 0.05
    assert abs(100 * cteach.harmonic_iou(0.892, 0.822) - 85.6) <= 0.05
    assert cteach.harmonic_iou(0.0, 0.0) == 0.0


def test_evaluate_perfect_and_errors():
    gt = [0, 0, 1, 1, 2, 2, 3, 3]
    r = cteach.evaluate(gt, gt, 4, 2)
    assert r["pAcc"] == r["mIoU_S"] == r["mIoU_U"] == r["hIoU"] == 1.0
    with pytest.raises(ValueError):
        cteach.evaluate([9], [0], 4, 2)


def test_world_scene_shapes():
    w = cteach.World(json.dumps({"world": {"height": 12, "width": 10}}))
    s = w.scene(3)
    assert s.gt_labels.shape == (12, 10)
    assert s.dense_tokens.shape == (12, 10, 32)
    assert np.isclose(np.linalg.norm(s.cls_token), 1.0)
    assert set(np.unique(s.gt_labels[s.seen_labels == 255])) <= set(w.unseen)


def test_noise_free_pseudo_labels_are_pure():
    w = cteach.World(json.dumps({"world": {"noise_sigma": 0.0}}))
    purities = []
    for seed in range(6):
        purities += w.pseudo_labels(w.scene(seed))["purity"]
    assert purities
    assert all(p == 1.0 for p in purities)


def test_gradient_suite_passes():
    paths = cteach.gradient_suite(0)
    assert len(paths) > 30
    assert max(err for _, err in paths) < 1e-4


def test_config_errors_surface():
    with pytest.raises(ValueError, match="glm.temprature"):
        cteach.World(json.dumps({"glm": {"temprature": 0.1}}))
    code, _, err = cteach.main(["train", "--config", "/nonexistent.json", "--out", "/tmp/cteach_py_missing"])
    assert code == 2
    assert "/nonexistent.json" in err


def test_short_training_is_deterministic():
    a = cteach.train(seed=1, iterations=5)
    b = cteach.train(seed=1, iterations=5)
    assert a == b
    assert len(a["loss"]) == 5
    assert 0.0 <= a["hIoU"] <= 1.0
