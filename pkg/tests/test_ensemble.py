"""Ensemble inference and attention-overlap metric tests."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

import ordistill.tensor as T
from ordistill.backbone import BackboneConfig, init_model
from ordistill.errors import ContractError
from ordistill.evaluate import (EnsembleResult, attention_overlap, ensemble_predict,
                                evaluate_models, predict_logits, predict_probs,
                                top1_accuracy)


def stub_model(logits_fn, num_classes, features_fn=None):
    """Minimal object with the Model surface ensemble_predict touches."""
    def forward(x):
        b = x.data.shape[0]
        feats = (features_fn(b) if features_fn
                 else T.Tensor(np.zeros((b, 2, 4, 4))))
        return feats, T.Tensor(logits_fn(b))
    return SimpleNamespace(config=SimpleNamespace(num_classes=num_classes),
                           forward=forward)


def const_logits(row):
    row = np.asarray(row, dtype=np.float64)
    return lambda b: np.tile(row, (b, 1))


IMAGES = np.zeros((5, 3, 8, 8), dtype=np.float32)


def test_top1_accuracy_trivial():
    assert top1_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert top1_accuracy([0, 1, 2], [1, 2, 0]) == 0.0
    assert top1_accuracy([0, 1], [0, 0]) == 0.5


def test_top1_accuracy_errors():
    with pytest.raises(ContractError):
        top1_accuracy([0, 1], [0])
    with pytest.raises(ContractError):
        top1_accuracy([], [])


def test_ensemble_predict_single_model_argmax():
    m = stub_model(const_logits([0.1, 2.0, -1.0]), 3)
    preds = ensemble_predict([m], IMAGES)
    np.testing.assert_array_equal(preds, np.ones(5, dtype=np.int64))


def test_ensemble_predict_probability_averaging():
    # model A is confidently wrong toward class 0; model B mildly favors 2;
    # softmax averaging lets the confident model dominate
    a = stub_model(const_logits([5.0, 0.0, 0.0]), 3)
    b = stub_model(const_logits([0.0, 0.0, 1.0]), 3)
    preds = ensemble_predict([a, b], IMAGES, average="prob")
    pa = T.softmax(np.array([5.0, 0.0, 0.0]))
    pb = T.softmax(np.array([0.0, 0.0, 1.0]))
    np.testing.assert_array_equal(preds, np.full(5, np.argmax(pa + pb)))


def test_ensemble_predict_logit_averaging_differs_interface():
    a = stub_model(const_logits([2.0, 0.0]), 2)
    b = stub_model(const_logits([0.0, 1.0]), 2)
    preds = ensemble_predict([a, b], IMAGES, average="logit")
    np.testing.assert_array_equal(preds, np.zeros(5, dtype=np.int64))


def test_ensemble_predict_tie_goes_to_lowest_index():
    m = stub_model(const_logits([1.0, 1.0, 1.0]), 3)
    preds = ensemble_predict([m], IMAGES)
    np.testing.assert_array_equal(preds, np.zeros(5, dtype=np.int64))


def test_ensemble_predict_contract_errors():
    with pytest.raises(ContractError):
        ensemble_predict([], IMAGES)
    with pytest.raises(ContractError):
        ensemble_predict([stub_model(const_logits([0, 1]), 2),
                          stub_model(const_logits([0, 1, 2]), 3)], IMAGES)
    with pytest.raises(ContractError):
        ensemble_predict([stub_model(const_logits([0, 1]), 2)], IMAGES,
                         average="median")


def test_predict_probs_rows_sum_to_one():
    model = init_model(BackboneConfig(stage_channels=[4], input_size=(8, 8),
                                      num_classes=4, seed=2)).eval()
    x = np.random.default_rng(0).uniform(size=(3, 3, 8, 8)).astype(np.float32)
    probs = predict_probs(model, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)
    logits = predict_logits(model, x)
    np.testing.assert_array_equal(np.argmax(probs, 1), np.argmax(logits, 1))


def test_batching_does_not_change_predictions():
    model = init_model(BackboneConfig(stage_channels=[4], input_size=(8, 8),
                                      num_classes=4, seed=3)).eval()
    x = np.random.default_rng(1).uniform(size=(7, 3, 8, 8)).astype(np.float32)
    # float32 summation order differs across batch sizes; values agree to
    # rounding and the argmax decisions are identical
    la = predict_logits(model, x, batch_size=2)
    lb = predict_logits(model, x, batch_size=7)
    np.testing.assert_allclose(la, lb, rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(np.argmax(la, 1), np.argmax(lb, 1))


def test_attention_overlap_zero_for_flat_student():
    rng = np.random.default_rng(2)

    def varied(b):
        return T.Tensor(rng.normal(size=(b, 2, 4, 4)))

    def flat(b):
        return T.Tensor(np.full((b, 2, 4, 4), 3.0))

    mi = stub_model(const_logits([0.0, 0.0]), 2, features_fn=varied)
    mj = stub_model(const_logits([0.0, 0.0]), 2, features_fn=flat)
    assert attention_overlap(mi, mj, IMAGES) == 0.0


def test_attention_overlap_nonnegative_real_models():
    mi = init_model(BackboneConfig(stage_channels=[4], input_size=(8, 8),
                                   num_classes=4, seed=4)).eval()
    mj = init_model(BackboneConfig(stage_channels=[4], input_size=(8, 8),
                                   num_classes=4, seed=5)).eval()
    x = np.random.default_rng(3).uniform(size=(6, 3, 8, 8)).astype(np.float32)
    assert attention_overlap(mi, mj, x) >= 0.0
    assert attention_overlap(mi, mj, x, batch_size=2) == \
        pytest.approx(attention_overlap(mi, mj, x, batch_size=6), rel=1e-5)


def test_evaluate_models_structure():
    a = stub_model(const_logits([2.0, 0.0]), 2)
    b = stub_model(const_logits([0.0, 2.0]), 2)
    labels = np.array([0, 0, 0, 1, 1])
    result = evaluate_models([a, b], IMAGES, labels, with_overlap=False,
                             config={"tag": "t"})
    assert result.per_model_accuracy == [0.6, 0.4]
    assert result.overlap_matrix == []
    parsed = json.loads(result.to_json())
    assert parsed["config"] == {"tag": "t"}
    assert parsed["per_model_accuracy"] == [0.6, 0.4]


def test_ensemble_result_csv():
    r = EnsembleResult([1.0], 1.0, [[0.25, 0.5], [0.125, 1.0]])
    assert r.overlap_csv() == "0.25,0.5\n0.125,1.0\n"
