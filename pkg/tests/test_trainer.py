"""Training protocol tests on a deliberately tiny dataset and model."""

import csv
import hashlib
import math
import os

import numpy as np
import pytest

import ordistill.tensor as T
from ordistill import data as D
from ordistill.backbone import load_checkpoint
from ordistill.errors import ConfigError, NumericError
from ordistill.trainer import (OptimizerState, TrainRunConfig, cosine_lr, sgd_step,
                               train_one, train_sequence)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("tinyds"))
    D.generate(D.DatasetConfig(num_classes=3, patches_per_class=2, train_per_class=8,
                               test_per_class=4, seed=1,
                               patch_contrast_lo=[0.38, 0.25],
                               patch_contrast_hi=[0.52, 0.36]), out)
    return out


def tiny_train_config(data_dir, out_dir, **kw):
    base = dict(n_models=2, alpha=0.5, epochs=2, batch_size=8,
                data_dir=data_dir, out_dir=out_dir, seeds=[7, 8],
                stage_channels=[4, 8], augment=True)
    base.update(kw)
    return TrainRunConfig(**base)


def params_digest(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


# -- config --------------------------------------------------------------------

def test_config_seed_autofill():
    cfg = TrainRunConfig(n_models=3, data_dir="x", out_dir="y")
    assert cfg.seeds == [1000, 1001, 1002]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainRunConfig(n_models=0)
    with pytest.raises(ConfigError):
        TrainRunConfig(alpha=-0.5)
    with pytest.raises(ConfigError):
        TrainRunConfig(n_models=2, seeds=[1])
    with pytest.raises(ConfigError):
        TrainRunConfig(precision="float16")
    with pytest.raises(ConfigError):
        TrainRunConfig(lr_scale=0)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainRunConfig.from_dict({"n_models": 1, "learning_rate": 0.1})


# -- optimizer -----------------------------------------------------------------

def test_sgd_step_hand_computed():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([0.5], dtype=np.float32)
    state = OptimizerState()
    lr, momentum, wd = 0.1, 0.9, 0.01
    # step 1: g = 0.5 + 0.01*1.0 = 0.51; v = 0.51; p = 1 - 0.051 = 0.949
    sgd_step({"p": p}, state, lr, momentum, wd)
    np.testing.assert_allclose(p.data, [0.949], rtol=1e-6)
    # step 2: g = 0.5 + 0.01*0.949 = 0.50949; v = 0.9*0.51 + 0.50949
    p.grad = np.array([0.5], dtype=np.float32)
    sgd_step({"p": p}, state, lr, momentum, wd)
    v2 = 0.9 * 0.51 + (0.5 + 0.01 * 0.949)
    np.testing.assert_allclose(p.data, [0.949 - 0.1 * v2], rtol=1e-6)
    assert state.step == 2


def test_sgd_step_skips_missing_grad():
    p = T.Tensor(np.array([2.0]), requires_grad=True)
    sgd_step({"p": p}, OptimizerState(), 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(p.data, [2.0])


def test_sgd_step_non_finite_grad():
    p = T.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        sgd_step({"p": p}, OptimizerState(), 0.1, 0.9, 0.0)


def test_cosine_schedule():
    assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
    assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
    assert cosine_lr(9, 10, 0.1) == pytest.approx(0.05 * (1 + math.cos(math.pi * 0.9)))
    with pytest.raises(ConfigError):
        cosine_lr(10, 10, 0.1)


# -- protocol ------------------------------------------------------------------

def test_single_model_run_has_zero_or_terms(tiny_dataset, tmp_path):
    cfg = tiny_train_config(tiny_dataset, str(tmp_path / "run"),
                            n_models=1, seeds=[7])
    train_sequence(cfg)
    with open(tmp_path / "run" / "model_00_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert all(r["or_mean"] == "0.0" for r in rows)
    assert all(r["ce"] == r["total"] for r in rows)


def test_teachers_frozen_during_student_phase(tiny_dataset, tmp_path):
    cfg = tiny_train_config(tiny_dataset, str(tmp_path / "run"))
    train = D.load(tiny_dataset, "train")
    images = np.stack([im.pixels for im in train]).astype(cfg.dtype)
    labels = np.array([im.label for im in train], dtype=np.int64)

    from ordistill.backbone import BackboneConfig, init_model
    bcfg = BackboneConfig(stage_channels=cfg.stage_channels, input_size=(32, 32),
                          num_classes=3, seed=cfg.seeds[0])
    teacher = init_model(bcfg)
    train_one(teacher, [], images, labels, cfg, 0)
    before = params_digest(teacher)

    student = init_model(BackboneConfig(stage_channels=cfg.stage_channels,
                                        input_size=(32, 32), num_classes=3,
                                        seed=cfg.seeds[1]))
    train_one(student, [teacher], images, labels, cfg, 1)
    assert params_digest(teacher) == before


def test_alpha_zero_student_bitwise_equals_ce_only(tiny_dataset, tmp_path):
    cfg = tiny_train_config(tiny_dataset, str(tmp_path / "a"), alpha=0.0)
    train_sequence(cfg)
    model_seq, _ = load_checkpoint(str(tmp_path / "a" / "model_01.ckpt"))

    # independent CE-only training of the second model: no teachers at all
    from ordistill.backbone import BackboneConfig, init_model
    train = D.load(tiny_dataset, "train")
    images = np.stack([im.pixels for im in train]).astype(cfg.dtype)
    labels = np.array([im.label for im in train], dtype=np.int64)
    solo = init_model(BackboneConfig(stage_channels=cfg.stage_channels,
                                     input_size=(32, 32), num_classes=3,
                                     seed=cfg.seeds[1]), dtype=cfg.dtype)
    train_one(solo, [], images, labels, cfg, model_index=1)
    assert params_digest(solo) == params_digest(model_seq)


def test_or_penalty_changes_student(tiny_dataset, tmp_path):
    a = tiny_train_config(tiny_dataset, str(tmp_path / "a"), alpha=0.0)
    b = tiny_train_config(tiny_dataset, str(tmp_path / "b"), alpha=0.5)
    train_sequence(a)
    train_sequence(b)
    first_a, _ = load_checkpoint(str(tmp_path / "a" / "model_00.ckpt"))
    first_b, _ = load_checkpoint(str(tmp_path / "b" / "model_00.ckpt"))
    assert params_digest(first_a) == params_digest(first_b)  # CE-only either way
    second_a, _ = load_checkpoint(str(tmp_path / "a" / "model_01.ckpt"))
    second_b, _ = load_checkpoint(str(tmp_path / "b" / "model_01.ckpt"))
    assert params_digest(second_a) != params_digest(second_b)


def test_train_sequence_deterministic(tiny_dataset, tmp_path):
    import shutil
    out = str(tmp_path / "run")
    digests = []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        train_sequence(tiny_train_config(tiny_dataset, out))
        digests.append({
            f: hashlib.sha256(open(os.path.join(out, f), "rb").read()).hexdigest()
            for f in sorted(os.listdir(out))})
    assert digests[0] == digests[1]


def test_run_artifacts_present(tiny_dataset, tmp_path):
    out = str(tmp_path / "run")
    summary = train_sequence(tiny_train_config(tiny_dataset, out))
    files = set(os.listdir(out))
    assert {"config.json", "summary.json", "model_00.ckpt", "model_01.ckpt",
            "model_00_log.csv", "model_01_log.csv"} <= files
    assert len(summary["models"]) == 2
    assert 0.0 <= summary["ensemble_test_accuracy"] <= 1.0
    for m in summary["models"]:
        assert 0.0 <= m["test_accuracy"] <= 1.0


def test_log_or_terms_positive_for_student(tiny_dataset, tmp_path):
    out = str(tmp_path / "run")
    train_sequence(tiny_train_config(tiny_dataset, out, alpha=0.5))
    with open(os.path.join(out, "model_01_log.csv")) as fh:
        rows = list(csv.DictReader(fh))
    ors = [float(r["or_mean"]) for r in rows]
    assert all(v >= 0.0 for v in ors)
    assert any(v > 0.0 for v in ors)
    for r in rows:
        assert float(r["total"]) == pytest.approx(
            float(r["ce"]) + 0.5 * float(r["or_mean"]), rel=1e-6)
