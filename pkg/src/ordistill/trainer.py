"""Sequential training protocol: model 1 learns with cross-entropy alone,
each later model additionally pays the orthogonality penalty against the
attention maps of every frozen predecessor.  SGD with momentum, weight decay
and per-epoch cosine annealing, two learning-rate groups (features vs
classifier).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as D
from . import tensor as T
from .attention import normalize, spatial_attention, student_map, teacher_map
from .backbone import BackboneConfig, Model, init_model, save_checkpoint
from .errors import ConfigError, NumericError
from .evaluate import predict_probs, top1_accuracy
from .losses import or_loss, total_loss

LOG_FIELDS = ("step", "model_index", "ce", "or_mean", "total", "lr")


@dataclass
class TrainRunConfig:
    n_models: int = 5
    alpha: float = 0.5
    epochs: int = 30
    batch_size: int = 16
    lr_feature: float = 0.001
    lr_classifier: float = 0.01
    lr_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seeds: list[int] = field(default_factory=list)
    data_dir: str = ""
    out_dir: str = ""
    precision: str = "float32"
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 1
    augment: bool = True

    def __post_init__(self):
        if self.n_models < 1:
            raise ConfigError("n_models must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not self.seeds:
            self.seeds = [1000 + i for i in range(self.n_models)]
        if len(self.seeds) != self.n_models:
            raise ConfigError(f"need {self.n_models} seeds, got {len(self.seeds)}")
        for name in ("lr_feature", "lr_classifier", "lr_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class OptimizerState:
    """Momentum buffers, one per parameter, plus a shared step counter."""

    def __init__(self):
        self.velocities: dict[int, np.ndarray] = {}
        self.step = 0


def sgd_step(params: dict[str, T.Tensor], state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        dt = p.data.dtype
        g = g + dt.type(weight_decay) * p.data
        v = state.velocities.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = dt.type(momentum) * v + g
        state.velocities[id(p)] = v
        p.data = p.data - dt.type(lr) * v
    state.step += 1


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _teacher_batch_maps(teachers: list[Model], x_data: np.ndarray) -> list:
    maps = []
    for idx, t in enumerate(teachers):
        feats, _ = t.forward(T.Tensor(x_data))
        maps.append(teacher_map(normalize(spatial_attention(feats, source_model=idx))))
    return maps


def train_one(model: Model, teachers: list[Model], images: np.ndarray, labels: np.ndarray,
              cfg: TrainRunConfig, model_index: int, log_writer=None) -> dict:
    """Train one member of the sequence; teachers are frozen and eval-mode."""
    model.train()
    state = OptimizerState()
    rng = np.random.default_rng([cfg.seeds[model_index], 1])  # data order + augmentation
    feature_params = {n: model.params[n] for n in model.feature_param_names()}
    classifier_params = {n: model.params[n] for n in model.classifier_param_names()}
    n_train = images.shape[0]
    step = 0
    rng_state = None
    for epoch in range(cfg.epochs):
        lr_f = cosine_lr(epoch, cfg.epochs, cfg.lr_feature * cfg.lr_scale)
        lr_c = cosine_lr(epoch, cfg.epochs, cfg.lr_classifier * cfg.lr_scale)
        perm = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if cfg.augment:
                batch = np.stack([D.augment_pixels(images[i], rng) for i in idx])
            else:
                batch = images[idx]
            batch = batch.astype(cfg.dtype, copy=False)
            yb = labels[idx]
            tmaps = _teacher_batch_maps(teachers, batch)
            with T.Tape() as tape:
                x = T.Tensor(batch)
                feats, logits = model.forward(x)
                ce = T.softmax_cross_entropy(logits, yb)
                if tmaps:
                    smap = student_map(normalize(spatial_attention(feats, source_model=model_index)))
                    or_terms = [or_loss(tm, smap) for tm in tmaps]
                else:
                    or_terms = []
                lb = total_loss(ce, or_terms, cfg.alpha)
                tape.backward(lb.total)
            sgd_step(feature_params, state, lr_f, cfg.momentum, cfg.weight_decay)
            sgd_step(classifier_params, state, lr_c, cfg.momentum, cfg.weight_decay)
            for p in model.params.values():
                p.zero_grad()
            if log_writer is not None:
                ors = lb.or_values
                log_writer.writerow({
                    "step": step, "model_index": model_index,
                    "ce": repr(lb.ce_value),
                    "or_mean": repr(sum(ors) / len(ors)) if ors else "0.0",
                    "total": repr(lb.total_value), "lr": repr(lr_f),
                })
            step += 1
        rng_state = rng.bit_generator.state
    model.eval()
    return {"steps": step, "rng_state": rng_state}


def _accuracy(model_or_models, images: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    from .evaluate import ensemble_predict
    models = model_or_models if isinstance(model_or_models, list) else [model_or_models]
    preds = ensemble_predict(models, images, batch_size=batch_size)
    return top1_accuracy(preds, labels)


def train_sequence(cfg: TrainRunConfig) -> dict:
    """Run the full protocol; returns the run summary (also written to disk)."""
    from .evaluate import ensemble_predict

    os.makedirs(cfg.out_dir, exist_ok=True)
    train_set = D.load(cfg.data_dir, "train")
    test_set = D.load(cfg.data_dir, "test")
    manifest = D.load_manifest(cfg.data_dir)
    k = manifest["config"]["num_classes"]
    img_size = manifest["config"]["image_size"]

    train_x = np.stack([im.pixels for im in train_set]).astype(cfg.dtype)
    train_y = np.array([im.label for im in train_set], dtype=np.int64)
    test_x = np.stack([im.pixels for im in test_set]).astype(cfg.dtype)
    test_y = np.array([im.label for im in test_set], dtype=np.int64)

    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())

    models: list[Model] = []
    summary_models = []
    for n in range(cfg.n_models):
        bcfg = BackboneConfig(stage_channels=cfg.stage_channels,
                              blocks_per_stage=cfg.blocks_per_stage,
                              input_size=(img_size, img_size),
                              num_classes=k, seed=cfg.seeds[n])
        model = init_model(bcfg, dtype=cfg.dtype)
        log_path = os.path.join(cfg.out_dir, f"model_{n:02d}_log.csv")
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            info = train_one(model, models, train_x, train_y, cfg, n, writer)
        train_acc = _accuracy(model, train_x, train_y, cfg.batch_size)
        test_acc = _accuracy(model, test_x, test_y, cfg.batch_size)
        ckpt_path = os.path.join(cfg.out_dir, f"model_{n:02d}.ckpt")
        save_checkpoint(model, ckpt_path, metadata={
            "model_index": n, "epochs": cfg.epochs, "alpha": cfg.alpha,
            "train_accuracy": train_acc, "test_accuracy": test_acc,
            "rng_state": info["rng_state"],
        })
        models.append(model)
        summary_models.append({"model_index": n, "seed": cfg.seeds[n],
                               "train_accuracy": train_acc, "test_accuracy": test_acc,
                               "checkpoint": os.path.basename(ckpt_path)})

    ens_preds = ensemble_predict(models, test_x, batch_size=cfg.batch_size)
    summary = {
        "config": asdict(cfg),
        "models": summary_models,
        "ensemble_test_accuracy": top1_accuracy(ens_preds, test_y),
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return summary
