"""Small plain-conv CNN: stacked conv/relu stages with 2x2 max pooling,
global average pooling and a linear classifier.  No normalization layers and
no dropout, so eval-mode forward is a pure function of the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ArtifactError, ConfigError

CHECKPOINT_MAGIC = b"ODCK"


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 1
    input_size: tuple[int, int] = (32, 32)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.input_size = tuple(self.input_size)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be positive")
        if not self.stage_channels:
            raise ConfigError("stage_channels must be non-empty")
        h, w = self.feature_plane()
        if h < 4 or w < 4:
            raise ConfigError(
                f"final feature plane {h}x{w} is below the 4x4 minimum; "
                "use a larger input or fewer stages")

    def feature_plane(self) -> tuple[int, int]:
        h, w = self.input_size
        for _ in self.stage_channels:
            h, w = h // 2, w // 2
        return h, w


class Model:
    def __init__(self, config: BackboneConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params  # insertion-ordered, names unique
        self.mode = "train"

    def train(self) -> "Model":
        self.mode = "train"
        for p in self.params.values():
            p.requires_grad = True
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        for p in self.params.values():
            p.requires_grad = False
        return self

    def feature_param_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("fc_")]

    def classifier_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("fc_")]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, images: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """images [B,3,H,W] -> (features F [B,C,H',W'], logits [B,K])."""
        h, w = self.config.input_size
        if images.data.ndim != 4 or images.shape[1:] != (3, h, w):
            raise ConfigError(f"expected images [B,3,{h},{w}], got {images.shape}")
        # center [0,1] pixels to [-1,1]; keeps early conv/relu units alive
        x = T.scalar_mul(T.add(images, T.Tensor(np.asarray(-0.5, dtype=images.dtype))), 2.0)
        for s in range(len(self.config.stage_channels)):
            for b in range(self.config.blocks_per_stage):
                x = T.conv2d(x, self.params[f"stage{s}_block{b}_w"],
                             self.params[f"stage{s}_block{b}_b"], stride=1, padding=1)
                x = T.relu(x)
            x = T.max_pool2d(x, 2)
        features = x
        pooled = T.reshape(T.global_avg_pool(features), (features.shape[0], features.shape[1]))
        logits = T.linear(pooled, self.params["fc_w"], self.params["fc_b"])
        return features, logits


def init_model(config: BackboneConfig, dtype=np.float32) -> Model:
    """Kaiming-normal conv weights, zero biases, std-0.01 classifier weight."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, T.Tensor] = {}
    c_in = 3
    for s, c_out in enumerate(config.stage_channels):
        for b in range(config.blocks_per_stage):
            fan_in = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
            params[f"stage{s}_block{b}_w"] = T.Tensor(w.astype(dtype), requires_grad=True)
            params[f"stage{s}_block{b}_b"] = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            c_in = c_out
    k = config.num_classes
    fc_w = rng.normal(0.0, 0.01, size=(k, config.stage_channels[-1]))
    params["fc_w"] = T.Tensor(fc_w.astype(dtype), requires_grad=True)
    params["fc_b"] = T.Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
    return Model(config, params)


# -- checkpoints ---------------------------------------------------------------
# Layout: magic, u64 header length, JSON header, concatenated tensor blobs.
# The header carries the config, training metadata, and a name->offset
# manifest (offsets relative to the blob section).

def save_checkpoint(model: Model, path: str, metadata: dict | None = None) -> None:
    blobs = b""
    manifest = {}
    for name, p in model.params.items():
        manifest[name] = len(blobs)
        blobs += T.tensor_to_bytes(p.data)
    header = {
        "config": asdict(model.config),
        "manifest": manifest,
        "metadata": metadata or {},
    }
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hj)))
        fh.write(hj)
        fh.write(blobs)


def load_checkpoint(path: str) -> tuple[Model, dict]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != CHECKPOINT_MAGIC:
            raise ArtifactError(f"corrupt checkpoint {path}: bad magic")
        (hlen,) = struct.unpack_from("<Q", buf, 4)
        header = json.loads(buf[12:12 + hlen].decode())
        cfg_d = header["config"]
        config = BackboneConfig(**cfg_d)
        blob_start = 12 + hlen
        params: dict[str, T.Tensor] = {}
        # rebuild in canonical parameter order, offsets from the manifest
        ref = init_model(config)
        for name in ref.params:
            off = header["manifest"][name]
            arr, _ = T.tensor_from_bytes(buf, blob_start + off)
            if arr.shape != ref.params[name].shape:
                raise ArtifactError(f"corrupt checkpoint {path}: shape mismatch for {name}")
            params[name] = T.Tensor(arr, requires_grad=True)
        model = Model(config, params)
        model.eval()
        return model, header["metadata"]
    except ArtifactError:
        raise
    except (OSError,) as e:
        raise
    except Exception as e:
        raise ArtifactError(f"corrupt checkpoint {path}: {e}") from e
