"""Spatial attention maps and their teacher/student transforms.

The raw map compresses a feature tensor F[B,C,H,W] to one plane per sample:
channel importances from global average pooling are multiplied back into F
and the result is averaged across channels.  Teacher maps take the absolute
value of the standardized map and are detached; student maps keep only the
positive part and stay differentiable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .netpbm import encode_pgm

NORM_EPS = 1e-5

STAGES = ("raw", "normalized", "teacher", "student")


@dataclass
class AttentionMap:
    values: T.Tensor  # [B,1,H,W]
    stage: str
    source_model: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown attention stage {self.stage!r}")


def _require_stage(m: AttentionMap, stage: str, op: str) -> None:
    if m.stage != stage:
        raise ContractError(f"{op} expects a {stage} map, got {m.stage}")


def spatial_attention(F: T.Tensor, source_model: int = 0) -> AttentionMap:
    """Raw map = CAP(GAP(F) * F), differentiable end-to-end."""
    weighted = T.broadcast_mul(T.global_avg_pool(F), F)
    return AttentionMap(T.channel_avg_pool(weighted), "raw", source_model)


def normalize(m: AttentionMap) -> AttentionMap:
    """Standardize each sample's plane to zero mean, unit population std.

    An eps on the std keeps constant maps total: they map to all zeros.
    """
    _require_stage(m, "raw", "normalize")
    return AttentionMap(T.spatial_standardize(m.values, NORM_EPS), "normalized", m.source_model)


def teacher_map(m: AttentionMap) -> AttentionMap:
    """|M_norm|, detached: no gradient flows into the teacher."""
    _require_stage(m, "normalized", "teacher_map")
    return AttentionMap(T.Tensor(np.abs(m.values.data)), "teacher", m.source_model)


def student_map(m: AttentionMap) -> AttentionMap:
    """max(M_norm, 0); gradient passes where the map is positive."""
    _require_stage(m, "normalized", "student_map")
    return AttentionMap(T.clamp_min0(m.values), "student", m.source_model)


def export_heatmaps(m: AttentionMap, out_dir: str, split: str, sample_ids: list[int]) -> list[str]:
    """Write one 8-bit PGM per sample, min-max scaled to 0..255."""
    vals = m.values.data
    if len(sample_ids) != vals.shape[0]:
        raise ContractError("sample_ids length does not match batch size")
    paths = []
    for i, sid in enumerate(sample_ids):
        plane = vals[i, 0]
        lo, hi = plane.min(), plane.max()
        scaled = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
        img = np.round(scaled * 255).astype(np.uint8)
        name = f"{split}_{sid:06d}_{m.source_model:02d}_{m.stage}.pgm"
        path = os.path.join(out_dir, name)
        with open(path, "wb") as fh:
            fh.write(encode_pgm(img))
        paths.append(path)
    return paths
