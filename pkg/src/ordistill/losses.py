"""Orthogonality penalty between attention maps and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .attention import AttentionMap
from .errors import ConfigError, ShapeError

DEFAULT_ALPHA = 0.5


def or_loss(teacher: AttentionMap, student: AttentionMap) -> T.Tensor:
    """Mean over batch and positions of teacher * student; >= 0 by construction."""
    if teacher.values.shape != student.values.shape:
        raise ShapeError(
            f"or_loss: teacher shape {teacher.values.shape} != student shape {student.values.shape}")
    return T.mean(T.broadcast_mul(teacher.values, student.values))


@dataclass
class LossBreakdown:
    ce: T.Tensor
    or_terms: list[T.Tensor] = field(default_factory=list)
    alpha: float = DEFAULT_ALPHA
    total: T.Tensor = None

    @property
    def ce_value(self) -> float:
        return self.ce.item()

    @property
    def or_values(self) -> list[float]:
        return [t.item() for t in self.or_terms]

    @property
    def total_value(self) -> float:
        return self.total.item()


def total_loss(ce: T.Tensor, or_terms: list[T.Tensor], alpha: float) -> LossBreakdown:
    """ce + (alpha / (N-1)) * sum(or_terms); plain ce for the first model."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    if not or_terms or alpha == 0:
        return LossBreakdown(ce, list(or_terms), alpha, ce)
    acc = or_terms[0]
    for t in or_terms[1:]:
        acc = T.add(acc, t)
    total = T.add(ce, T.scalar_mul(acc, alpha / len(or_terms)))
    return LossBreakdown(ce, list(or_terms), alpha, total)
