"""Training objectives for Agg and Infer, plus per-step loss records."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

from . import ops
from .attention import BranchOutputs
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5  # bridge balance between source and target distances
    alpha: float = 0.4
    beta: float = 0.7
    gamma: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative, got {getattr(self, name)}")


def _per_sample_norm(diff: Tensor) -> Tensor:
    """Euclidean norm of each sample's flattened token matrix, averaged over the batch."""
    if diff.ndim <= 2:
        return ops.euclidean_norm(diff, axis=None)
    axes = tuple(range(1, diff.ndim))
    return ops.mean(ops.euclidean_norm(diff, axis=axes))


def bridge_loss(out: BranchOutputs, lam: float = 0.5) -> Tensor:
    """``lam * ||p_s - p_p|| + (1 - lam) * ||p_t - p_p||``."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if out.p_p is None:
        raise ContractError("bridge_loss needs the polymerized branch output")
    if not (out.p_s.shape == out.p_t.shape == out.p_p.shape):
        raise DimensionError(f"branch shapes differ: {out.p_s.shape}, {out.p_t.shape}, {out.p_p.shape}")
    d_sp = _per_sample_norm(out.p_s - out.p_p)
    d_tp = _per_sample_norm(out.p_t - out.p_p)
    return d_sp * lam + d_tp * (1.0 - lam)


def domain_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all pixels."""
    pred, target = ops.as_tensor(pred), ops.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"domain_l1: prediction {pred.shape} vs target {target.shape}")
    return ops.mean(ops.abs(pred - target))


def agg_total(brd: Sequence[Tensor], l_s: Tensor, l_t: Tensor, w: LossWeights) -> Tensor:
    total = l_s * w.alpha + l_t * w.beta
    for term in brd:
        total = total + term
    return total


def distillation_loss(teacher: Tensor, student: Tensor) -> Tensor:
    """Mean absolute gap between a frozen teacher map and the student map.

    The teacher is detached, so no gradient can reach the teacher's parameters.
    """
    teacher = ops.as_tensor(teacher)
    if teacher.shape != student.shape:
        raise DimensionError(f"distillation_loss: teacher {teacher.shape} vs student {student.shape}")
    return ops.mean(ops.abs(teacher.detach() - student))


def infer_total(l_t_prime: Tensor, l_dtl: Tensor, w: LossWeights) -> Tensor:
    return l_t_prime + l_dtl * w.gamma


@dataclass(frozen=True)
class AggLossReport:
    step: int
    l_brd: tuple[float, float, float]
    l_s: float
    l_t: float
    l_total: float

    header = ("step", "l_brd_1", "l_brd_2", "l_brd_3", "l_s", "l_t", "l_total")

    def row(self) -> list[str]:
        return [str(self.step), *(repr(v) for v in self.l_brd), repr(self.l_s), repr(self.l_t), repr(self.l_total)]

    def recombined(self, w: LossWeights) -> float:
        return sum(self.l_brd) + w.alpha * self.l_s + w.beta * self.l_t


@dataclass(frozen=True)
class InferLossReport:
    step: int
    l_t_prime: float
    l_dtl: float
    l_total: float

    header = ("step", "l_t_prime", "l_dtl", "l_total")

    def row(self) -> list[str]:
        return [str(self.step), repr(self.l_t_prime), repr(self.l_dtl), repr(self.l_total)]

    def recombined(self, w: LossWeights) -> float:
        return self.l_t_prime + w.gamma * self.l_dtl


def write_history_csv(path, history: Sequence) -> None:
    if not history:
        raise ContractError("empty loss history")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(type(history[0]).header)
        for report in history:
            writer.writerow(report.row())


def read_history_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
