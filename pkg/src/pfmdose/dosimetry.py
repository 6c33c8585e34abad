"""Dose-volume metrics for predicted and ground-truth dose maps.

Doses are prescription fractions in [0, 1]. Conventions:

* ``Dx``: sort structure doses descending and take the ``ceil(x*n/100)``-th.
* ``Vx``: percent of structure pixels with dose >= x.
* HI = (D2 - D98) / D50.
* CI (Paddick) = TV_PIV**2 / (TV * PIV), PIV = pixels with dose >= 0.95.
* APE: per-case relative error ``|pred - true| / |true|``, falling back to the
  absolute difference (and flagging it) when ``true == 0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError

METRIC_NAMES = ("HI", "CI", "D98", "D95", "Dmean", "V40", "V50")
COMPARISON_METRICS = ("HI", "CI", "D98", "D95", "Dmean", "V50")


def _voxels(dose, mask) -> np.ndarray:
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask) > 0.5
    if dose.shape != mask.shape:
        raise ContractError(f"dose {dose.shape} and mask {mask.shape} differ")
    values = dose[mask]
    if values.size == 0:
        raise ContractError("structure mask is empty")
    return values


@dataclass
class DVHCurve:
    structure: str
    edges: np.ndarray
    volume: np.ndarray  # fraction of structure with dose >= edge


def dvh(dose, mask, structure: str = "PTV", bins: int = 256) -> DVHCurve:
    """Cumulative DVH on ``bins`` uniform dose edges spanning [0, 1]."""
    values = np.sort(_voxels(dose, mask))
    edges = np.linspace(0.0, 1.0, bins)
    above = values.size - np.searchsorted(values, edges, side="left")
    return DVHCurve(structure, edges, above / values.size)


def dose_at_volume(dose, ptv, x: float) -> float:
    if not 0.0 < x <= 100.0:
        raise ContractError(f"volume percentage must be in (0, 100], got {x}")
    values = np.sort(_voxels(dose, ptv))[::-1]
    rank = math.ceil(x * values.size / 100.0 - 1e-9)
    return float(values[max(rank, 1) - 1])


def volume_at_dose(dose, structure, x: float) -> float:
    values = _voxels(dose, structure)
    return 100.0 * float(np.count_nonzero(values >= x)) / values.size


def mean_dose(dose, structure) -> float:
    values = _voxels(dose, structure)
    return math.fsum(values) / values.size  # exactly rounded sum, so independent of pixel order


def homogeneity_index(dose, ptv) -> float:
    d50 = dose_at_volume(dose, ptv, 50)
    if d50 == 0.0:
        raise UndefinedMetricError("HI undefined: D50 is zero")
    return (dose_at_volume(dose, ptv, 2) - dose_at_volume(dose, ptv, 98)) / d50


def conformality_index(dose, ptv, threshold: float = 0.95) -> float:
    dose = np.asarray(dose, dtype=np.float64)
    tv_mask = np.asarray(ptv) > 0.5
    if not tv_mask.any():
        raise ContractError("PTV mask is empty")
    piv_mask = dose >= threshold
    piv = int(np.count_nonzero(piv_mask))
    if piv == 0:
        return 0.0
    tv = int(np.count_nonzero(tv_mask))
    both = int(np.count_nonzero(piv_mask & tv_mask))
    return both * both / (tv * piv)


@dataclass(frozen=True)
class DoseMetrics:
    HI: float
    CI: float
    D98: float
    D95: float
    Dmean: float
    V40: float
    V50: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def case_metrics(dose, ptv, oars) -> DoseMetrics:
    """PTV metrics (HI, CI, D98, D95) and OAR metrics (Dmean, V40, V50)."""
    return DoseMetrics(
        HI=homogeneity_index(dose, ptv),
        CI=conformality_index(dose, ptv),
        D98=dose_at_volume(dose, ptv, 98),
        D95=dose_at_volume(dose, ptv, 95),
        Dmean=mean_dose(dose, oars),
        V40=volume_at_dose(dose, oars, 0.40),
        V50=volume_at_dose(dose, oars, 0.50),
    )


def ape(metric_pred: float, metric_true: float) -> tuple[float, bool]:
    """Return ``(error, fell_back)``; ``fell_back`` marks the absolute-difference case."""
    diff = abs(metric_pred - metric_true)
    if metric_true == 0.0:
        return diff, True
    return diff / abs(metric_true), False


@dataclass
class APEReport:
    case_ids: list[str]
    per_case: list[dict[str, float]]
    absolute_fallbacks: list[tuple[str, str]] = field(default_factory=list)  # (case_id, metric)

    def cohort(self) -> dict[str, tuple[float, float]]:
        """Mean and population std per metric."""
        out = {}
        for name in METRIC_NAMES:
            values = np.array([row[name] for row in self.per_case])
            out[name] = (float(values.mean()), float(values.std()))
        return out


def ape_report(ids: Sequence[str], pred: Sequence[DoseMetrics], true: Sequence[DoseMetrics]) -> APEReport:
    per_case, flags = [], []
    for cid, p, t in zip(ids, pred, true):
        row = {}
        for name in METRIC_NAMES:
            row[name], fell_back = ape(getattr(p, name), getattr(t, name))
            if fell_back:
                flags.append((cid, name))
        per_case.append(row)
    return APEReport(list(ids), per_case, flags)


def cohort_summary(rows: Sequence[dict[str, float]], names=METRIC_NAMES) -> dict[str, tuple[float, float]]:
    return {n: (float(np.mean([r[n] for r in rows])), float(np.std([r[n] for r in rows]))) for n in names}


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.6g}±{std:.6g}"


def write_metrics_csv(path, ids: Sequence[str], rows: Sequence[dict[str, float]]) -> None:
    """Per-case rows followed by one ``mean±std`` cohort row (case_id ``cohort``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", *METRIC_NAMES])
        for cid, row in zip(ids, rows):
            writer.writerow([cid, *(repr(float(row[n])) for n in METRIC_NAMES)])
        summary = cohort_summary(rows)
        writer.writerow(["cohort", *(format_mean_std(*summary[n]) for n in METRIC_NAMES)])


def read_metrics_csv(path) -> tuple[list[str], list[dict[str, float]], dict[str, str]]:
    ids, rows, cohort = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            cid = rec.pop("case_id")
            if cid == "cohort":
                cohort = rec
            else:
                ids.append(cid)
                rows.append({k: float(v) for k, v in rec.items()})
    return ids, rows, cohort


def write_dvh_csv(path, curves: Sequence[DVHCurve]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["structure", "dose_bin", "volume_fraction"])
        for curve in curves:
            for edge, vol in zip(curve.edges, curve.volume):
                writer.writerow([curve.structure, repr(float(edge)), repr(float(vol))])
