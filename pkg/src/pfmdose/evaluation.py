"""Evaluate a trained network on a set of cases and export CSVs."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dosimetry
from .errors import ConfigError
from .networks import predict
from .phantom import Case
from .tensor import Tensor, no_grad


def predict_cases(net, cases: Sequence[Case], batch_size: int = 16) -> list[np.ndarray]:
    """Eval-mode predictions, one ``1 x H x W`` map per case."""
    size = net.config.image_size
    for case in cases:
        if case.dose.shape != (1, size, size):
            raise ConfigError(f"{case.id}: data is {case.dose.shape[1:]} but checkpoint expects {size}x{size}")
    was_training = net.training
    net.eval()
    out = []
    with no_grad():
        for start in range(0, len(cases), batch_size):
            chunk = cases[start : start + batch_size]
            y = predict(net, Tensor(np.stack([c.inputs() for c in chunk]))).data
            out.extend(y[i] for i in range(len(chunk)))
    net.train(was_training)
    return out


@dataclass
class EvalResult:
    ids: list[str]
    pred: list[dosimetry.DoseMetrics]
    true: list[dosimetry.DoseMetrics]
    ape: dosimetry.APEReport
    l1: list[float]
    dvh_pred: dict[str, list[dosimetry.DVHCurve]]
    dvh_true: dict[str, list[dosimetry.DVHCurve]]

    @property
    def mean_l1(self) -> float:
        return float(np.mean(self.l1))


def _curves(dose, case: Case) -> list[dosimetry.DVHCurve]:
    return [dosimetry.dvh(dose, case.ptv, "PTV"), dosimetry.dvh(dose, case.oars, "OARs")]


def evaluate_predictions(cases: Sequence[Case], preds: Sequence[np.ndarray]) -> EvalResult:
    ids = [c.id for c in cases]
    pred_m = [dosimetry.case_metrics(p, c.ptv, c.oars) for c, p in zip(cases, preds)]
    true_m = [dosimetry.case_metrics(c.dose, c.ptv, c.oars) for c in cases]
    return EvalResult(
        ids=ids,
        pred=pred_m,
        true=true_m,
        ape=dosimetry.ape_report(ids, pred_m, true_m),
        l1=[float(np.abs(p - c.dose).mean()) for c, p in zip(cases, preds)],
        dvh_pred={c.id: _curves(p, c) for c, p in zip(cases, preds)},
        dvh_true={c.id: _curves(c.dose, c) for c in cases},
    )


def evaluate_network(net, cases: Sequence[Case]) -> EvalResult:
    return evaluate_predictions(cases, predict_cases(net, cases))


def write_eval_outputs(result: EvalResult, out_dir) -> dict[str, str]:
    os.makedirs(os.path.join(out_dir, "dvh"), exist_ok=True)
    paths = {
        "metrics_pred": os.path.join(out_dir, "metrics_pred.csv"),
        "metrics_true": os.path.join(out_dir, "metrics_true.csv"),
        "ape": os.path.join(out_dir, "ape.csv"),
        "l1": os.path.join(out_dir, "l1.csv"),
    }
    dosimetry.write_metrics_csv(paths["metrics_pred"], result.ids, [m.as_dict() for m in result.pred])
    dosimetry.write_metrics_csv(paths["metrics_true"], result.ids, [m.as_dict() for m in result.true])
    dosimetry.write_metrics_csv(paths["ape"], result.ids, result.ape.per_case)
    with open(paths["l1"], "w") as fh:
        fh.write("case_id,l1\n")
        for cid, v in zip(result.ids, result.l1):
            fh.write(f"{cid},{v!r}\n")
    if result.ape.absolute_fallbacks:
        paths["ape_fallbacks"] = os.path.join(out_dir, "ape_fallbacks.csv")
        with open(paths["ape_fallbacks"], "w") as fh:
            fh.write("case_id,metric\n")
            fh.writelines(f"{cid},{name}\n" for cid, name in result.ape.absolute_fallbacks)
    for cid in result.ids:
        dosimetry.write_dvh_csv(os.path.join(out_dir, "dvh", f"{cid}_pred.csv"), result.dvh_pred[cid])
        dosimetry.write_dvh_csv(os.path.join(out_dir, "dvh", f"{cid}_true.csv"), result.dvh_true[cid])
    return paths
