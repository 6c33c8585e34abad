"""Ablation harness mirroring the Agg/Infer component study.

Rows:

=====  ======================================================
a      Agg with self-attention branches only (no MCA, no bridge loss)
b      a + polymerized (cross-attention) branch
c      b + bridge loss
star   Infer trained from scratch with L1 only
d      Infer initialized from the row-c Agg, L1 only
e      d + distillation from the frozen row-c Agg
=====  ======================================================

Each row is scored on held-out target cases by the APE of the dosimetric
metrics and the mean L1 dose error.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dosimetry
from .errors import ConfigError
from .evaluation import EvalResult, evaluate_network
from .phantom import Case, builtin_spec, generate_dataset, load_dataset
from .training import TrainConfig, train_agg, train_infer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    label: str
    stage: str
    use_mca: bool
    use_brd: bool
    init_from_agg: bool
    use_dtl: bool

    def config(self, base: TrainConfig) -> TrainConfig:
        return base.with_overrides(
            use_mca=self.use_mca, use_brd=self.use_brd, init_from_agg=self.init_from_agg, use_dtl=self.use_dtl
        )

    def snapshot(self, base: TrainConfig) -> str:
        return f"stage={self.stage}\n" + self.config(base).to_text()


ROWS = {
    "a": AblationRow("a", "agg", use_mca=False, use_brd=False, init_from_agg=False, use_dtl=False),
    "b": AblationRow("b", "agg", use_mca=True, use_brd=False, init_from_agg=False, use_dtl=False),
    "c": AblationRow("c", "agg", use_mca=True, use_brd=True, init_from_agg=False, use_dtl=False),
    "star": AblationRow("star", "infer", use_mca=True, use_brd=True, init_from_agg=False, use_dtl=False),
    "d": AblationRow("d", "infer", use_mca=True, use_brd=True, init_from_agg=True, use_dtl=False),
    "e": AblationRow("e", "infer", use_mca=True, use_brd=True, init_from_agg=True, use_dtl=True),
}
ROW_ORDER = ("a", "b", "c", "star", "d", "e")


def parse_rows(text: str) -> list[str]:
    labels = [t.strip() for t in text.split(",") if t.strip()]
    labels = ["star" if t == "*" else t for t in labels]
    unknown = [t for t in labels if t not in ROWS]
    if unknown or not labels:
        raise ValueError(f"unknown ablation rows {unknown}; choose from {','.join(ROW_ORDER)}")
    return labels


@dataclass
class Datasets:
    source: list[Case]
    target: list[Case]
    heldout: list[Case]


def prepare_data(cfg: TrainConfig, data_root: str | None = None) -> Datasets:
    """Load the configured dataset directories, generating any that are unset.

    Generated data is seeded from ``cfg.seed`` and written under ``data_root``.
    """
    dirs = {"source": cfg.source_dir, "target": cfg.target_dir, "heldout": cfg.heldout_dir}
    plan = {
        "source": ("source-like", cfg.n_source, 0),
        "target": ("target-like", cfg.n_target, 0),
        "heldout": ("target-like", cfg.n_heldout, 100_000),
    }
    loaded = {}
    for key, path in dirs.items():
        if not path:
            if data_root is None:
                raise ConfigError(f"{key}_dir not set and no output directory to generate it into")
            name, n, start = plan[key]
            base = builtin_spec(name, image_size=cfg.image_size)
            spec = builtin_spec(name, seed=base.seed + 1000 * cfg.seed, image_size=cfg.image_size)
            path = os.path.join(data_root, key)
            generate_dataset(spec, n, path, start=start)
        elif not os.path.isdir(path):
            raise ConfigError(f"{key}_dir {path!r} does not exist")
        loaded[key] = load_dataset(path)
    return Datasets(**loaded)


def fold_splits(n: int, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train indices, held-out indices) per fold over a seeded permutation."""
    if folds < 2 or folds > n:
        raise ConfigError(f"folds must be in [2, {n}], got {folds}")
    order = np.random.default_rng([seed, 7]).permutation(n)
    parts = np.array_split(order, folds)
    return [(np.sort(np.concatenate(parts[:k] + parts[k + 1 :])), np.sort(parts[k])) for k in range(folds)]


def run_rows(cfg: TrainConfig, labels: Sequence[str], data: Datasets, target: Sequence[Case], heldout: Sequence[Case]) -> dict[str, EvalResult]:
    """Train and evaluate each requested row on one data split; the row-c Agg is shared by d and e."""
    results: dict[str, EvalResult] = {}
    teacher = None
    for label in labels:
        row = ROWS[label]
        rcfg = row.config(cfg)
        log.info("ablation row %s (seed %d)", label, cfg.seed)
        if row.stage == "agg":
            net, _ = train_agg(rcfg, data.source, target)
        else:
            agg = None
            if row.init_from_agg or row.use_dtl:
                if teacher is None:
                    teacher, _ = train_agg(ROWS["c"].config(cfg), data.source, target)
                agg = teacher
            net, _ = train_infer(rcfg, agg, target)
        results[label] = evaluate_network(net, heldout)
    return results


@dataclass
class AblationSummary:
    labels: list[str]
    ape_rows: dict[str, list[dict[str, float]]]  # pooled per-case APE rows
    l1: dict[str, list[float]]  # per-seed mean held-out L1
    seeds: list[int]

    def median_l1(self, label: str) -> float:
        return float(np.median(self.l1[label]))


def run_ablation(cfg: TrainConfig, labels: Sequence[str], seeds: Sequence[int], out_dir: str, folds: int = 1) -> AblationSummary:
    os.makedirs(out_dir, exist_ok=True)
    ape_rows = {lb: [] for lb in labels}
    l1 = {lb: [] for lb in labels}
    for seed in seeds:
        scfg = cfg.with_overrides(seed=seed)
        data = prepare_data(scfg, os.path.join(out_dir, f"data_seed{seed}"))
        if folds > 1:
            per_fold = []
            for train_idx, held_idx in fold_splits(len(data.target), folds, seed):
                target = [data.target[i] for i in train_idx]
                held = [data.target[i] for i in held_idx]
                per_fold.append(run_rows(scfg, labels, data, target, held))
            for lb in labels:
                for res in per_fold:
                    ape_rows[lb].extend(res[lb].ape.per_case)
                l1[lb].append(float(np.mean([v for res in per_fold for v in res[lb].l1])))
        else:
            results = run_rows(scfg, labels, data, data.target, data.heldout)
            for lb in labels:
                ape_rows[lb].extend(results[lb].ape.per_case)
                l1[lb].append(results[lb].mean_l1)
    summary = AblationSummary(list(labels), ape_rows, l1, list(seeds))
    write_ablation_outputs(summary, cfg, out_dir)
    return summary


def write_ablation_outputs(summary: AblationSummary, cfg: TrainConfig, out_dir: str) -> dict[str, str]:
    paths = {
        "comparison": os.path.join(out_dir, "ablation.csv"),
        "l1": os.path.join(out_dir, "ablation_l1.csv"),
    }
    with open(paths["comparison"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", *dosimetry.COMPARISON_METRICS])
        for lb in summary.labels:
            stats = dosimetry.cohort_summary(summary.ape_rows[lb], dosimetry.COMPARISON_METRICS)
            writer.writerow([lb, *(dosimetry.format_mean_std(*stats[m]) for m in dosimetry.COMPARISON_METRICS)])
    with open(paths["l1"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "seed", "target_l1"])
        for lb in summary.labels:
            for seed, value in zip(summary.seeds, summary.l1[lb]):
                writer.writerow([lb, seed, repr(value)])
    snap_dir = os.path.join(out_dir, "configs")
    os.makedirs(snap_dir, exist_ok=True)
    for lb in summary.labels:
        with open(os.path.join(snap_dir, f"{lb}.txt"), "w") as fh:
            fh.write(ROWS[lb].snapshot(cfg))
    return paths
