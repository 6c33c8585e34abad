"""Adam, the constant-then-linear-decay schedule, and the two training stages.

Stage 1 trains Agg on paired source/target batches. Stage 2 freezes Agg,
copies it into Infer, and fine-tunes Infer on the target domain with the
distillation term anchored to Agg's target prediction.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import networks
from .errors import ConfigError, ContractError
from .losses import (
    AggLossReport,
    InferLossReport,
    LossWeights,
    agg_total,
    bridge_loss,
    distillation_loss,
    domain_l1,
    infer_total,
    write_history_csv,
)
from .networks import AggNetwork, InferNetwork, ModelConfig, agg_forward, build_infer_from_agg, infer_forward
from .phantom import Case
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if any(g is None for g in grads):
        raise ContractError("adam_step: a parameter has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} does not mirror parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], **kwargs):
        self.params = list(params)
        self.state = AdamState(**kwargs)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    base_lr: float
    constant_epochs: int = 200
    total_epochs: int = 300

    @classmethod
    def compressed(cls, base_lr: float, epochs: int) -> "Schedule":
        """Same shape as the 200/300 schedule: constant for 2/3 of the run, then linear to 0."""
        return cls(base_lr, constant_epochs=(2 * epochs) // 3, total_epochs=epochs)


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.constant_epochs:
        return schedule.base_lr
    decay = schedule.total_epochs - schedule.constant_epochs
    return schedule.base_lr * (schedule.total_epochs - epoch) / decay


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    head_channels: int = 16
    epochs: int = 30
    batch_size: int = 4
    lam: float = 0.5
    alpha: float = 0.4
    beta: float = 0.7
    gamma: float = 0.4
    lr_agg: float = 5e-4
    lr_infer: float = 1e-4
    n_source: int = 40
    n_target: int = 12
    n_heldout: int = 12
    use_mca: bool = True
    use_brd: bool = True
    init_from_agg: bool = True
    use_dtl: bool = True
    checkpoint_every: int = 0  # 0 = final checkpoint only
    source_dir: str = ""
    target_dir: str = ""
    heldout_dir: str = ""
    agg_checkpoint: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        try:
            self.weights()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def model(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            ffn_mult=self.ffn_mult,
            head_channels=self.head_channels,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={int(value) if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config(text: str) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read())


# -- batching -------------------------------------------------------------------

def steps_per_epoch(n_a: int, n_b: int, batch_size: int) -> int:
    return math.ceil(max(n_a, n_b) / batch_size)


def _index_stream(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenated fresh permutations of ``range(n)``, truncated to ``length``."""
    chunks, total = [], 0
    while total < length:
        chunks.append(rng.permutation(n))
        total += n
    return np.concatenate(chunks)[:length]


def paired_batches(n_src: int, n_tgt: int, batch_size: int, seed: int, epoch: int):
    """Yield (source indices, target indices); the shorter domain cycles."""
    longest = max(n_src, n_tgt)
    src = _index_stream(n_src, longest, np.random.default_rng([seed, epoch, 0]))
    tgt = _index_stream(n_tgt, longest, np.random.default_rng([seed, epoch, 1]))
    for start in range(0, longest, batch_size):
        yield src[start : start + batch_size], tgt[start : start + batch_size]


def single_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 1]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def stack_inputs(cases: Sequence[Case], idx) -> Tensor:
    return Tensor(np.stack([cases[i].inputs() for i in idx]))


def stack_doses(cases: Sequence[Case], idx) -> Tensor:
    return Tensor(np.stack([cases[i].dose for i in idx]))


# -- stages ---------------------------------------------------------------------

def _write_outputs(net, history, out_dir: str, tag: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_history_csv(os.path.join(out_dir, f"{tag}_loss.csv"), history)
    networks.save_checkpoint(net, os.path.join(out_dir, f"{tag}_checkpoint"))


def train_agg(cfg: TrainConfig, src: Sequence[Case], tgt: Sequence[Case], out_dir: str | None = None):
    """Stage 1. Returns ``(AggNetwork, list[AggLossReport])``."""
    if not src or not tgt:
        raise ConfigError("train_agg needs non-empty source and target datasets")
    w = cfg.weights()
    use_brd = cfg.use_brd and cfg.use_mca
    net = AggNetwork(cfg.model(), seed=cfg.seed, use_mca=cfg.use_mca)
    net.train()
    opt = Adam(net.parameters())
    schedule = Schedule.compressed(cfg.lr_agg, cfg.epochs)
    history: list[AggLossReport] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        for s_idx, t_idx in paired_batches(len(src), len(tgt), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            y_s, y_t, blocks = agg_forward(net, stack_inputs(src, s_idx), stack_inputs(tgt, t_idx))
            brd = [bridge_loss(b, w.lam) for b in blocks] if use_brd else []
            l_s = domain_l1(y_s, stack_doses(src, s_idx))
            l_t = domain_l1(y_t, stack_doses(tgt, t_idx))
            total = agg_total(brd, l_s, l_t, w)
            total.backward()
            opt.step(lr)
            brd_values = tuple(b.item() for b in brd) if brd else (0.0, 0.0, 0.0)
            history.append(AggLossReport(len(history), brd_values, l_s.item(), l_t.item(), total.item()))
        log.info("agg epoch %d lr=%.3g l_total=%.5f", epoch, lr, history[-1].l_total)
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            networks.save_checkpoint(net, os.path.join(out_dir, f"agg_checkpoint_epoch{epoch + 1:03d}"))
    if out_dir:
        _write_outputs(net, history, out_dir, "agg")
    return net, history


def teacher_prediction(agg: AggNetwork, x_t: Tensor) -> Tensor:
    """Frozen Agg target output; the target batch is fed to both token paths."""
    was_training = agg.training
    agg.eval()
    with no_grad():
        _, y_t, _ = agg_forward(agg, x_t, x_t)
    agg.train(was_training)
    return y_t


def train_infer(cfg: TrainConfig, agg: AggNetwork | None, tgt: Sequence[Case], out_dir: str | None = None):
    """Stage 2. Returns ``(InferNetwork, list[InferLossReport])``; ``agg`` is left untouched."""
    if not tgt:
        raise ConfigError("train_infer needs a non-empty target dataset")
    use_dtl = cfg.use_dtl and cfg.gamma > 0
    if (cfg.init_from_agg or use_dtl) and agg is None:
        raise ConfigError("train_infer needs a trained Agg for initialization or distillation")
    w = cfg.weights() if use_dtl else replace(cfg.weights(), gamma=0.0)
    if cfg.init_from_agg:
        net = build_infer_from_agg(agg)
    else:
        net = InferNetwork(cfg.model(), seed=cfg.seed)
    net.train()
    opt = Adam(net.parameters())
    schedule = Schedule.compressed(cfg.lr_infer, cfg.epochs)
    history: list[InferLossReport] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        for idx in single_batches(len(tgt), cfg.batch_size, cfg.seed, epoch):
            x_t = stack_inputs(tgt, idx)
            opt.zero_grad()
            y_i = infer_forward(net, x_t)
            l_t = domain_l1(y_i, stack_doses(tgt, idx))
            l_dtl = distillation_loss(teacher_prediction(agg, x_t), y_i) if use_dtl else Tensor(0.0)
            total = infer_total(l_t, l_dtl, w)
            total.backward()
            opt.step(lr)
            history.append(InferLossReport(len(history), l_t.item(), l_dtl.item(), total.item()))
        log.info("infer epoch %d lr=%.3g l_total=%.5f", epoch, lr, history[-1].l_total)
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            networks.save_checkpoint(net, os.path.join(out_dir, f"infer_checkpoint_epoch{epoch + 1:03d}"))
    if out_dir:
        _write_outputs(net, history, out_dir, "infer")
    return net, history


def epoch_means(history: Sequence, per_epoch: int) -> list[float]:
    totals = [r.l_total for r in history]
    return [float(np.mean(totals[i : i + per_epoch])) for i in range(0, len(totals), per_epoch)]
