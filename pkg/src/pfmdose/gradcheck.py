"""Central finite-difference checks of the analytic gradients.

:func:`finite_difference_check` compares ``x.grad`` after ``f(x).backward()``
against ``(f(x + h e_i) - f(x - h e_i)) / 2h`` coordinate by coordinate.
:func:`run_suite` applies it to every op family and to both training
objectives; the ``gradcheck`` CLI command prints its report.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import attention, losses, networks, ops
from .tensor import Tensor, no_grad

OP_TOL = 1e-4
OBJECTIVE_TOL = 1e-3


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over checked coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``x`` must be a leaf with ``requires_grad``; ``f`` may close over other
    leaves (their grads are touched but not inspected). With ``max_coords``,
    a seeded random subset of coordinates is checked.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not x.requires_grad:
        raise ValueError("x must require grad")
    x.zero_grad()
    f(x).backward()
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False))
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = f(x).item()
            flat[i] = orig - h
            minus = f(x).item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _leaf(rng, shape, low=-2.0, high=2.0, away_from_zero=False) -> Tensor:
    data = rng.uniform(low, high, size=shape)
    if away_from_zero:
        data = np.where(np.abs(data) < 0.05, np.sign(data + 1e-12) * 0.05, data)
    return Tensor(data, requires_grad=True)


def _weighted(rng, fn):
    """Scalarize a tensor-valued op with a fixed random weighting."""
    cache = {}

    def loss(*args):
        y = fn(*args)
        if "w" not in cache:
            cache["w"] = rng.uniform(-1.0, 1.0, size=y.shape)
        return ops.sum(y * cache["w"])

    return loss


def _check_inputs(name, fn, inputs: Sequence[Tensor], rng, tol=OP_TOL) -> list[CheckResult]:
    """Check the gradient of ``sum(w * fn(*inputs))`` w.r.t. each input separately."""
    loss = _weighted(rng, fn)
    results = []
    for k, target in enumerate(inputs):
        def f(_x, _k=k):
            return loss(*inputs)

        results.append(CheckResult(f"{name}[arg{k}]", finite_difference_check(f, target), tol))
    return results


def _small_model() -> networks.ModelConfig:
    return networks.ModelConfig(image_size=16, patch_size=8, embed_dim=16, heads=2, ffn_mult=2, head_channels=4)


def _batch(rng, n=2, size=16):
    x = rng.uniform(0.0, 1.0, size=(n, 3, size, size))
    y = rng.uniform(0.05, 0.95, size=(n, 1, size, size))
    return Tensor(x), Tensor(y)


def _check_objective(name, net, loss_fn, max_coords, seed) -> CheckResult:
    worst = 0.0
    for i, (_, p) in enumerate(net.named_parameters()):
        worst = max(worst, finite_difference_check(lambda _p: loss_fn(), p, max_coords=max_coords, seed=seed + i))
    return CheckResult(name, worst, OBJECTIVE_TOL)


def agg_objective_check(seed: int = 0, max_coords: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = networks.AggNetwork(_small_model(), seed=seed)
    xs, ys = _batch(rng)
    xt, yt = _batch(rng)
    w = losses.LossWeights()

    def loss_fn():
        y_s, y_t, blocks = networks.agg_forward(net, xs, xt)
        brd = [losses.bridge_loss(b, w.lam) for b in blocks]
        return losses.agg_total(brd, losses.domain_l1(y_s, ys), losses.domain_l1(y_t, yt), w)

    return _check_objective("agg_total_objective", net, loss_fn, max_coords, seed)


def infer_objective_check(seed: int = 0, max_coords: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed + 1)
    agg = networks.AggNetwork(_small_model(), seed=seed)
    net = networks.build_infer_from_agg(agg)
    # perturb the student so it differs from the teacher
    for p in net.parameters():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    xt, yt = _batch(rng)
    agg.eval()
    with no_grad():
        teacher = networks.agg_forward(agg, xt, xt)[1]
    w = losses.LossWeights()

    def loss_fn():
        y_i = networks.infer_forward(net, xt)
        return losses.infer_total(losses.domain_l1(y_i, yt), losses.distillation_loss(teacher, y_i), w)

    return _check_objective("infer_total_objective", net, loss_fn, max_coords, seed)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    L = lambda *s, **kw: _leaf(rng, s, **kw)  # noqa: E731
    results: list[CheckResult] = []
    results += _check_inputs("add", ops.add, [L(3, 4), L(4)], rng)
    results += _check_inputs("sub", ops.sub, [L(3, 4), L(3, 1)], rng)
    results += _check_inputs("mul", ops.mul, [L(3, 4), L(1, 4)], rng)
    results += _check_inputs("div", ops.div, [L(3, 4), L(3, 4, low=0.5, high=2.0)], rng)
    results += _check_inputs("matmul", ops.matmul, [L(2, 3, 4), L(4, 5)], rng)
    results += _check_inputs("reshape_transpose", lambda a: ops.transpose(ops.reshape(a, (2, 6)), (1, 0)), [L(3, 4)], rng)
    results += _check_inputs("sum_mean", lambda a: ops.mean(a, axis=1) + ops.sum(a, axis=1), [L(3, 4)], rng)
    results += _check_inputs("abs", ops.abs, [L(3, 4, away_from_zero=True)], rng)
    results += _check_inputs("sqrt", ops.sqrt, [L(3, 4, low=0.2, high=2.0)], rng)
    results += _check_inputs("euclidean_norm", lambda a: ops.euclidean_norm(a, axis=(1, 2)), [L(2, 3, 4)], rng)
    results += _check_inputs("relu", ops.relu, [L(3, 4, away_from_zero=True)], rng)
    results += _check_inputs("gelu", ops.gelu, [L(3, 4)], rng)
    results += _check_inputs("sigmoid", ops.sigmoid, [L(3, 4)], rng)
    results += _check_inputs("softmax", ops.softmax_rows, [L(4, 5)], rng)
    results += _check_inputs("layer_norm", ops.layer_norm, [L(2, 3, 6), L(6), L(6)], rng)
    for training in (True, False):
        rm, rv = rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 1.5, 3)

        def bn(x, g, b, _t=training, _rm=rm, _rv=rv):
            return ops.batch_norm2d(x, g, b, _rm.copy(), _rv.copy(), _t)

        tag = "train" if training else "eval"
        results += _check_inputs(f"batch_norm2d_{tag}", bn, [L(2, 3, 4, 4), L(3), L(3)], rng)
    results += _check_inputs("conv3x3", ops.conv3x3, [L(2, 2, 5, 6), L(3, 2, 3, 3), L(3)], rng)

    embedder = attention.PatchEmbedder(16, patch_size=8, in_channels=3, embed_dim=8, rng=rng)
    results += _check_inputs("embed_patches", lambda x: attention.embed_patches(x, embedder), [L(2, 3, 16, 16)], rng)
    x_img = Tensor(rng_fixed(seed, (2, 3, 16, 16)))
    embed_loss = _weighted(rng, lambda: attention.embed_patches(x_img, embedder))
    for name, p in embedder.named_parameters():
        results.append(CheckResult(f"embed_patches[{name}]", finite_difference_check(_closure(embed_loss), p), OP_TOL))

    block = attention.PFMBlock(embed_dim=8, heads=2, ffn_mult=2, rng=rng)
    q, kv = L(2, 4, 8), L(2, 4, 8)
    results += _check_inputs("msa", lambda t: attention.msa(t, block), [q], rng)
    results += _check_inputs("mca", lambda a, b: attention.mca(a, b, block), [q, kv], rng)
    mca_loss = _weighted(rng, lambda: attention.mca(q, kv, block))
    worst = max(finite_difference_check(_closure(mca_loss), p) for p in block.parameters())
    results.append(CheckResult("mca[block parameters]", worst, OP_TOL))

    def brd(a, b, c):
        return losses.bridge_loss(attention.BranchOutputs(a, b, c), 0.5)

    results += _check_inputs("bridge_loss", brd, [L(2, 4, 8), L(2, 4, 8), L(2, 4, 8)], rng)
    results += _check_inputs("domain_l1", lambda a: losses.domain_l1(a, Tensor(rng_fixed(seed + 1, (2, 1, 4, 4)))), [L(2, 1, 4, 4)], rng)
    results += _check_inputs(
        "distillation_loss", lambda a: losses.distillation_loss(Tensor(rng_fixed(seed + 2, (2, 1, 4, 4))), a), [L(2, 1, 4, 4)], rng
    )
    return results


def rng_fixed(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed + 12345).uniform(-1.0, 1.0, size=shape)


def _closure(loss):
    return lambda _x: loss()


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [agg_objective_check(seed), infer_objective_check(seed)]


def op_family(result: CheckResult) -> str:
    return result.name.split("[", 1)[0]
