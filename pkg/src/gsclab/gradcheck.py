"""Finite-difference verification of every differentiable op and loss.

Each component draws a random small problem, reduces the op's output to a
scalar through a random projection, and compares the analytic gradient with
central differences (step 1e-4, float64, shrunk near relu kinks).  The
error of one entry is ``|a - n| / max(|a|, |n|, 1e-3)``: relative above 1e-3 in magnitude,
effectively absolute (1e-6 at the default tolerance) near zero.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .relabel import IGNORED
from .segnet import SegNetwork

STEP = 1e-4
MIN_STEP = 1e-7
FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale_ = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return np.abs(analytic - numeric) / scale_


def _probe(f: Callable[[], float]) -> tuple[float, list]:
    with ad.branch_trace() as branches:
        value = f()
    return value, branches


def numeric_grad(f: Callable[[], float], array: np.ndarray, coords=None, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` (perturbed in place).

    A difference is only trusted when both probes stay on the same smooth
    piece as the unperturbed point (same relu/clamp branches).  Otherwise
    the step shrinks by 10x down to ``MIN_STEP``, after which the one-sided
    difference on the unbroken side is used.
    """
    flat = array.reshape(-1)
    out = np.zeros(flat.shape)
    f0, base = _probe(f)
    for i in (range(flat.size) if coords is None else coords):
        keep = flat[i]
        h = step
        while True:
            flat[i] = keep + h
            up, b_up = _probe(f)
            flat[i] = keep - h
            down, b_down = _probe(f)
            flat[i] = keep
            same_up, same_down = b_up == base, b_down == base
            if same_up and same_down:
                out[i] = (up - down) / (2 * h)
            elif h / 10 >= MIN_STEP:
                h /= 10
                continue
            elif same_up:
                out[i] = (up - f0) / h
            elif same_down:
                out[i] = (f0 - down) / h
            else:
                out[i] = (up - down) / (2 * h)
            break
    return out.reshape(array.shape)


def check(build: Callable[[], ad.Tensor], inputs: list[ad.Tensor], n_coords: int | None = None,
          rng: np.random.Generator | None = None) -> float:
    """Worst entry error of d build() / d inputs; optionally on sampled coordinates."""
    analytic = ad.grad(build(), inputs)

    def value() -> float:
        with ad.no_grad():
            return build().item()

    worst = 0.0
    for t, a in zip(inputs, analytic):
        coords = None
        if n_coords is not None and t.size > n_coords:
            coords = rng.choice(t.size, size=n_coords, replace=False)
        n = numeric_grad(value, t.data, coords)
        err = relative_error(a.reshape(-1), n.reshape(-1))
        if coords is not None:
            err = err[coords]
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> ad.Tensor:
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, gap=0.05) -> ad.Tensor:
    x = rng.uniform(gap, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.Tensor(x, requires_grad=True, dtype=np.float64)


def _project(out: ad.Tensor, proj: np.ndarray) -> ad.Tensor:
    return ad.reduce_sum(ad.mul(out, proj))


def _shape(rng) -> tuple[int, int, int, int]:
    return (int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(3, 6)), int(rng.integers(3, 6)))


def _probs_problem(rng):
    shape = _shape(rng)
    logits = _leaf(rng, shape, -2, 2)
    labels = rng.integers(0, shape[1], size=(shape[0],) + shape[2:])
    labels[rng.random(labels.shape) < 0.2] = IGNORED
    return shape, logits, labels


# each trial returns (loss builder, inputs to differentiate)


def _t_unary(op):
    def trial(rng):
        shape = _shape(rng)
        if op is ad.relu:
            x = _away_from_zero(rng, shape)
        elif op in (ad.log, ad.sqrt):
            x = _leaf(rng, shape, 0.2, 2.0)
        else:
            x = _leaf(rng, shape, -2, 2)
        proj = rng.normal(size=shape)
        return (lambda: _project(op(x), proj)), [x]
    return trial


def _t_binary(op):
    def trial(rng):
        shape = _shape(rng)
        a = _leaf(rng, shape)
        b = _leaf(rng, (1, shape[1], 1, shape[3]))  # exercises broadcasting
        proj = rng.normal(size=shape)
        return (lambda: _project(op(a, b), proj)), [a, b]
    return trial


def _t_scale(rng):
    shape = _shape(rng)
    x = _leaf(rng, shape)
    c = float(rng.normal())
    proj = rng.normal(size=shape)
    return (lambda: _project(ad.scale(x, c), proj)), [x]


def _t_conv(rng):
    n, cin, h, w = _shape(rng)
    k = int(rng.choice([1, 3]))
    cout = int(rng.integers(1, 4))
    x = _leaf(rng, (n, cin, h, w))
    kern = _leaf(rng, (cout, cin, k, k))
    bias = _leaf(rng, (cout,))
    pad = k // 2
    proj = rng.normal(size=(n, cout, h, w))
    return (lambda: _project(ad.conv2d(x, kern, bias, padding=pad), proj)), [x, kern, bias]


def _t_softmax(rng):
    shape = _shape(rng)
    x = _leaf(rng, shape, -3, 3)
    proj = rng.normal(size=shape)
    return (lambda: _project(ad.softmax(x, axis=1), proj)), [x]


def _t_reduce(op):
    def trial(rng):
        shape = _shape(rng)
        x = _leaf(rng, shape)
        axis = int(rng.integers(0, 4))
        out_shape = shape[:axis] + shape[axis + 1:]
        proj = rng.normal(size=out_shape)
        return (lambda: _project(op(x, axis), proj)), [x]
    return trial


def _t_reshape(rng):
    shape = _shape(rng)
    x = _leaf(rng, shape)
    proj = rng.normal(size=(shape[0], -1) if False else (shape[0], int(np.prod(shape[1:]))))
    sl = (slice(None), slice(0, 1))
    proj2 = rng.normal(size=(shape[0], 1) + shape[2:])
    return (lambda: ad.add(_project(ad.reshape(x, proj.shape), proj),
                           _project(ad.getitem(x, sl), proj2))), [x]


def _t_ce(rng):
    _, logits, labels = _probs_problem(rng)
    return (lambda: losses.ce_loss(ad.softmax(logits), labels)), [logits]


def _t_sg(rng):
    shape, logits, labels = _probs_problem(rng)
    psi = rng.uniform(0, 3, size=labels.shape)
    return (lambda: losses.sg_loss(ad.softmax(logits), labels, psi)), [logits]


def _t_sr(rng):
    shape = _shape(rng)
    logits = _leaf(rng, shape, -2, 2)
    soft = rng.uniform(0, 1, size=shape)
    return (lambda: losses.sr_loss(ad.softmax(logits), soft)), [logits]


def _t_sc(rng):
    shape = _shape(rng)
    logits = _leaf(rng, shape, -2, 2)
    return (lambda: losses.sc_loss(ad.softmax(logits))), [logits]


def _t_pd(rng):
    n = int(rng.integers(1, 3))
    layers = int(rng.integers(1, 3))
    news, olds = [], []
    for _ in range(layers):
        shape = (n, int(rng.integers(1, 3)), int(rng.integers(4, 7)), int(rng.integers(4, 7)))
        news.append(_leaf(rng, shape))
        olds.append(rng.uniform(-1, 1, size=shape))
    return (lambda: losses.pd_loss(news, olds)), news


def toy_problem(rng, channels=(4, 4, 4), size: int = 8, batch: int = 2):
    """Old/new networks on a 2-class 8x8 toy with every GSC input fixed."""
    base = SegNetwork(1, channels=channels, dtype=np.float64, seed=int(rng.integers(1 << 31)))
    for p in base.parameters():
        p.data += rng.normal(0, 0.05, size=p.shape)
    base.steps_trained = 1
    old = base.snapshot()
    net = old.restore(seed=int(rng.integers(1 << 31)))
    net.expand_head(1)
    for p in net.parameters():
        p.data += rng.normal(0, 0.05, size=p.shape)
    images = rng.uniform(0, 1, size=(batch, 3, size, size))
    old_out = old.forward(images)
    gt = rng.integers(0, 3, size=(batch, size, size))
    gt[gt == 1] = 0  # visible labels: background or the new class (channel 2)
    pseudo = gt.copy()
    bg = gt == 0
    pseudo[bg] = rng.choice([0, 1, IGNORED], size=int(bg.sum()))
    psi = rng.uniform(0.2, 2.0, size=gt.shape)
    soft = losses.build_soft_labels(gt, old_out.logits.data, net.n_outputs)
    old_acts = [t.data for t in old_out.intermediate]
    weights = losses.LossWeights()

    def build():
        out = net.forward(images)
        probs = ad.softmax(out.logits)
        comps = losses.LossComponents(
            sg=losses.sg_loss(probs, pseudo, psi),
            sr=losses.sr_loss(probs, soft),
            sc=losses.sc_loss(probs),
            pd=losses.pd_loss(out.intermediate, old_acts),
        )
        return losses.total_loss(comps, weights)

    return build, net.parameters()


def _t_total(rng):
    return toy_problem(rng)


COMPONENTS: dict[str, Callable] = {
    "conv2d": _t_conv,
    "relu": _t_unary(ad.relu),
    "sigmoid": _t_unary(lambda x: ad.sigmoid(x)),
    "log": _t_unary(ad.log),
    "exp": _t_unary(ad.exp),
    "sqrt": _t_unary(ad.sqrt),
    "add": _t_binary(ad.add),
    "sub": _t_binary(ad.sub),
    "mul": _t_binary(ad.mul),
    "scale": _t_scale,
    "softmax": _t_softmax,
    "reduce_sum": _t_reduce(ad.reduce_sum),
    "reduce_mean": _t_reduce(ad.reduce_mean),
    "pool_avg": _t_reduce(ad.pool_avg),
    "reshape_getitem": _t_reshape,
    "L_ce": _t_ce,
    "L_sg": _t_sg,
    "L_sr": _t_sr,
    "L_sc": _t_sc,
    "L_pd": _t_pd,
    "L_total": _t_total,
}
# sampled coordinates per input for the network-sized composite
COMPOSITE_COORDS = 8


def run_suite(trials: int = 50, seed: int = 0, components=None) -> dict[str, float]:
    """Worst error per component over ``trials`` random problems."""
    if trials < 1:
        raise ad.ContractViolation("trials must be >= 1")
    names = list(COMPONENTS) if components is None else list(components)
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    worst = {}
    try:
        for name in names:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            w = 0.0
            for _ in range(trials):
                build, inputs = COMPONENTS[name](rng)
                n_coords = COMPOSITE_COORDS if name == "L_total" else None
                w = max(w, check(build, inputs, n_coords, rng))
            worst[name] = w
    finally:
        ad.set_default_dtype(prev)
    return worst


@contextlib.contextmanager
def inject_fault(kind: str):
    """Temporarily break an op's backward pass (mutation canary)."""
    if kind != "sigmoid-sign":
        raise ad.ContractViolation(f"unknown fault {kind!r}")
    original = ad.sigmoid

    def broken(a):
        a = ad.as_tensor(a)
        out = ad._sigmoid(a.data)
        return ad._result(out, (a,), lambda g: (-g * out * (1 - out),), "sigmoid")

    ad.sigmoid = broken
    try:
        yield
    finally:
        ad.sigmoid = original
