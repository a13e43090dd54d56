"""Incremental training protocol: step 0, per-step snapshots, pseudo labels,
and SGD on the combined objective.  Also the FT, plain-distillation and
Joint reference methods.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .losses import (GradientStats, LossComponents, LossWeights, build_soft_labels, ce_loss,
                     gradient_measurement, pd_loss, sc_loss, sg_loss, sr_loss, step_aware_weights,
                     total_loss, update_gradient_stats)
from .metrics import confusion_matrix, forgetting_pace, grouped_miou, iou_per_class
from .relabel import (audit, coarse_labels, compute_prototypes, entropy_thresholds, plain_relabel,
                      relabel)
from .scenario import ScenarioSpec, build_step_dataset
from .segnet import ModelSnapshot, SegNetwork, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MethodOptions:
    uses_old_model: bool
    relabel: str | None      # "prototype", "plain" or None (train on visible GT)
    step_aware: bool
    soft_sharp: bool
    pooled: bool


METHODS = {
    "gsc": MethodOptions(True, "prototype", True, True, True),
    "gsc-no-sg": MethodOptions(True, "prototype", False, True, True),
    "gsc-no-srsc": MethodOptions(True, "prototype", True, False, True),
    "gsc-no-pr": MethodOptions(True, "plain", True, True, True),
    "plain": MethodOptions(True, "plain", False, False, True),
    "ft": MethodOptions(False, None, False, False, False),
}
ALL_METHODS = tuple(METHODS) + ("joint",)


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_step: int = 30
    epochs_step0: int | None = None
    batch_size: int = 8
    lr_step0: float = 1e-2
    lr_incremental: float = 1e-3
    lr_decay: float = 0.9
    momentum: float = 0.9
    nesterov: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dtype: str = "float32"
    channels: tuple[int, ...] = (16, 16, 16)
    head_init: str = "random"
    stats_mode: str = "ema"
    ema_beta: float = 0.9
    psi_max: float = 10.0
    unit_psi: bool = False
    temperature: float = 1.0
    soft_label_source: str = "log_odds"

    def __post_init__(self):
        if self.epochs_per_step < 1 or (self.epochs_step0 is not None and self.epochs_step0 < 1):
            raise ad.ContractViolation("epochs must be >= 1")
        if min(self.lr_step0, self.lr_incremental, self.lr_decay) <= 0 or self.batch_size < 1:
            raise ad.ContractViolation("rates and batch size must be positive")
        if not 0 <= self.momentum < 1:
            raise ad.ContractViolation("momentum must lie in [0, 1)")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    return lr0 * decay ** epoch


class SGD:
    """SGD with (Nesterov) momentum and no weight decay."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float, momentum: float = 0.9,
                 nesterov: bool = True):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        mu = self.momentum
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            v *= mu
            v += g
            update = g + mu * v if self.nesterov else v
            p.data -= (self.lr * update).astype(p.dtype, copy=False)


@dataclass
class StepLog:
    method: str
    step: int
    epochs: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        if not self.epochs:
            return
        columns = list(self.epochs[0])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in self.epochs:
                w.writerow([_fmt(row[c]) for c in columns])


def _fmt(x) -> str:
    if x is None:
        return "nan"
    if isinstance(x, (float, np.floating)):
        return f"{x:.6f}"
    return str(x)


# --------------------------------------------------------------- helpers


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GSC_THREADS", "1")))
    except ValueError:
        return 1


def _batches(n: int, batch_size: int, seed: int, step: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, step, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class Inference:
    logits: np.ndarray
    features: np.ndarray
    intermediate: list[np.ndarray]


def infer(model: SegNetwork | ModelSnapshot, images: np.ndarray, batch_size: int = 16) -> Inference:
    """Forward the whole array without recording; may fan out over GSC_THREADS."""
    chunks = [slice(i, i + batch_size) for i in range(0, len(images), batch_size)]

    def run(sl):
        with ad.no_grad():
            out = model.forward(images[sl])
        return out.logits.data, out.features.data, [t.data for t in out.intermediate]

    n_threads = min(_threads(), len(chunks))
    if n_threads > 1 and isinstance(model, ModelSnapshot):
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    return Inference(
        logits=np.concatenate([p[0] for p in parts]),
        features=np.concatenate([p[1] for p in parts]),
        intermediate=[np.concatenate([p[2][i] for p in parts]) for i in range(len(parts[0][2]))],
    )


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return np.argmax(infer(model, images, batch_size).logits, axis=1)


def evaluate(model, images: np.ndarray, gt_channels: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Per-channel IoU of ``model`` against channel-space ground truth."""
    n_classes = n_classes or model.n_outputs
    cm = confusion_matrix(gt_channels, predict(model, images), n_classes)
    return iou_per_class(cm)


def _check_finite(loss: ad.Tensor, method: str, step: int, epoch: int) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingDiverged(f"{method}: loss is not finite at step {step}, epoch {epoch}")


# ---------------------------------------------------------------- training


def _supervised(config: TrainConfig, net: SegNetwork, images: np.ndarray, labels: np.ndarray,
                epochs: int, lr0: float, method: str, step: int) -> StepLog:
    log = StepLog(method, step)
    opt = SGD(net.parameters(), lr0, config.momentum, config.nesterov)
    for epoch in range(epochs):
        opt.lr = learning_rate(lr0, config.lr_decay, epoch)
        total, count = 0.0, 0
        for idx in _batches(len(images), config.batch_size, config.seed, step, epoch):
            try:
                out = net.forward(images[idx])
                loss = ce_loss(ad.softmax(out.logits), labels[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{method}: {exc} at step {step}, epoch {epoch}") from exc
            _check_finite(loss, method, step, epoch)
            net.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        log.epochs.append({"epoch": epoch, "lr": opt.lr, "L_ce": total / count})
        logger.info("%s step %d epoch %d: ce=%.4f", method, step, epoch, total / count)
    return log


def train_step0(config: TrainConfig, images: np.ndarray, labels: np.ndarray,
                n_classes: int) -> tuple[SegNetwork, StepLog]:
    """Plain CE training of a fresh network on the first step's classes."""
    net = SegNetwork(n_classes, channels=config.channels, dtype=config.np_dtype,
                     seed=config.seed, head_init=config.head_init)
    epochs = config.epochs_step0 or config.epochs_per_step
    log = _supervised(config, net, images.astype(config.np_dtype, copy=False), labels,
                      epochs, config.lr_step0, "step0", 0)
    net.steps_trained = 1
    return net, log


def train_joint(config: TrainConfig, images: np.ndarray, labels: np.ndarray,
                n_classes: int) -> tuple[SegNetwork, StepLog]:
    """Upper bound: one network trained on every class at once."""
    net = SegNetwork(n_classes, channels=config.channels, dtype=config.np_dtype,
                     seed=config.seed, head_init=config.head_init)
    epochs = config.epochs_step0 or config.epochs_per_step
    log = _supervised(config, net, images.astype(config.np_dtype, copy=False), labels,
                      epochs, config.lr_step0, "joint", 0)
    net.steps_trained = 1
    return net, log


@dataclass
class StepContext:
    """What an incremental step derives from the frozen old model."""

    snapshot: ModelSnapshot | None
    old: Inference | None = None
    old_probs: np.ndarray | None = None
    prototypes: object = None
    thresholds: dict | None = None
    stats: GradientStats | None = None
    pseudo_labels: np.ndarray | None = None


def prepare_step(config: TrainConfig, snapshot: ModelSnapshot, images: np.ndarray,
                 labels: np.ndarray) -> StepContext:
    old = infer(snapshot, images)
    old_probs = _softmax(old.logits.astype(np.float64))
    coarse = coarse_labels(old.logits)
    return StepContext(
        snapshot=snapshot,
        old=old,
        old_probs=old_probs,
        prototypes=compute_prototypes(old.features, coarse, labels == 0),
        thresholds=entropy_thresholds(old_probs, coarse),
        stats=GradientStats(len(snapshot.step_boundaries), config.stats_mode, config.ema_beta),
    )


def audit_pseudo_labels(spec: ScenarioSpec, snapshot: ModelSnapshot, step: int,
                        temperature: float = 1.0):
    """Pseudo labels the snapshot would give step ``step``'s training data.

    Returns ``(dataset, maps, rows)`` where ``maps`` holds the ``relabel``
    and ``plain`` label maps in channel space and ``rows`` their audit
    counts against ``gt_full``.
    """
    if list(snapshot.step_boundaries) != spec.step_boundaries[:step]:
        raise ad.ContractViolation(f"snapshot heads {list(snapshot.step_boundaries)} do not fit step {step} "
                                   f"of a scenario with boundaries {spec.step_boundaries}")
    ds = build_step_dataset(spec, step, dtype=snapshot.dtype)
    vis, full = spec.to_channels(ds.gt_visible), spec.to_channels(ds.gt_full)
    old = infer(snapshot, ds.images)
    probs = _softmax(old.logits.astype(np.float64))
    coarse = coarse_labels(old.logits)
    protos = compute_prototypes(old.features, coarse, vis == 0)
    tau = entropy_thresholds(probs, coarse)
    maps = {
        "relabel": relabel(vis, probs, old.features, protos, tau, temperature),
        "plain": plain_relabel(vis, probs, tau),
    }
    rows = [dict(method=m, **audit(p, vis, full, snapshot.n_outputs)) for m, p in maps.items()]
    return ds, maps, rows


def train_incremental_step(config: TrainConfig, net: SegNetwork, images: np.ndarray,
                           labels: np.ndarray, n_new: int, method: str = "gsc",
                           ) -> tuple[SegNetwork, StepLog, StepContext]:
    """Learn ``n_new`` classes from ``labels`` (channel space, new classes on top).

    For the GSC family the order is: snapshot, coarse labels, prototypes,
    entropy thresholds, then per epoch a fresh relabel and per batch the
    gradient statistics, step-aware weights and one SGD update on the
    combined loss.
    """
    if method not in METHODS:
        raise ad.ContractViolation(f"unknown method {method!r}")
    opts = METHODS[method]
    images = images.astype(config.np_dtype, copy=False)
    step = len(net.step_boundaries)
    ctx = StepContext(snapshot=None)
    if opts.uses_old_model:
        ctx = prepare_step(config, net.snapshot(), images, labels)
    net.expand_head(n_new)
    boundaries = net.step_boundaries
    width = net.n_outputs
    log = StepLog(method, step)
    opt = SGD(net.parameters(), config.lr_incremental, config.momentum, config.nesterov)
    w = config.weights
    for epoch in range(config.epochs_per_step):
        opt.lr = learning_rate(config.lr_incremental, config.lr_decay, epoch)
        if opts.relabel == "prototype":
            feats = infer(net, images).features
            targets = relabel(labels, ctx.old_probs, feats, ctx.prototypes, ctx.thresholds,
                              config.temperature)
        elif opts.relabel == "plain":
            targets = plain_relabel(labels, ctx.old_probs, ctx.thresholds)
        else:
            targets = labels
        ctx.pseudo_labels = targets
        sums = {"L_sg": 0.0, "L_sr": 0.0, "L_sc": 0.0, "L_pd": 0.0, "total": 0.0}
        psi_sums = {k: [0.0, 0] for k in (ctx.stats.keys() if ctx.stats else [])}
        n_seen = 0
        for idx in _batches(len(images), config.batch_size, config.seed, step, epoch):
            tgt = targets[idx]
            try:
                out = net.forward(images[idx])
                probs = ad.softmax(out.logits)
                psi = None
                if opts.step_aware and not config.unit_psi:
                    g = gradient_measurement(ad._sigmoid(out.logits.data), tgt)
                    update_gradient_stats(ctx.stats, g, tgt, boundaries)
                    if epoch > 0:
                        psi = step_aware_weights(g, tgt, ctx.stats, boundaries, config.psi_max)
                        _accumulate_psi(psi_sums, psi, tgt, boundaries)
                comps = LossComponents(sg_loss(probs, tgt, psi))
                if opts.soft_sharp:
                    soft = build_soft_labels(labels[idx], ctx.old.logits[idx], width,
                                             config.soft_label_source)
                    comps.sr = sr_loss(probs, soft)
                    comps.sc = sc_loss(probs)
                if opts.pooled:
                    comps.pd = pd_loss(out.intermediate, [a[idx] for a in ctx.old.intermediate])
                loss = total_loss(comps, w)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{method}: {exc} at step {step}, epoch {epoch}") from exc
            _check_finite(loss, method, step, epoch)
            net.zero_grad()
            ad.backward(loss)
            opt.step()
            vals = comps.values()
            for key, name in (("sg", "L_sg"), ("sr", "L_sr"), ("sc", "L_sc"), ("pd", "L_pd")):
                sums[name] += vals[key] * len(idx)
            sums["total"] += loss.item() * len(idx)
            n_seen += len(idx)
        if ctx.stats is not None and ctx.stats.mode == "exact_epoch":
            ctx.stats.finalize()
        row = {"epoch": epoch, "lr": opt.lr}
        row.update({k: v / n_seen for k, v in sums.items()})
        for key, (s, n) in psi_sums.items():
            row[f"mean_psi_{key}"] = s / n if n else None
        log.epochs.append(row)
        logger.info("%s step %d epoch %d: total=%.4f", method, step, epoch, row["total"])
    net.steps_trained += 1
    return net, log, ctx


def _accumulate_psi(psi_sums: dict, psi: np.ndarray, labels: np.ndarray, boundaries) -> None:
    from .losses import _groups

    groups = _groups(labels, boundaries)
    for key in psi_sums:
        sel = groups == (-1 if key == "bg" else key)
        psi_sums[key][0] += float(psi[sel].sum())
        psi_sums[key][1] += int(sel.sum())


# ------------------------------------------------------------- scenarios


@dataclass
class StepResult:
    method: str
    step: int
    ious: np.ndarray
    grouped: dict


@dataclass
class ScenarioReport:
    spec: ScenarioSpec
    config: TrainConfig
    results: list[StepResult] = field(default_factory=list)
    logs: list[StepLog] = field(default_factory=list)

    def rows(self, method: str) -> list[StepResult]:
        return [r for r in self.results if r.method == method]

    def final(self, method: str) -> StepResult:
        return self.rows(method)[-1]

    def methods(self) -> list[str]:
        seen = []
        for r in self.results:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def forgetting(self, method: str) -> np.ndarray:
        rows = self.rows(method)
        return forgetting_pace(rows[0].ious, rows[-1].ious)

    def channel_class_ids(self) -> list[int]:
        return [0] + list(self.spec.foreground_ids)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ids = self.channel_class_ids()
        with open(out / "per_class.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "step", "class_id", "iou"])
            for r in self.results:
                for ch, iou in enumerate(r.ious):
                    w.writerow([r.method, r.step, ids[ch], _fmt(None if np.isnan(iou) else float(iou))])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "step", "miou_initial", "miou_incremental", "miou_all"])
            for r in self.results:
                g = r.grouped
                w.writerow([r.method, r.step, _fmt(g["initial"]), _fmt(g["incremental"]), _fmt(g["all"])])
        with open(out / "forgetting.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "class_id", "pace"])
            for method in self.methods():
                if len(self.rows(method)) < 2:
                    continue
                for ch, pace in enumerate(self.forgetting(method)):
                    if not np.isnan(pace):
                        w.writerow([method, ids[ch], _fmt(float(pace))])
        log_dir = out / "logs"
        log_dir.mkdir(exist_ok=True)
        for lg in self.logs:
            lg.write_csv(log_dir / f"losses_{lg.method}_step{lg.step}.csv")


def _result(method: str, step: int, model, test, spec: ScenarioSpec) -> StepResult:
    ious = evaluate(model, test.images, spec.to_channels(test.gt_full), spec.step_boundaries[step])
    return StepResult(method, step, ious, grouped_miou(ious, spec.step_boundaries))


def run_scenario(spec: ScenarioSpec, config: TrainConfig, methods: Sequence[str] = ("gsc", "ft"),
                 out_dir=None, step0: SegNetwork | ModelSnapshot | None = None) -> ScenarioReport:
    """Train step 0 once, then fork it for every incremental method.

    ``joint`` contributes one row at the final step.  Passing ``step0``
    reuses an already trained first-step model.
    """
    for m in methods:
        if m not in ALL_METHODS:
            raise ad.ContractViolation(f"unknown method {m!r}; choose from {ALL_METHODS}")
    dtype = config.np_dtype
    train = [build_step_dataset(spec, t, "train", dtype=dtype) for t in range(spec.n_steps)]
    tests = [build_step_dataset(spec, t, "test", dtype=dtype) for t in range(spec.n_steps)]
    report = ScenarioReport(spec, config)
    incremental = [m for m in methods if m != "joint"]
    if incremental:
        if step0 is None:
            net0, log0 = train_step0(config, train[0].images, spec.to_channels(train[0].gt_visible),
                                     len(spec.groups[0]))
            report.logs.append(log0)
            snap0 = net0.snapshot()
        else:
            snap0 = step0.snapshot() if isinstance(step0, SegNetwork) else step0
        if out_dir is not None:
            (Path(out_dir) / "checkpoints").mkdir(parents=True, exist_ok=True)
            save_checkpoint(snap0, Path(out_dir) / "checkpoints" / "step0.gsc")
        base = _result("step0", 0, snap0, tests[0], spec)
    for method in methods:
        if method == "joint":
            images = np.concatenate([d.images for d in train])
            labels = np.concatenate([spec.to_channels(d.gt_full) for d in train])
            net, log = train_joint(config, images, labels, len(spec.foreground_ids))
            report.logs.append(log)
            last = spec.n_steps - 1
            report.results.append(_result("joint", last, net, tests[last], spec))
            continue
        report.results.append(replace(base, method=method))
        net = snap0.restore(config.seed, config.head_init)
        for t in range(1, spec.n_steps):
            ds = train[t]
            net, log, _ = train_incremental_step(config, net, ds.images, spec.to_channels(ds.gt_visible),
                                                 len(spec.groups[t]), method)
            report.logs.append(log)
            report.results.append(_result(method, t, net, tests[t], spec))
            if out_dir is not None:
                save_checkpoint(net, Path(out_dir) / "checkpoints" / f"{method}_step{t}.gsc")
    if out_dir is not None:
        report.write(out_dir)
    return report
