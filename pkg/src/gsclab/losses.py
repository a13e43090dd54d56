"""Training objectives: weighted pseudo-label CE, soft/sharp distillation,
pooled-feature distillation and the gradient statistics behind the
step-aware pixel weights.

Probabilities passed to the losses are softmax outputs (``Tensor``); label
maps are channel-space integer arrays where :data:`IGNORED` marks pixels
excluded from a loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .relabel import IGNORED

PSI_MAX = 10.0


class AllIgnoredWarning(RuntimeWarning):
    """Every pixel of a batch was excluded from a loss."""


@dataclass(frozen=True)
class LossWeights:
    softness: float = 0.3   # lambda1, on the soft relation term
    sharpness: float = 0.1  # lambda2, on the self-entropy term
    pooled: float = 0.01    # lambda, on the pooled feature term

    def __post_init__(self):
        if min(self.softness, self.sharpness, self.pooled) < 0:
            raise ContractViolation("loss weights must be non-negative")


@dataclass
class LossComponents:
    sg: Tensor
    sr: Tensor | None = None
    sc: Tensor | None = None
    pd: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {k: (getattr(self, k).item() if getattr(self, k) is not None else 0.0)
                for k in ("sg", "sr", "sc", "pd")}


def _one_hot_weights(labels: np.ndarray, n_channels: int, pixel_weights: np.ndarray | None,
                     dtype) -> tuple[np.ndarray, int]:
    valid = labels != IGNORED
    count = int(valid.sum())
    target = np.zeros((labels.shape[0], n_channels) + labels.shape[1:], dtype=dtype)
    if count:
        if labels[valid].max() >= n_channels or labels[valid].min() < 0:
            raise ContractViolation("label outside the prediction's channel range")
        n_idx, *rest = np.nonzero(valid)
        w = 1.0 if pixel_weights is None else pixel_weights[valid]
        target[(n_idx, labels[valid], *rest)] = w
    return target, count


def ce_loss(probs: Tensor, targets: np.ndarray, ignore_mask: np.ndarray | None = None) -> Tensor:
    """Mean ``-log p[target]`` over counted pixels."""
    return sg_loss(probs, targets, None, ignore_mask)


def sg_loss(probs: Tensor, pseudo_labels: np.ndarray, psi: np.ndarray | None,
            ignore_mask: np.ndarray | None = None) -> Tensor:
    """Pixel-weighted CE; ``psi`` is a constant (no gradient flows into it)."""
    labels = np.asarray(pseudo_labels)
    if ignore_mask is not None:
        labels = np.where(ignore_mask, IGNORED, labels)
    if labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ContractViolation(f"labels {labels.shape} do not match probs {probs.shape}")
    if psi is not None and np.shape(psi) != labels.shape:
        raise ContractViolation("psi must have one weight per pixel")
    target, count = _one_hot_weights(labels, probs.shape[1], psi, probs.dtype)
    if count == 0:
        warnings.warn("all pixels ignored; loss defined as 0", AllIgnoredWarning, stacklevel=2)
        return ad.scale(ad.reduce_sum(probs), 0.0)
    logp = ad.log(probs, hi=1.0)
    return ad.scale(ad.reduce_sum(ad.mul(logp, target)), -1.0 / count)


def gradient_measurement(sigmoid_probs, pseudo_labels: np.ndarray) -> np.ndarray:
    """``p[true] - 1`` per pixel, from sigmoid outputs; 0 at IGNORED pixels."""
    p = sigmoid_probs.data if isinstance(sigmoid_probs, Tensor) else np.asarray(sigmoid_probs)
    labels = np.asarray(pseudo_labels)
    valid = labels != IGNORED
    idx = np.where(valid, labels, 0)
    picked = np.take_along_axis(p, idx[:, None], axis=1)[:, 0]
    return np.where(valid, picked - 1.0, 0.0)


def _groups(labels: np.ndarray, step_boundaries: Sequence[int]) -> np.ndarray:
    """Old-step index per pixel: -1 background, ``m`` for step-m classes,
    ``len(step_boundaries) - 1`` for the current step, -2 for IGNORED."""
    valid = labels != IGNORED
    step = np.searchsorted(np.asarray(step_boundaries), np.where(valid, labels, 0), side="right")
    step = np.where(labels == 0, -1, step)
    return np.where(valid, step, -2)


@dataclass
class GradientStats:
    """Running mean of ``|G|`` per old step and for background.

    ``exact_epoch`` accumulates sums during an epoch and publishes them on
    :meth:`finalize`; ``ema`` blends every batch mean in immediately.
    """

    n_old_steps: int
    mode: str = "ema"
    beta: float = 0.9
    means: dict = field(default_factory=dict)  # key: step index or "bg"
    _sums: dict = field(default_factory=dict, repr=False)
    _counts: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ("ema", "exact_epoch"):
            raise ContractViolation(f"unknown stats mode {self.mode!r}")
        if not 0 <= self.beta < 1:
            raise ContractViolation("beta must lie in [0, 1)")

    def keys(self) -> list:
        return ["bg"] + list(range(self.n_old_steps))

    def finalize(self) -> "GradientStats":
        if self.mode == "exact_epoch":
            self.means = {k: self._sums[k] / self._counts[k] for k in self._counts if self._counts[k]}
            self._sums, self._counts = {}, {}
        return self


def update_gradient_stats(stats: GradientStats, g_batch: np.ndarray, pseudo_labels: np.ndarray,
                          step_boundaries: Sequence[int]) -> GradientStats:
    groups = _groups(np.asarray(pseudo_labels), step_boundaries)
    mag = np.abs(np.asarray(g_batch, dtype=np.float64))
    for key in stats.keys():
        sel = groups == (-1 if key == "bg" else key)
        n = int(sel.sum())
        if n == 0:
            continue
        if stats.mode == "exact_epoch":
            stats._sums[key] = stats._sums.get(key, 0.0) + float(mag[sel].sum())
            stats._counts[key] = stats._counts.get(key, 0) + n
        else:
            batch_mean = float(mag[sel].mean())
            prev = stats.means.get(key)
            stats.means[key] = batch_mean if prev is None else stats.beta * prev + (1 - stats.beta) * batch_mean
    return stats


def step_aware_weights(g: np.ndarray, pseudo_labels: np.ndarray, stats: GradientStats,
                       step_boundaries: Sequence[int], psi_max: float = PSI_MAX) -> np.ndarray:
    """``|G| / mean`` for old-class and background pixels, 1 elsewhere."""
    groups = _groups(np.asarray(pseudo_labels), step_boundaries)
    mag = np.abs(np.asarray(g, dtype=np.float64))
    psi = np.ones(mag.shape)
    for key in stats.keys():
        mean = stats.means.get(key)
        if mean is None or mean <= 0:
            continue
        sel = groups == (-1 if key == "bg" else key)
        psi[sel] = mag[sel] / mean
    return np.clip(psi, 0.0, psi_max)


SOFT_SOURCES = ("log_odds", "raw_logits")


def build_soft_labels(gt_visible: np.ndarray, old_logits, n_channels: int,
                      source: str = "log_odds") -> np.ndarray:
    """Old channels from a sigmoid of the old model's outputs, new channels one-hot GT.

    ``raw_logits`` applies the sigmoid to the logits as they are.  Softmax
    training leaves a free per-pixel offset in those, so ``log_odds``
    (default) first turns each channel into its one-vs-rest log-odds
    ``z_c - logsumexp_{k != c} z_k``; the sigmoid of that is the softmax
    probability of ``c``.
    """
    old = old_logits.data if isinstance(old_logits, Tensor) else np.asarray(old_logits)
    n, n_old = old.shape[:2]
    if n_channels < n_old:
        raise ContractViolation("soft labels narrower than the old head")
    if source not in SOFT_SOURCES:
        raise ContractViolation(f"source must be one of {SOFT_SOURCES}")
    soft = np.zeros((n, n_channels) + old.shape[2:], dtype=old.dtype)
    soft[:, :n_old] = ad._sigmoid(old if source == "raw_logits" else one_vs_rest_log_odds(old))
    new = gt_visible >= n_old
    n_idx, *rest = np.nonzero(new)
    soft[(n_idx, gt_visible[new], *rest)] = 1.0
    return soft


def one_vs_rest_log_odds(logits: np.ndarray) -> np.ndarray:
    """``z_c - log sum_{k != c} exp(z_k)`` along the channel axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[1] == 1:
        return np.full(z.shape, 40.0)  # a single channel is certain
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    rest = np.maximum(e.sum(axis=1, keepdims=True) - e, np.finfo(np.float64).tiny)
    return np.clip(z - m - np.log(rest), -40.0, 40.0)


def sr_loss(probs: Tensor, soft_labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-sum_k soft_k log p_k`` (unnormalised targets)."""
    if soft_labels.shape != probs.shape:
        raise ContractViolation(f"soft labels {soft_labels.shape} vs probs {probs.shape}")
    n_pix = probs.size // probs.shape[1]
    logp = ad.log(probs, hi=1.0)
    return ad.scale(ad.reduce_sum(ad.mul(logp, soft_labels.astype(probs.dtype, copy=False))), -1.0 / n_pix)


def sc_loss(probs: Tensor) -> Tensor:
    """Mean per-pixel self-entropy."""
    n_pix = probs.size // probs.shape[1]
    logp = ad.log(probs, hi=1.0)
    return ad.scale(ad.reduce_sum(ad.mul(probs, logp)), -1.0 / n_pix)


def pooled_statistics(activation, scales: Sequence[int] = (1, 2)) -> list[Tensor]:
    """Width- and height-pooled means over an ``s x s`` grid for each scale."""
    a = ad.as_tensor(activation)
    n, c, h, w = a.shape
    out = []
    for s in scales:
        hh, ww = (h // s) * s, (w // s) * s
        x = a if (hh, ww) == (h, w) else ad.getitem(a, (slice(None), slice(None), slice(0, hh), slice(0, ww)))
        x = ad.reshape(x, (n, c, s, hh // s, s, ww // s))
        out.append(ad.pool_avg(x, 5))  # pooled along width: [N,C,s,h/s,s]
        out.append(ad.pool_avg(x, 3))  # pooled along height: [N,C,s,s,w/s]
    return out


def pd_loss(new_intermediates: Sequence[Tensor], old_intermediates: Sequence,
            scales: Sequence[int] = (1, 2)) -> Tensor:
    """Mean over layers and samples of the RMS gap between pooled statistics.

    Old activations are constants.
    """
    if len(new_intermediates) != len(old_intermediates) or not new_intermediates:
        raise ContractViolation("need equal, non-empty lists of activations")
    total = None
    for new, old in zip(new_intermediates, old_intermediates):
        old_arr = old.data if isinstance(old, Tensor) else np.asarray(old)
        if new.shape != old_arr.shape:
            raise ContractViolation(f"activation shapes differ: {new.shape} vs {old_arr.shape}")
        sq, n_stats = None, 0
        with ad.no_grad():
            old_stats = [t.data for t in pooled_statistics(old_arr, scales)]
        for ns, os_ in zip(pooled_statistics(new, scales), old_stats):
            diff = ad.sub(ns, os_)
            part = ad.reduce_sum(ad.mul(diff, diff), axis=tuple(range(1, diff.ndim)))
            sq = part if sq is None else ad.add(sq, part)
            n_stats += int(np.prod(diff.shape[1:]))
        layer = ad.reduce_mean(ad.sqrt(ad.scale(sq, 1.0 / n_stats)))
        total = layer if total is None else ad.add(total, layer)
    return ad.scale(total, 1.0 / len(new_intermediates))


def total_loss(components: LossComponents, weights: LossWeights) -> Tensor:
    if not isinstance(weights, LossWeights):
        raise ContractViolation("weights must be a LossWeights")
    loss = components.sg
    for term, lam in ((components.sr, weights.softness), (components.sc, weights.sharpness),
                      (components.pd, weights.pooled)):
        if term is not None and lam != 0:
            loss = ad.add(loss, ad.scale(term, lam))
    return loss
