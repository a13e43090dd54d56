"""Prototype-rectified pseudo labels for background pixels.

All label maps here live in output-channel space: 0 is background, old
classes occupy channels ``1..n_old-1`` and the current step's classes sit
above them.  Pixels the rule refuses to label get :data:`IGNORED`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LOG_EPS, ContractViolation, Tensor

IGNORED = 255

CASE_GT, CASE_OLD, CASE_IGNORED = 1, 2, 3


class NoPrototypesError(RuntimeError):
    """No prototype could be built; the caller must fall back."""


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class PrototypeTable:
    vectors: dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, c) -> bool:
        return int(c) in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, c) -> np.ndarray:
        return self.vectors[int(c)]

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)


def coarse_labels(old_logits) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest channel."""
    return np.argmax(_arr(old_logits), axis=1)


def compute_prototypes(old_features, coarse: np.ndarray, background_mask: np.ndarray) -> PrototypeTable:
    """Mean old-model feature of background pixels, grouped by coarse label."""
    feats = _arr(old_features)
    if feats.size == 0:
        return PrototypeTable()
    n, f, h, w = feats.shape
    if coarse.shape != (n, h, w) or background_mask.shape != (n, h, w):
        raise ContractViolation("features, coarse labels and mask are not aligned")
    flat = feats.transpose(0, 2, 3, 1).reshape(-1, f).astype(np.float64)
    labels = coarse.reshape(-1)
    keep = background_mask.reshape(-1).astype(bool)
    table = PrototypeTable()
    for c in np.unique(labels[keep]):
        table.vectors[int(c)] = flat[keep & (labels == c)].mean(axis=0)
    return table


def correction_weights(features, prototypes: PrototypeTable, n_classes: int | None = None,
                       temperature: float = 1.0) -> np.ndarray:
    """Softmax over classes of ``-||f - proto_c|| / T``.

    ``features`` is either one pixel ``[F]`` or a map ``[N,F,H,W]``.  The
    result has one entry per class channel (``n_classes`` of them, default
    ``max(prototype id) + 1``); classes without a prototype get weight 0.
    """
    if len(prototypes) == 0:
        raise NoPrototypesError("prototype table is empty")
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    feats = _arr(features).astype(np.float64)
    single = feats.ndim == 1
    if single:
        feats = feats[None, :, None, None]
    if n_classes is None:
        n_classes = max(prototypes.classes) + 1
    n, _, h, w = feats.shape
    logits = np.full((n, n_classes, h, w), -np.inf)
    for c in prototypes.classes:
        if c >= n_classes:
            continue
        diff = feats - prototypes[c][None, :, None, None]
        logits[:, c] = -np.sqrt((diff * diff).sum(axis=1)) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    zeta = e / e.sum(axis=1, keepdims=True)
    return zeta[0, :, 0, 0] if single else zeta


def pixel_entropy(probs) -> np.ndarray:
    p = np.clip(_arr(probs).astype(np.float64), LOG_EPS, 1.0)
    return -(p * np.log(p)).sum(axis=1)


def entropy_thresholds(old_probs, coarse: np.ndarray) -> dict[int, float]:
    """Median per-pixel entropy for every class predicted at least once."""
    ent = pixel_entropy(old_probs).reshape(-1)
    labels = coarse.reshape(-1)
    return {int(c): float(np.median(ent[labels == c])) for c in np.unique(labels)}


def _threshold_map(raw: np.ndarray, thresholds: dict[int, float]) -> np.ndarray:
    lut = np.full(int(raw.max(initial=0)) + 1, np.nan)
    for c, tau in thresholds.items():
        if c < len(lut):
            lut[c] = tau
    return lut[raw]


def relabel(gt_visible: np.ndarray, old_probs, features, prototypes: PrototypeTable,
            thresholds: dict[int, float], temperature: float = 1.0) -> np.ndarray:
    """Three-case pseudo labels.

    1. non-background ground truth keeps its label;
    2. a background pixel takes the old model's winner ``c`` when its entropy
       is strictly below ``tau[c]`` and the prototype-weighted scores pick
       the same ``c``;
    3. every other pixel is IGNORED.
    """
    probs = _arr(old_probs).astype(np.float64)
    n_old = probs.shape[1]
    raw = np.argmax(probs, axis=1)
    confident = pixel_entropy(probs) < _threshold_map(raw, thresholds)
    try:
        zeta = correction_weights(features, prototypes, n_classes=n_old, temperature=temperature)
    except NoPrototypesError:
        consistent = np.zeros_like(confident)
    else:
        rectified = np.argmax(zeta * probs, axis=1)
        has_proto = np.isin(raw, prototypes.classes)
        consistent = has_proto & (rectified == raw)
    return _assemble(gt_visible, raw, confident & consistent)


def plain_relabel(gt_visible: np.ndarray, old_probs, thresholds: dict[int, float]) -> np.ndarray:
    """Entropy-threshold pseudo labels without the prototype consistency check."""
    probs = _arr(old_probs).astype(np.float64)
    raw = np.argmax(probs, axis=1)
    confident = pixel_entropy(probs) < _threshold_map(raw, thresholds)
    return _assemble(gt_visible, raw, confident)


def _assemble(gt_visible: np.ndarray, raw: np.ndarray, accept: np.ndarray) -> np.ndarray:
    if gt_visible.shape != raw.shape:
        raise ContractViolation(f"label map {gt_visible.shape} vs predictions {raw.shape}")
    out = np.full(gt_visible.shape, IGNORED, dtype=np.int64)
    bg = gt_visible == 0
    out[~bg] = gt_visible[~bg]
    take = bg & accept
    out[take] = raw[take]
    return out


def label_cases(pseudo: np.ndarray, gt_visible: np.ndarray) -> np.ndarray:
    cases = np.full(pseudo.shape, CASE_OLD, dtype=np.int64)
    cases[gt_visible != 0] = CASE_GT
    cases[pseudo == IGNORED] = CASE_IGNORED
    return cases


# ------------------------------------------------------------------ audit


def audit(pseudo: np.ndarray, gt_visible: np.ndarray, gt_full: np.ndarray, n_old: int) -> dict:
    """Counts per case plus precision/recall of old-class pseudo labels.

    ``gt_full`` must already be in channel space.  Precision is taken over
    pixels pseudo-labelled with an old foreground class; recall over
    background-GT pixels whose true class is an old foreground class.
    """
    cases = label_cases(pseudo, gt_visible)
    labelled_old = (cases == CASE_OLD) & (pseudo >= 1) & (pseudo < n_old)
    hidden_old = (gt_visible == 0) & (gt_full >= 1) & (gt_full < n_old)
    correct = pseudo == gt_full
    precision = correct[labelled_old].mean() if labelled_old.any() else float("nan")
    recall = correct[hidden_old].mean() if hidden_old.any() else float("nan")
    return {
        "pixel_count": int(pseudo.size),
        "case1": int((cases == CASE_GT).sum()),
        "case2": int((cases == CASE_OLD).sum()),
        "ignored": int((cases == CASE_IGNORED).sum()),
        "precision_vs_oracle": float(precision),
        "recall_vs_oracle": float(recall),
    }


AUDIT_COLUMNS = ("method", "pixel_count", "case1", "case2", "ignored",
                 "precision_vs_oracle", "recall_vs_oracle")


def write_audit_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for row in rows:
            writer.writerow([row[k] if not isinstance(row[k], float) else f"{row[k]:.6f}"
                             for k in AUDIT_COLUMNS])


def write_pgm(label_map: np.ndarray, path) -> None:
    """Binary PGM of a single label map; IGNORED is stored as 255."""
    if label_map.ndim != 2 or label_map.min(initial=0) < 0 or label_map.max(initial=0) > 255:
        raise ContractViolation("PGM needs a 2-d map with values in 0..255")
    h, w = label_map.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + label_map.astype(np.uint8).tobytes())
