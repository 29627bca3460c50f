"""MPJPE, Procrustes-aligned MPJPE, PCK and AUC."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, DimMismatch, EmptyDataset

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(5.0, 150.0 + 1e-9, 5.0)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise DimMismatch(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint Euclidean error (mm); one value per pose for batched input."""
    return joint_errors(pred, gt).mean(axis=-1)


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity transform of ``pred`` onto ``gt`` (rotation, scale, translation, no reflection)."""
    pred, gt = _pair(pred, gt)
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    X = pred - mu_p
    Y = gt - mu_g
    var_g = np.sum(Y * Y, axis=(-2, -1))
    if np.any(var_g <= 1e-12):
        raise DegenerateConfiguration("ground truth pose has zero spatial variance")
    var_p = np.sum(X * X, axis=(-2, -1))
    U, S, Vt = np.linalg.svd(np.swapaxes(X, -1, -2) @ Y)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(S.shape)
    D[..., -1] = d
    R = U @ (D[..., :, None] * Vt)  # pred_centered @ R ~ gt_centered
    safe_var = np.where(var_p > 0, var_p, 1.0)
    s = np.where(var_p > 0, np.sum(S * D, axis=-1) / safe_var, 0.0)
    return s[..., None, None] * (X @ R) + mu_g


def pa_mpjpe(pred, gt):
    pred, gt = _pair(pred, gt)
    return mpjpe(procrustes_align(pred, gt), gt)


def pck(preds, gts, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of (pose, joint) pairs with error strictly below the threshold."""
    if not threshold_mm > 0:
        raise ValueError("threshold must be positive")
    err = joint_errors(preds, gts)
    if err.size == 0:
        raise EmptyDataset("no joints to evaluate")
    return 100.0 * float(np.mean(err < threshold_mm))


def auc(preds, gts, thresholds=AUC_THRESHOLDS_MM) -> float:
    err = joint_errors(preds, gts)
    if err.size == 0:
        raise EmptyDataset("no joints to evaluate")
    return float(np.mean([100.0 * np.mean(err < t) for t in thresholds]))


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    pck: float
    auc: float
    threshold_mm: float
    per_record: list = field(default_factory=list)  # (id, mpjpe, pa_mpjpe)

    def summary(self) -> str:
        return (f"MPJPE {self.mpjpe:.2f} mm | PA-MPJPE {self.pa_mpjpe:.2f} mm | "
                f"PCK@{self.threshold_mm:g} {self.pck:.2f}% | AUC {self.auc:.2f}% "
                f"| n={len(self.per_record)}")

    def to_dict(self) -> dict:
        return {"mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe, "pck": self.pck,
                "auc": self.auc, "threshold_mm": self.threshold_mm,
                "count": len(self.per_record)}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "mpjpe_mm", "pa_mpjpe_mm"])
            for rid, e, pe in self.per_record:
                w.writerow([rid, repr(float(e)), repr(float(pe))])


def evaluate(preds, gts, ids=None, threshold_mm: float = PCK_THRESHOLD_MM) -> EvalReport:
    preds, gts = _pair(preds, gts)
    if preds.ndim != 3 or len(preds) == 0:
        raise EmptyDataset("evaluation needs a nonempty batch of poses")
    per = mpjpe(preds, gts)
    per_pa = pa_mpjpe(preds, gts)
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    return EvalReport(
        mpjpe=float(per.mean()),
        pa_mpjpe=float(per_pa.mean()),
        pck=pck(preds, gts, threshold_mm),
        auc=auc(preds, gts),
        threshold_mm=float(threshold_mm),
        per_record=list(zip(ids, per.tolist(), per_pa.tolist())),
    )
