"""Threshold-free OOD metrics.

Scores are oriented so that larger means more OOD. AUROC and AUPR-Error
treat OOD samples as positives; AUPR-Success and FPR@95%TPR treat the
in-distribution samples as positives (accepted when ``score <= delta``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def _check(in_scores, out_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("metrics need at least one in-distribution and one OOD score")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("scores must be finite")
    return a, b


def _sweep(conf_pos: np.ndarray, conf_neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) counts after each tie group, by descending confidence."""
    conf = np.concatenate([conf_pos, conf_neg])
    is_pos = np.concatenate([np.ones(conf_pos.size), np.zeros(conf_neg.size)])
    order = np.argsort(-conf, kind="mergesort")
    conf, is_pos = conf[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    # last index of every group of equal confidence
    ends = np.flatnonzero(np.r_[conf[1:] != conf[:-1], True])
    return tp[ends], fp[ends]


def roc_curve(in_scores, out_scores) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points from (0, 0) to (1, 1), OOD positive."""
    a, b = _check(in_scores, out_scores)
    tp, fp = _sweep(b, a)
    return np.r_[0.0, fp / a.size], np.r_[0.0, tp / b.size]


def auroc(in_scores, out_scores) -> float:
    fpr, tpr = roc_curve(in_scores, out_scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def aupr(in_scores, out_scores, positive: str = "out") -> float:
    """Step-integrated precision-recall area; each tie group is one step."""
    a, b = _check(in_scores, out_scores)
    if positive == "out":
        pos, neg = b, a
    elif positive == "in":
        pos, neg = -a, -b
    else:
        raise InputError(f"positive must be 'in' or 'out', got {positive!r}")
    tp, fp = _sweep(pos, neg)
    recall = tp / pos.size
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_tpr(in_scores, out_scores, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores at or below the smallest threshold accepting ``tpr_target`` of ID."""
    a, b = _check(in_scores, out_scores)
    s = np.sort(a)
    k = int(np.ceil(tpr_target * a.size - 1e-12))
    k = min(max(k, 1), a.size)
    delta = s[k - 1]
    return float(np.mean(b <= delta))


@dataclass(frozen=True)
class EvalReport:
    method: str
    auroc: float
    aupr_s: float
    aupr_e: float
    fpr95: float
    n_in: int
    n_out: int

    def as_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "aupr_s": self.aupr_s,
            "aupr_e": self.aupr_e,
            "fpr95": self.fpr95,
            "n_in": self.n_in,
            "n_out": self.n_out,
        }


def evaluate(in_scores, out_scores, method: str, tpr_target: float = 0.95) -> EvalReport:
    a, b = _check(in_scores, out_scores)
    return EvalReport(method, auroc(a, b), aupr(a, b, "in"), aupr(a, b, "out"), fpr_at_tpr(a, b, tpr_target),
                      a.size, b.size)


def format_table(reports) -> str:
    """Aligned text table, one row per method, metrics in percent."""
    head = f"{'Method':<10} {'AUROC↑':>8} {'AUPR-S↑':>8} {'AUPR-E↑':>8} {'FPR-95↓':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(
            f"{r.method:<10} {100 * r.auroc:>8.2f} {100 * r.aupr_s:>8.2f} {100 * r.aupr_e:>8.2f} {100 * r.fpr95:>8.2f}"
        )
    return "\n".join(lines) + "\n"


def format_kv(reports) -> str:
    lines = []
    for r in reports:
        for k, v in r.as_dict().items():
            lines.append(f"{r.method}.{k} = {v:.9f}" if isinstance(v, float) else f"{r.method}.{k} = {v}")
    return "\n".join(lines) + "\n"
