"""Multi-label evaluation: mAP, macro/micro precision-recall-F1, top-k variants."""

from __future__ import annotations

import warnings

import numpy as np

METRIC_NAMES = ("CP", "CR", "CF1", "OP", "OR", "OF1")


def average_precision(scores, truth) -> float:
    """Mean over positives of precision at the positive's rank.

    Ranking is by descending score; ties keep the original index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    npos = int(truth.sum())
    if npos == 0:
        raise ValueError("average_precision: no positive items")
    order = np.argsort(-scores, kind="stable")
    hits = truth[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits > 0].sum() / npos)


def map_score(scores, truth) -> float:
    """Mean AP over classes that have at least one positive."""
    scores, truth = _check_batch(scores, truth)
    present = truth.sum(axis=0) > 0
    if not present.any():
        raise ValueError("map_score: no class has a positive example")
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} have no positives; excluded from mAP",
                      stacklevel=2)
    aps = [average_precision(scores[:, j], truth[:, j]) for j in np.flatnonzero(present)]
    return float(np.mean(aps))


def binarize(scores, threshold: float = 0.5, top_k: int | None = None) -> np.ndarray:
    """Threshold (``score > threshold``) or keep each row's ``top_k`` highest scores.

    Top-k ties go to the lower label index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if top_k is None:
        return (scores > threshold).astype(np.int64)
    if not 0 < top_k <= scores.shape[1]:
        raise ValueError(f"top_k must lie in [1, {scores.shape[1]}], got {top_k}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
    pred = np.zeros(scores.shape, dtype=np.int64)
    np.put_along_axis(pred, order, 1, axis=1)
    return pred


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(p, r):
    return float(2 * p * r / (p + r)) if p + r > 0 else 0.0


def prf_suite(pred, truth) -> dict[str, float]:
    """Macro (C*) and micro (O*) precision, recall and F1; 0/0 counts as 0."""
    pred, truth = _check_batch(pred, truth)
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    cp = float(_ratio(tp, tp + fp).mean())
    cr = float(_ratio(tp, tp + fn).mean())
    op = float(_ratio(tp.sum(), tp.sum() + fp.sum()))
    orr = float(_ratio(tp.sum(), tp.sum() + fn.sum()))
    return {"CP": cp, "CR": cr, "CF1": _f1(cp, cr), "OP": op, "OR": orr, "OF1": _f1(op, orr)}


def evaluate(scores, truth, threshold: float = 0.5, top_k: int = 3) -> dict[str, float]:
    """Full report: mAP, the six threshold metrics and their top-k ("-3") variants."""
    scores, truth = _check_batch(scores, truth)
    report = {"mAP": map_score(scores, truth)}
    report.update(prf_suite(binarize(scores, threshold), truth))
    k = min(top_k, scores.shape[1])
    for name, value in prf_suite(binarize(scores, top_k=k), truth).items():
        report[f"{name}-{top_k}"] = value
    return report


def _check_batch(scores, truth):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} must be equal N x n")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth must be 0/1")
    return scores, truth.astype(np.int64)
