"""Rank-based AUROC at object and point level."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.stats import rankdata

from .exceptions import InvalidArgument, UndefinedMetric

POOLINGS = ("per_object", "global")


def auroc(labels: ArrayLike, scores: ArrayLike) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    y = np.asarray(labels).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise InvalidArgument(f"labels and scores differ in length: {y.size} vs {s.size}")
    if not np.all(np.isfinite(s)):
        raise InvalidArgument("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgument("labels must be binary (0/1)")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks; ties contribute one half
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auroc(labels: ArrayLike, scores: ArrayLike) -> float:
    """Quadratic reference implementation used for cross-checks."""
    y = np.asarray(labels).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    p, n = s[y == 1], s[y == 0]
    if p.size == 0 or n.size == 0:
        raise UndefinedMetric("AUROC needs both positive and negative labels")
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def object_auroc(labels: ArrayLike, object_scores: ArrayLike) -> float:
    return auroc(labels, object_scores)


def point_auroc(masks: Sequence[ArrayLike], point_scores: Sequence[ArrayLike],
                pooling: str = "per_object") -> Optional[float]:
    """Point-level AUROC over a set of samples.

    ``per_object`` averages the AUROC of every sample whose mask holds both
    classes (``None`` if there is none); ``global`` pools all points.
    """
    if pooling not in POOLINGS:
        raise InvalidArgument(f"pooling must be one of {POOLINGS}")
    if len(masks) != len(point_scores):
        raise InvalidArgument("need one mask per score vector")
    pairs = []
    for m, s in zip(masks, point_scores):
        m = np.asarray(m).reshape(-1).astype(np.int64)
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        if m.shape != s.shape:
            raise InvalidArgument(f"mask and scores differ in length: {m.size} vs {s.size}")
        pairs.append((m, s))
    if pooling == "global":
        if not pairs:
            raise UndefinedMetric("no samples")
        return auroc(np.concatenate([m for m, _ in pairs]), np.concatenate([s for _, s in pairs]))
    vals = [auroc(m, s) for m, s in pairs if 0 < m.sum() < m.size]
    return float(np.mean(vals)) if vals else None
