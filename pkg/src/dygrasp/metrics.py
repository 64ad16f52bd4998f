"""Exact ranking metrics. Ties are handled explicitly everywhere."""

from __future__ import annotations

import numpy as np


def _groups_desc(scores: np.ndarray):
    uniq, inverse = np.unique(-scores, return_inverse=True)
    return uniq, inverse.reshape(-1)


def average_precision(scores, labels) -> float:
    """Mean over positives of |{pos: s >= s_i}| / |{all: s >= s_i}|."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    uniq, g = _groups_desc(scores)
    all_per = np.bincount(g, minlength=len(uniq))
    pos_per = np.bincount(g, weights=labels, minlength=len(uniq))
    cum_all = np.cumsum(all_per)
    cum_pos = np.cumsum(pos_per)
    return float((pos_per * cum_pos / cum_all).sum() / n_pos)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (P N), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0          # 1-based mid-ranks
    rank_sum = avg_rank[inverse][labels].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision_bruteforce(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    total = 0.0
    for i in np.flatnonzero(y):
        above = s >= s[i]
        total += (above & y).sum() / above.sum()
    return total / y.sum()


def roc_auc_bruteforce(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def ranks_pessimistic(true_scores, cand_scores) -> np.ndarray:
    """1 + number of candidates scoring >= the true one."""
    true_scores = np.asarray(true_scores, dtype=np.float64)
    cand_scores = np.asarray(cand_scores, dtype=np.float64)
    return 1 + (cand_scores >= true_scores[:, None]).sum(axis=1)


def hits_at_k(ranks, ks) -> dict[int, float]:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        raise ValueError("no queries to rank")
    return {int(k): float((ranks <= k).mean()) for k in ks}
