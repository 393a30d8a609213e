"""Evaluation metrics and the plain soft-impute SVD baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import DataSplit
from .errors import ValidationError
from .latent import LatentFactors, fit_latent

PROB_EPS = 1e-15


def _paired(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValidationError("metric inputs must be 1-d arrays of equal length")
    if len(y) == 0:
        raise ValidationError("metric inputs are empty")
    return y, p


def rmse(actual, predicted) -> float:
    y, p = _paired(actual, predicted)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def mae(actual, predicted) -> float:
    y, p = _paired(actual, predicted)
    return float(np.mean(np.abs(y - p)))


def auc(labels, scores) -> float:
    """Rank-statistic AUC with midrank tie handling.

    Ties between a positive and a negative score count one half, which is the
    Mann-Whitney convention. Requires both classes present.
    """
    y, s = _paired(labels, scores)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("AUC labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average rank on ties
    return float((ranks[y == 1.0].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(labels, probabilities) -> float:
    """Binary cross-entropy with probabilities clipped to [1e-15, 1 - 1e-15]."""
    y, p = _paired(labels, probabilities)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("log loss labels must be 0 or 1")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


@dataclass
class SvdBaseline:
    """Global mean plus an unconstrained rank-r soft-impute fit.

    No side features: an id unseen in training falls back to the global mean.
    """

    mean: float
    factors: LatentFactors
    lam: float

    def predict(self, user_idx: np.ndarray, item_idx: np.ndarray) -> np.ndarray:
        return self.mean + self.factors.predict_pairs(
            np.asarray(user_idx), np.asarray(item_idx)
        )


def baseline_svd(
    split: DataSplit,
    rank: int = 5,
    lam_grid=(0.1, 1.0, 10.0),
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
) -> SvdBaseline:
    """Fit the baseline on mean-centered training responses, choosing lambda
    from ``lam_grid`` by validation RMSE (ties keep the smaller lambda)."""
    train, val = split.train, split.validation
    mean = float(np.mean(train.response))
    best = None
    for lam in sorted(lam_grid):
        factors = fit_latent(
            train.user_idx,
            train.item_idx,
            train.response - mean,
            (train.n_users, train.n_items),
            rank=rank,
            lam=lam,
            seed=seed,
            max_iters=max_iters,
            tol=tol,
        )
        pred = mean + factors.predict_pairs(val.user_idx, val.item_idx)
        err = rmse(val.response, pred)
        if best is None or err < best[0]:
            best = (err, lam, factors)
    _, lam, factors = best
    return SvdBaseline(mean, factors, lam)
