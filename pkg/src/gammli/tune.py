"""Coarse-to-fine search over (user groups K, item groups L, latent ridge).

The additive stages do not depend on these three knobs, so they are fitted
once and frozen; each candidate triple only reruns the two k-means clusterings
and the latent ALS on the frozen stage-two residuals, scored by validation
loss. Every iteration lays a grid over the current ranges, then the ranges are
recentered on the incumbent best and halved, clamped to the initial ranges.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import model as model_mod
from . import stages
from .clustering import Clustering, kmeans
from .data import CLASSIFICATION, DataSplit, FeatureTable, scale_features
from .errors import ValidationError
from .latent import fit_latent
from .metrics import logloss, rmse
from .subnet import TrainConfig


@dataclass
class SearchSpace:
    user_groups: tuple[int, int] = (2, 30)
    item_groups: tuple[int, int] = (2, 30)
    latent_reg: tuple[float, float] = (0.0, 50.0)
    grid_points: int = 5
    iterations: int = 5

    def __post_init__(self):
        for lo, hi in (self.user_groups, self.item_groups, self.latent_reg):
            if lo > hi:
                raise ValidationError("search range lower bound exceeds upper bound")
        if self.user_groups[0] < 1 or self.item_groups[0] < 1:
            raise ValidationError("group counts must be positive")
        if self.latent_reg[0] < 0:
            raise ValidationError("latent regularization must be non-negative")
        if self.grid_points < 1 or self.iterations < 1:
            raise ValidationError("grid points and iterations must be positive")


@dataclass
class TraceRow:
    iteration: int
    user_groups: int
    item_groups: int
    latent_reg: float
    val_loss: float   # nan on failure
    status: str       # "ok" or "error"


@dataclass
class TuneResult:
    user_groups: int
    item_groups: int
    latent_reg: float
    best_loss: float
    trace: list[TraceRow]
    evaluations: int  # distinct triples actually fitted


def _int_axis(lo: float, hi: float, points: int) -> list[int]:
    axis = []
    for v in np.linspace(lo, hi, points):
        iv = int(round(float(v)))
        if iv not in axis:
            axis.append(iv)
    return sorted(axis)


def _float_axis(lo: float, hi: float, points: int) -> list[float]:
    axis = []
    for v in np.linspace(lo, hi, points):
        fv = float(v)
        if fv not in axis:
            axis.append(fv)
    return axis


def _halve(lo, hi, center, init_lo, init_hi):
    span = (hi - lo) / 2.0
    new_lo = max(init_lo, min(center - span / 2.0, init_hi))
    new_hi = min(init_hi, max(center + span / 2.0, init_lo))
    if new_lo > new_hi:
        new_lo = new_hi
    return new_lo, new_hi


def coarse_to_fine_search(evaluate, space: SearchSpace | None = None) -> TuneResult:
    """Minimize evaluate(K, L, lam) over the space.

    evaluate may raise; failed candidates are recorded with status "error" and
    skipped. Repeated triples across iterations reuse the earlier result. Ties
    on loss resolve to the smallest (K, L, lam).
    """
    space = space or SearchSpace()
    k_lo, k_hi = map(float, space.user_groups)
    l_lo, l_hi = map(float, space.item_groups)
    r_lo, r_hi = map(float, space.latent_reg)
    init = (k_lo, k_hi, l_lo, l_hi, r_lo, r_hi)

    cache: dict[tuple[int, int, float], tuple[float, str]] = {}
    trace: list[TraceRow] = []
    best: tuple[float, int, int, float] | None = None
    fits = 0

    for it in range(1, space.iterations + 1):
        k_axis = _int_axis(k_lo, k_hi, space.grid_points)
        l_axis = _int_axis(l_lo, l_hi, space.grid_points)
        r_axis = _float_axis(r_lo, r_hi, space.grid_points)
        for k, l, lam in sorted(itertools.product(k_axis, l_axis, r_axis)):
            key = (k, l, lam)
            if key in cache:
                loss, status = cache[key]
            else:
                try:
                    loss, status = float(evaluate(k, l, lam)), "ok"
                except Exception:
                    loss, status = math.nan, "error"
                if status == "ok" and not math.isfinite(loss):
                    loss, status = math.nan, "error"
                cache[key] = (loss, status)
                fits += 1
            trace.append(TraceRow(it, k, l, lam, loss, status))
            if status == "ok":
                cand = (loss, k, l, lam)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            _, bk, bl, br = best
            k_lo, k_hi = _halve(k_lo, k_hi, float(bk), init[0], init[1])
            l_lo, l_hi = _halve(l_lo, l_hi, float(bl), init[2], init[3])
            r_lo, r_hi = _halve(r_lo, r_hi, br, init[4], init[5])

    if best is None:
        raise RuntimeError("every tuning candidate failed")
    loss, bk, bl, br = best
    return TuneResult(bk, bl, br, loss, trace, fits)


@dataclass
class TunerContext:
    """Frozen additive stages plus everything a candidate needs to score."""

    task: str
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray            # stage-two training residuals
    shape: tuple[int, int]
    user_points: np.ndarray       # scaled user features, k-means input
    item_points: np.ndarray
    base_val_scores: np.ndarray   # additive-stage scores on validation pairs
    val_user_idx: np.ndarray
    val_item_idx: np.ndarray
    val_targets: np.ndarray
    rank: int
    als_max_iters: int
    als_tol: float
    seed: int
    _user_cache: dict[int, Clustering] = field(default_factory=dict)
    _item_cache: dict[int, Clustering] = field(default_factory=dict)

    def _clusters(self, cache, points, k, salt):
        if k not in cache:
            seed = int(np.random.SeedSequence((self.seed, salt, k)).generate_state(1)[0])
            cache[k] = kmeans(points, k, seed)
        return cache[k]

    def evaluate(self, user_groups: int, item_groups: int, latent_reg: float) -> float:
        user_cl = self._clusters(self._user_cache, self.user_points, user_groups, 1)
        item_cl = self._clusters(self._item_cache, self.item_points, item_groups, 2)
        als_seed = int(np.random.SeedSequence((self.seed, 3)).generate_state(1)[0])
        latent = fit_latent(
            self.rows, self.cols, self.values, self.shape,
            rank=self.rank, lam=latent_reg,
            user_assign=user_cl.assignments, item_assign=item_cl.assignments,
            seed=als_seed, max_iters=self.als_max_iters, tol=self.als_tol,
        )
        scores = self.base_val_scores + latent.predict_pairs(
            self.val_user_idx, self.val_item_idx
        )
        if self.task == CLASSIFICATION:
            return logloss(self.val_targets, expit(2.0 * scores))
        return rmse(self.val_targets, scores)


def build_tuner_context(
    split: DataSplit,
    user_table: FeatureTable,
    item_table: FeatureTable,
    train_config: TrainConfig | None = None,
    rank: int = 3,
    als_max_iters: int = 100,
    als_tol: float = 1e-4,
    max_pairs: int = stages.MAX_PAIRS,
    seed: int = 0,
) -> TunerContext:
    """Fit the additive stages once and package them for candidate scoring."""
    task = split.train.task
    train_config = train_config or TrainConfig()
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(6)]
    users, _ = scale_features(user_table)
    items, _ = scale_features(item_table)
    train, val = split.train, split.validation

    main, _ = stages.fit_main_effects(
        split, users, items, train_config.reseeded(seeds[0]), task
    )
    s1_train = stages.additive_scores(main, None, users, items, train.user_idx, train.item_idx)
    s1_val = stages.additive_scores(main, None, users, items, val.user_idx, val.item_idx)
    manifest, mu_shift, _ = stages.fit_manifest_interactions(
        model_mod.residuals(train.response, s1_train, task),
        split, users, items, train_config.reseeded(seeds[1]), task, s1_val,
        max_pairs=max_pairs,
    )
    main.mu += mu_shift
    stages.fine_tune(main, manifest, split, users, items,
                     train_config.reseeded(seeds[2]), task)
    s2_train = stages.additive_scores(main, manifest, users, items,
                                      train.user_idx, train.item_idx)
    s2_val = stages.additive_scores(main, manifest, users, items,
                                    val.user_idx, val.item_idx)
    return TunerContext(
        task=task,
        rows=train.user_idx.copy(),
        cols=train.item_idx.copy(),
        values=model_mod.residuals(train.response, s2_train, task),
        shape=(train.n_users, train.n_items),
        user_points=users.values,
        item_points=items.values,
        base_val_scores=s2_val,
        val_user_idx=val.user_idx.copy(),
        val_item_idx=val.item_idx.copy(),
        val_targets=val.response.copy(),
        rank=rank,
        als_max_iters=als_max_iters,
        als_tol=als_tol,
        seed=seeds[5],
    )
