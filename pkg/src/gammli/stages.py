"""Staged estimation of the additive structure.

Stage 1 fits all user and item main effects jointly on the link scale;
stage 2 fits all user-feature x item-feature interaction subnets on stage-1
residuals. After each stage every effect is centered to mean zero over the
training observations (the shift folds into the intercept), ranked by its
empirical variation D = sum(h^2)/(|train|-1), and pruned at the cumulative
cut with the best validation loss. A joint fine-tune pass then re-optimizes
the retained effects together.

Categorical main effects are per-level constant offsets. When a categorical
feature enters a pairwise interaction its input is the level index scaled to
[0, 1], which keeps every pair subnet a two-input network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CATEGORICAL, CLASSIFICATION, NUMERIC, DataSplit, FeatureTable
from .subnet import (
    LOSSES,
    Adam,
    Subnet,
    SubnetArray,
    TrainConfig,
    train_loop,
)

EVAL_CHUNK = 8192
MAX_PAIRS = 200


@dataclass
class CategoricalEffect:
    """Bias-node main effect: one constant offset per level."""

    levels: tuple[str, ...]
    offsets: np.ndarray

    def value_onehot(self, onehot: np.ndarray) -> np.ndarray:
        return onehot @ self.offsets


@dataclass
class MainEffectsModel:
    mu: float
    effects: dict[str, object]  # name -> Subnet | CategoricalEffect
    sides: dict[str, tuple[str, str]]  # name -> (side, declared feature)
    retained: list[str] = field(default_factory=list)
    variation: dict[str, float] = field(default_factory=dict)


@dataclass
class ManifestModel:
    interactions: dict[tuple[str, str], Subnet] = field(default_factory=dict)
    retained: list[tuple[str, str]] = field(default_factory=list)
    variation: dict[tuple[str, str], float] = field(default_factory=dict)


def link_mean(response: np.ndarray, task: str) -> float:
    """Training mean on the link scale: plain mean for regression, half
    log-odds of the base rate for classification."""
    if task == CLASSIFICATION:
        p = float(np.clip(np.mean(response), 1e-6, 1.0 - 1e-6))
        return 0.5 * np.log(p / (1.0 - p))
    return float(np.mean(response))


def effect_names(user_table: FeatureTable, item_table: FeatureTable):
    """(name, side, feature, kind) for every declared column; a feature name
    shared by both sides gets a side prefix so keys stay unique."""
    shared = {n for n, _ in user_table.schema} & {n for n, _ in item_table.schema}
    out = []
    for side, table in (("user", user_table), ("item", item_table)):
        for name, kind in table.schema:
            key = f"{side}:{name}" if name in shared else name
            out.append((key, side, name, kind))
    return out


def pair_entity_values(table: FeatureTable, feature: str) -> np.ndarray:
    """Per-entity scalar used as a pair-subnet input: the scaled value for
    numeric features, the level index scaled to [0, 1] otherwise."""
    sl = table.columns_for(feature)
    kind = dict(table.schema)[feature]
    if kind == NUMERIC:
        return table.values[:, sl.start]
    block = table.values[:, sl]
    denom = max(block.shape[1] - 1, 1)
    return np.argmax(block, axis=1) / denom


# -- trainable parts (bank of subnets / categorical offsets) -------------------

class _BankPart:
    def __init__(self, names, bank: SubnetArray, inputs: np.ndarray, lr: float):
        self.names = list(names)
        self.bank = bank
        self.inputs = inputs  # (E, N, arity)
        self.opt = Adam(bank.params(), lr=lr)

    def forward_cache(self, rows):
        return self.bank.forward_cache(self.inputs[:, rows, :])

    def backward_step(self, cache, dpred):
        dout = np.broadcast_to(dpred, (self.bank.count, len(dpred)))
        self.opt.step(self.bank.params(), self.bank.backward(cache, dout))

    def snapshot(self):
        return [p.copy() for p in self.bank.params()]

    def restore(self, state):
        for p, s in zip(self.bank.params(), state):
            p[...] = s

    def extract(self) -> dict[str, Subnet]:
        return dict(zip(self.names, self.bank.to_subnets()))


class _CatPart:
    def __init__(self, name, onehot: np.ndarray, offsets: np.ndarray, lr: float):
        self.names = [name]
        self.onehot = onehot  # (N, L)
        self.offsets = offsets
        self.opt = Adam([offsets], lr=lr)

    def forward_cache(self, rows):
        x = self.onehot[rows]
        return (x @ self.offsets)[None, :], x

    def backward_step(self, x, dpred):
        self.opt.step([self.offsets], [x.T @ dpred])

    def snapshot(self):
        return [self.offsets.copy()]

    def restore(self, state):
        self.offsets[...] = state[0]

    def extract(self):
        return {self.names[0]: self.offsets}


class _Composite:
    """Sum of parts plus a fixed base, trained jointly under one loss."""

    def __init__(self, parts, base: float, targets: np.ndarray, loss: str):
        self.parts = parts
        self.base = base
        self.targets = np.asarray(targets, dtype=np.float64)
        self.loss = LOSSES[loss]

    def predict_rows(self, rows) -> np.ndarray:
        out = np.full(len(rows), self.base)
        for start in range(0, len(rows), EVAL_CHUNK):
            chunk = rows[start : start + EVAL_CHUNK]
            acc = np.zeros(len(chunk))
            for part in self.parts:
                acc += part.forward_cache(chunk)[0].sum(axis=0)
            out[start : start + EVAL_CHUNK] += acc
        return out

    def loss_on(self, rows) -> float:
        return self.loss(self.predict_rows(rows), self.targets[rows])[0]

    def step_batch(self, rows) -> float:
        caches = []
        pred = np.full(len(rows), self.base)
        for part in self.parts:
            vals, cache = part.forward_cache(rows)
            pred += vals.sum(axis=0)
            caches.append(cache)
        value, dpred = self.loss(pred, self.targets[rows])
        for part, cache in zip(self.parts, caches):
            part.backward_step(cache, dpred)
        return value

    def snapshot(self):
        return [part.snapshot() for part in self.parts]

    def restore(self, state):
        for part, s in zip(self.parts, state):
            part.restore(s)


# -- effect evaluation on observation pairs ------------------------------------

def main_effect_values(
    main: MainEffectsModel,
    user_table: FeatureTable,
    item_table: FeatureTable,
    u_idx: np.ndarray,
    i_idx: np.ndarray,
    names=None,
) -> dict[str, np.ndarray]:
    """Per-observation value of each named main effect (entity-wise evaluation
    gathered through the observation indices)."""
    from .subnet import forward_batch

    out = {}
    for name in main.retained if names is None else names:
        side, feature = main.sides[name]
        table, idx = (
            (user_table, u_idx) if side == "user" else (item_table, i_idx)
        )
        sl = table.columns_for(feature)
        effect = main.effects[name]
        if isinstance(effect, CategoricalEffect):
            per_entity = effect.value_onehot(table.values[:, sl])
        else:
            per_entity = forward_batch(effect, table.values[:, sl])
        out[name] = per_entity[idx]
    return out


def manifest_values(
    manifest: ManifestModel,
    user_table: FeatureTable,
    item_table: FeatureTable,
    u_idx: np.ndarray,
    i_idx: np.ndarray,
    pairs=None,
) -> dict[tuple[str, str], np.ndarray]:
    keys = manifest.retained if pairs is None else pairs
    if not keys:
        return {}
    bank = SubnetArray.from_subnets([manifest.interactions[k] for k in keys])
    u_vals = {f: pair_entity_values(user_table, f) for f, _ in keys}
    i_vals = {f: pair_entity_values(item_table, f) for _, f in keys}
    n = len(u_idx)
    out = {k: np.empty(n) for k in keys}
    for start in range(0, n, EVAL_CHUNK):
        uu = u_idx[start : start + EVAL_CHUNK]
        ii = i_idx[start : start + EVAL_CHUNK]
        x = np.stack(
            [
                np.stack([u_vals[fu][uu], i_vals[fi][ii]], axis=1)
                for fu, fi in keys
            ]
        )
        vals = bank.forward(x)
        for e, k in enumerate(keys):
            out[k][start : start + EVAL_CHUNK] = vals[e]
    return out


def additive_scores(
    main: MainEffectsModel,
    manifest: ManifestModel | None,
    user_table: FeatureTable,
    item_table: FeatureTable,
    u_idx: np.ndarray,
    i_idx: np.ndarray,
) -> np.ndarray:
    """mu + retained main effects + retained manifest interactions."""
    score = np.full(len(u_idx), main.mu)
    for vals in main_effect_values(main, user_table, item_table, u_idx, i_idx).values():
        score += vals
    if manifest is not None:
        for vals in manifest_values(
            manifest, user_table, item_table, u_idx, i_idx
        ).values():
            score += vals
    return score


def variation(values: np.ndarray) -> float:
    """Empirical variation D of a centered effect over training observations."""
    n = len(values)
    if n < 2:
        return 0.0
    return float((values * values).sum() / (n - 1))


def prune_by_validation(
    ordered_names, contributions, base_scores: np.ndarray, targets: np.ndarray, task: str
) -> int:
    """Smallest cumulative cut achieving the minimum validation loss.

    ``ordered_names`` must already be sorted by descending variation;
    ``contributions[name]`` holds that effect's values on the validation set.
    """
    loss = LOSSES["logistic" if task == CLASSIFICATION else "squared"]
    scores = base_scores.astype(np.float64).copy()
    losses = [loss(scores, targets)[0]]
    for name in ordered_names:
        scores = scores + contributions[name]
        losses.append(loss(scores, targets)[0])
    return int(np.argmin(losses))  # argmin takes the first (smallest s) on ties


def _order_by_variation(var: dict) -> list:
    return [k for k in sorted(var, key=lambda k: (-var[k], str(k)))]


# -- stage 1 --------------------------------------------------------------------

def fit_main_effects(
    split: DataSplit,
    user_table: FeatureTable,
    item_table: FeatureTable,
    config: TrainConfig,
    task: str,
):
    """Joint fit of every main effect; returns (MainEffectsModel, trace)."""
    train = split.train
    mu = link_mean(train.response, task)
    loss = "logistic" if task == CLASSIFICATION else "squared"

    catalog = effect_names(user_table, item_table)
    numeric = [(k, s, f) for k, s, f, kind in catalog if kind == NUMERIC]
    categorical = [(k, s, f) for k, s, f, kind in catalog if kind == CATEGORICAL]

    parts = []
    if numeric:
        inputs = np.empty((len(numeric), len(train), 1))
        for e, (_, side, feat) in enumerate(numeric):
            table, idx = (
                (user_table, train.user_idx)
                if side == "user"
                else (item_table, train.item_idx)
            )
            inputs[e, :, 0] = table.values[idx, table.columns_for(feat).start]
        bank = SubnetArray.init(len(numeric), 1, config.seed)
        parts.append(_BankPart([k for k, _, _ in numeric], bank, inputs, config.learning_rate))
    cat_meta = {}
    for k, side, feat in categorical:
        table, idx = (
            (user_table, train.user_idx)
            if side == "user"
            else (item_table, train.item_idx)
        )
        onehot = table.values[idx][:, table.columns_for(feat)]
        offsets = np.zeros(onehot.shape[1])
        cat_meta[k] = (table, feat)
        parts.append(_CatPart(k, onehot, offsets, config.learning_rate))

    composite = _Composite(parts, mu, train.response, loss)
    trace, _ = train_loop(composite, len(train), config, config.max_epochs)

    effects: dict[str, object] = {}
    sides: dict[str, tuple[str, str]] = {}
    for part in parts:
        extracted = part.extract()
        for name, obj in extracted.items():
            if isinstance(obj, np.ndarray):
                table, feat = cat_meta[name]
                obj = CategoricalEffect(table.levels[feat], obj.copy())
            effects[name] = obj
    for k, side, feat, _ in catalog:
        sides[k] = (side, feat)

    model = MainEffectsModel(mu, effects, sides)
    _center_and_rank(model, None, user_table, item_table, train)
    _prune_stage1(model, split, user_table, item_table, task)
    return model, trace


def _center_and_rank(main, manifest, user_table, item_table, train):
    """Center every effect to train-mean zero (shift folds into mu) and
    recompute variation."""
    vals = main_effect_values(
        main, user_table, item_table, train.user_idx, train.item_idx,
        names=list(main.effects),
    )
    for name, v in vals.items():
        shift = float(np.mean(v))
        effect = main.effects[name]
        if isinstance(effect, CategoricalEffect):
            effect.offsets -= shift
        else:
            effect.output_offset -= shift
        main.mu += shift
        main.variation[name] = variation(v - shift)
    if manifest is not None and manifest.interactions:
        pvals = manifest_values(
            manifest, user_table, item_table, train.user_idx, train.item_idx,
            pairs=list(manifest.interactions),
        )
        for key, v in pvals.items():
            shift = float(np.mean(v))
            manifest.interactions[key].output_offset -= shift
            main.mu += shift
            manifest.variation[key] = variation(v - shift)


def _prune_stage1(main, split, user_table, item_table, task):
    val = split.validation
    ordered = _order_by_variation(main.variation)
    contribs = main_effect_values(
        main, user_table, item_table, val.user_idx, val.item_idx, names=ordered
    )
    base = np.full(len(val), main.mu)
    s = prune_by_validation(ordered, contribs, base, val.response, task)
    main.retained = ordered[:s]


# -- stage 2 --------------------------------------------------------------------

def fit_manifest_interactions(
    residuals: np.ndarray,
    split: DataSplit,
    user_table: FeatureTable,
    item_table: FeatureTable,
    config: TrainConfig,
    task: str,
    base_val_scores: np.ndarray,
    max_pairs: int = MAX_PAIRS,
):
    """Joint fit of user-feature x item-feature pair subnets on stage-1
    residuals (least squares). Returns (ManifestModel, mu_shift, trace).

    ``base_val_scores`` are the stage-1 link-scale scores on the validation
    split; pruning measures the cumulative task loss on top of them.
    """
    train = split.train
    pairs = [
        (uf, itf)
        for uf, _ in user_table.schema
        for itf, _ in item_table.schema
    ][:max_pairs]
    if not pairs:
        return ManifestModel(), 0.0, []

    u_vals = {f: pair_entity_values(user_table, f) for f, _ in user_table.schema}
    i_vals = {f: pair_entity_values(item_table, f) for f, _ in item_table.schema}
    inputs = np.empty((len(pairs), len(train), 2))
    for e, (fu, fi) in enumerate(pairs):
        inputs[e, :, 0] = u_vals[fu][train.user_idx]
        inputs[e, :, 1] = i_vals[fi][train.item_idx]

    bank = SubnetArray.init(len(pairs), 2, config.seed)
    part = _BankPart(pairs, bank, inputs, config.learning_rate)
    composite = _Composite([part], 0.0, residuals, "squared")
    trace, _ = train_loop(composite, len(train), config, config.max_epochs)

    manifest = ManifestModel(interactions=part.extract())
    mu_shift = 0.0
    pvals = manifest_values(
        manifest, user_table, item_table, train.user_idx, train.item_idx, pairs=pairs
    )
    for key, v in pvals.items():
        shift = float(np.mean(v))
        manifest.interactions[key].output_offset -= shift
        mu_shift += shift
        manifest.variation[key] = variation(v - shift)

    val = split.validation
    ordered = _order_by_variation(manifest.variation)
    contribs = manifest_values(
        manifest, user_table, item_table, val.user_idx, val.item_idx, pairs=ordered
    )
    s = prune_by_validation(
        ordered, contribs, base_val_scores + mu_shift, val.response, task
    )
    manifest.retained = ordered[:s]
    return manifest, mu_shift, trace


# -- joint fine-tune -------------------------------------------------------------

def fine_tune(
    main: MainEffectsModel,
    manifest: ManifestModel,
    split: DataSplit,
    user_table: FeatureTable,
    item_table: FeatureTable,
    config: TrainConfig,
    task: str,
):
    """Re-optimize all retained effects together for ``fine_tune_epochs``.

    Early stopping counts the pre-tune state as epoch 0, so the restored
    validation loss never exceeds it; if the restored parameters would worsen
    the training loss the pre-tune state is kept. Effects are re-centered
    afterwards. Returns the trace.
    """
    train = split.train
    loss = "logistic" if task == CLASSIFICATION else "squared"
    parts = []
    numeric_names, cat_names = [], []
    for name in main.retained:
        if isinstance(main.effects[name], CategoricalEffect):
            cat_names.append(name)
        else:
            numeric_names.append(name)
    if numeric_names:
        inputs = np.empty((len(numeric_names), len(train), 1))
        for e, name in enumerate(numeric_names):
            side, feat = main.sides[name]
            table, idx = (
                (user_table, train.user_idx)
                if side == "user"
                else (item_table, train.item_idx)
            )
            inputs[e, :, 0] = table.values[idx, table.columns_for(feat).start]
        bank = SubnetArray.from_subnets([main.effects[n] for n in numeric_names])
        parts.append(_BankPart(numeric_names, bank, inputs, config.learning_rate))
    for name in cat_names:
        side, feat = main.sides[name]
        table, idx = (
            (user_table, train.user_idx)
            if side == "user"
            else (item_table, train.item_idx)
        )
        onehot = table.values[idx][:, table.columns_for(feat)]
        parts.append(
            _CatPart(name, onehot, main.effects[name].offsets, config.learning_rate)
        )
    if manifest.retained:
        u_vals = {f: pair_entity_values(user_table, f) for f, _ in manifest.retained}
        i_vals = {f: pair_entity_values(item_table, f) for _, f in manifest.retained}
        inputs = np.empty((len(manifest.retained), len(train), 2))
        for e, (fu, fi) in enumerate(manifest.retained):
            inputs[e, :, 0] = u_vals[fu][train.user_idx]
            inputs[e, :, 1] = i_vals[fi][train.item_idx]
        bank = SubnetArray.from_subnets(
            [manifest.interactions[k] for k in manifest.retained]
        )
        parts.append(_BankPart(manifest.retained, bank, inputs, config.learning_rate))
    if not parts:
        return []

    composite = _Composite(parts, main.mu, train.response, loss)
    pre_state = composite.snapshot()
    pre_train_loss = composite.loss_on(np.arange(len(train)))
    trace, _ = train_loop(composite, len(train), config, config.fine_tune_epochs)
    if composite.loss_on(np.arange(len(train))) > pre_train_loss:
        composite.restore(pre_state)

    for part in parts:
        extracted = part.extract()
        for name, obj in extracted.items():
            if isinstance(obj, np.ndarray):
                main.effects[name].offsets[...] = obj
            elif name in main.effects:
                main.effects[name] = obj
            else:
                manifest.interactions[name] = obj
    _recenter_retained(main, manifest, user_table, item_table, train)
    return trace


def _recenter_retained(main, manifest, user_table, item_table, train):
    vals = main_effect_values(
        main, user_table, item_table, train.user_idx, train.item_idx
    )
    for name, v in vals.items():
        shift = float(np.mean(v))
        effect = main.effects[name]
        if isinstance(effect, CategoricalEffect):
            effect.offsets -= shift
        else:
            effect.output_offset -= shift
        main.mu += shift
        main.variation[name] = variation(v - shift)
    pvals = manifest_values(
        manifest, user_table, item_table, train.user_idx, train.item_idx
    )
    for key, v in pvals.items():
        shift = float(np.mean(v))
        manifest.interactions[key].output_offset -= shift
        main.mu += shift
        manifest.variation[key] = variation(v - shift)
