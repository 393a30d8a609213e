"""End-to-end model: additive stages plus group-constrained latent factors.

The link-scale score of a (user, item) pair decomposes exactly as

    F = mu + sum(retained main effects) + sum(retained interactions) + U_i.V_j

For regression the prediction is F itself; for classification F is half the
log-odds, so the probability is 1 / (1 + exp(-2F)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import stages
from .clustering import Clustering, assign_cluster, kmeans
from .data import (
    CLASSIFICATION,
    NUMERIC,
    DataSplit,
    FeatureTable,
    ScalingParams,
    encode_row,
    scale_features,
)
from .errors import ValidationError
from .latent import LatentFactors, cluster_means, fit_latent
from .metrics import logloss, rmse
from .stages import CategoricalEffect, MainEffectsModel, ManifestModel
from .subnet import TrainConfig, forward, subnet_from_dict, subnet_to_dict

FORMAT_VERSION = 1
SECTIONS = ("meta", "scaling", "main_effects", "manifest_interactions", "latent", "clusters")


@dataclass
class FitConfig:
    n_user_groups: int = 10
    n_item_groups: int = 10
    latent_reg: float = 1.0
    latent_rank: int = 3
    als_max_iters: int = 100
    als_tol: float = 1e-4
    max_pairs: int = stages.MAX_PAIRS
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_user_groups < 1 or self.n_item_groups < 1:
            raise ValidationError("group counts must be positive")
        if self.latent_reg < 0:
            raise ValidationError("latent regularization must be non-negative")
        if self.latent_rank < 1:
            raise ValidationError("latent rank must be positive")
        if self.als_max_iters < 1 or self.als_tol <= 0:
            raise ValidationError("ALS iteration and tolerance settings must be positive")
        if self.max_pairs < 0:
            raise ValidationError("max_pairs must be non-negative")


@dataclass
class PredictionResult:
    score: float
    probability: float | None
    decomposition: dict[str, float]


@dataclass
class GammliModel:
    task: str
    user_table: FeatureTable  # scaled
    item_table: FeatureTable
    user_scaling: ScalingParams
    item_scaling: ScalingParams
    main: MainEffectsModel
    manifest: ManifestModel
    latent: LatentFactors
    user_clusters: Clustering
    item_clusters: Clustering
    config: FitConfig
    stage_val_losses: dict[str, float] = field(default_factory=dict)
    traces: dict[str, list] = field(default_factory=dict)

    # -- scoring ---------------------------------------------------------------

    def predict_scores(self, user_idx, item_idx) -> np.ndarray:
        """Vectorized link-scale scores for index arrays."""
        user_idx = np.asarray(user_idx, dtype=np.int64)
        item_idx = np.asarray(item_idx, dtype=np.int64)
        score = stages.additive_scores(
            self.main, self.manifest, self.user_table, self.item_table,
            user_idx, item_idx,
        )
        return score + self.latent.predict_pairs(user_idx, item_idx)

    def predict_probabilities(self, user_idx, item_idx) -> np.ndarray:
        if self.task != CLASSIFICATION:
            raise ValidationError("probabilities are defined for classification only")
        return expit(2.0 * self.predict_scores(user_idx, item_idx))

    def predict(self, user_id: str, item_id: str) -> PredictionResult:
        """Warm prediction with the exact per-term decomposition."""
        try:
            u = self.user_table.index_of(user_id)
        except ValidationError:
            raise ValidationError(
                f"unknown user id {user_id!r}; use predict_cold with features"
            ) from None
        try:
            i = self.item_table.index_of(item_id)
        except ValidationError:
            raise ValidationError(
                f"unknown item id {item_id!r}; use predict_cold with features"
            ) from None
        return self._predict_vectors(
            self.user_table.values[u], self.item_table.values[i],
            self.latent.u[u], self.latent.v[i],
        )

    def predict_cold(
        self,
        user_id: str | None = None,
        user_features: dict | None = None,
        item_id: str | None = None,
        item_features: dict | None = None,
    ) -> PredictionResult:
        """Prediction where either side may be a new entity given raw features.

        A new entity is scaled with the stored training parameters (clamped to
        [0, 1]), assigned to the nearest feature-space cluster, and its latent
        row is that cluster's centroid latent row.
        """
        uvec, ulat = self._resolve_side(
            "user", user_id, user_features, self.user_table, self.user_scaling,
            self.user_clusters, self.latent.u, self.latent.user_assign,
        )
        ivec, ilat = self._resolve_side(
            "item", item_id, item_features, self.item_table, self.item_scaling,
            self.item_clusters, self.latent.v, self.latent.item_assign,
        )
        return self._predict_vectors(uvec, ivec, ulat, ilat)

    def _resolve_side(
        self, side, entity_id, features, table, scaling, clusters, factors, assign
    ):
        if (entity_id is None) == (features is None):
            raise ValidationError(f"give exactly one of {side} id or {side} features")
        if entity_id is not None:
            idx = table.index_of(entity_id)
            return table.values[idx], factors[idx]
        vec = encode_row(table, scaling, features)
        k = assign_cluster(vec, clusters)
        centroids = cluster_means(factors, assign, clusters.k)
        return vec, centroids[k]

    def _predict_vectors(self, uvec, ivec, ulat, ilat) -> PredictionResult:
        parts: dict[str, float] = {"intercept": self.main.mu}
        for name in self.main.retained:
            side, feat = self.main.sides[name]
            table, vec = (
                (self.user_table, uvec) if side == "user" else (self.item_table, ivec)
            )
            block = vec[table.columns_for(feat)]
            effect = self.main.effects[name]
            if isinstance(effect, CategoricalEffect):
                parts[name] = float(block @ effect.offsets)
            else:
                parts[name] = forward(effect, block)
        for fu, fi in self.manifest.retained:
            xin = np.array(
                [
                    _pair_value(self.user_table, fu, uvec),
                    _pair_value(self.item_table, fi, ivec),
                ]
            )
            parts[f"{fu} x {fi}"] = forward(self.manifest.interactions[(fu, fi)], xin)
        parts["latent"] = float(np.dot(ulat, ilat))
        score = 0.0
        for v in parts.values():
            score += v
        prob = float(expit(2.0 * score)) if self.task == CLASSIFICATION else None
        return PredictionResult(score, prob, parts)

    def group_latent_means(self):
        """Per-cluster centroid latent rows: (K, r) users, (L, r) items."""
        return (
            cluster_means(self.latent.u, self.latent.user_assign, self.user_clusters.k),
            cluster_means(self.latent.v, self.latent.item_assign, self.item_clusters.k),
        )

    def save(self, path) -> None:
        save(self, path)


def _pair_value(table: FeatureTable, feature: str, vec: np.ndarray) -> float:
    sl = table.columns_for(feature)
    if dict(table.schema)[feature] == NUMERIC:
        return float(vec[sl.start])
    block = vec[sl]
    return float(np.argmax(block) / max(len(block) - 1, 1))


def residuals(response: np.ndarray, partial_score: np.ndarray, task: str) -> np.ndarray:
    """Stagewise working response: plain residual for regression, the
    half-log-odds pseudo-residual 2y/(1+exp(2y F)) (y in {-1,1}) otherwise."""
    response = np.asarray(response, dtype=np.float64)
    partial_score = np.asarray(partial_score, dtype=np.float64)
    if task == CLASSIFICATION:
        y = 2.0 * response - 1.0
        return 2.0 * y * expit(-2.0 * y * partial_score)
    return response - partial_score


def _val_metric(task, targets, scores) -> float:
    if task == CLASSIFICATION:
        return logloss(targets, expit(2.0 * scores))
    return rmse(targets, scores)


def fit(
    split: DataSplit,
    user_table: FeatureTable,
    item_table: FeatureTable,
    config: FitConfig,
) -> GammliModel:
    """Stage 1 (main effects) -> stage 2 (manifest interactions) -> joint
    fine-tune -> feature-space k-means -> latent ALS on the residuals.

    Deterministic for a fixed config.seed: every stage draws its own seed from
    one stream.
    """
    task = split.train.task
    if split.train.n_users != user_table.n_entities:
        raise ValidationError("user table does not match the observation index space")
    if split.train.n_items != item_table.n_entities:
        raise ValidationError("item table does not match the observation index space")

    seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(6)]
    users, user_scaling = scale_features(user_table)
    items, item_scaling = scale_features(item_table)
    train, val = split.train, split.validation

    main, trace1 = stages.fit_main_effects(
        split, users, items, config.train.reseeded(seeds[0]), task
    )
    s1_train = stages.additive_scores(main, None, users, items, train.user_idx, train.item_idx)
    s1_val = stages.additive_scores(main, None, users, items, val.user_idx, val.item_idx)
    val_losses = {"stage1": _val_metric(task, val.response, s1_val)}

    manifest, mu_shift, trace2 = stages.fit_manifest_interactions(
        residuals(train.response, s1_train, task),
        split,
        users,
        items,
        config.train.reseeded(seeds[1]),
        task,
        s1_val,
        max_pairs=config.max_pairs,
    )
    main.mu += mu_shift
    trace3 = stages.fine_tune(
        main, manifest, split, users, items, config.train.reseeded(seeds[2]), task
    )
    s2_train = stages.additive_scores(
        main, manifest, users, items, train.user_idx, train.item_idx
    )
    s2_val = stages.additive_scores(main, manifest, users, items, val.user_idx, val.item_idx)
    val_losses["stage2"] = _val_metric(task, val.response, s2_val)

    user_clusters = kmeans(users.values, config.n_user_groups, seeds[3])
    item_clusters = kmeans(items.values, config.n_item_groups, seeds[4])
    latent = fit_latent(
        train.user_idx,
        train.item_idx,
        residuals(train.response, s2_train, task),
        (train.n_users, train.n_items),
        rank=config.latent_rank,
        lam=config.latent_reg,
        user_assign=user_clusters.assignments,
        item_assign=item_clusters.assignments,
        seed=seeds[5],
        max_iters=config.als_max_iters,
        tol=config.als_tol,
    )
    model = GammliModel(
        task=task,
        user_table=users,
        item_table=items,
        user_scaling=user_scaling,
        item_scaling=item_scaling,
        main=main,
        manifest=manifest,
        latent=latent,
        user_clusters=user_clusters,
        item_clusters=item_clusters,
        config=config,
        traces={"stage1": trace1, "stage2": trace2, "fine_tune": trace3,
                "latent": [
                    (i, r, o)
                    for i, (r, o) in enumerate(
                        zip(latent.rmse_trace, latent.objective_trace), start=1
                    )
                ]},
    )
    val_losses["latent"] = _val_metric(
        task, val.response, model.predict_scores(val.user_idx, val.item_idx)
    )
    model.stage_val_losses = val_losses
    return model


# -- serialization ---------------------------------------------------------------

def _table_to_dict(t: FeatureTable) -> dict:
    return {
        "entity_ids": list(t.entity_ids),
        "schema": [list(p) for p in t.schema],
        "feature_names": list(t.feature_names),
        "values": t.values.tolist(),
        "levels": {k: list(v) for k, v in t.levels.items()},
    }


def _table_from_dict(d: dict) -> FeatureTable:
    return FeatureTable(
        tuple(d["entity_ids"]),
        tuple((n, k) for n, k in d["schema"]),
        tuple(d["feature_names"]),
        np.array(d["values"], dtype=np.float64),
        {k: tuple(v) for k, v in d["levels"].items()},
    )


def _effect_to_dict(effect) -> dict:
    if isinstance(effect, CategoricalEffect):
        return {
            "type": "categorical",
            "levels": list(effect.levels),
            "offsets": effect.offsets.tolist(),
        }
    return {"type": "subnet", **subnet_to_dict(effect)}


def _effect_from_dict(d: dict):
    if d["type"] == "categorical":
        return CategoricalEffect(tuple(d["levels"]), np.array(d["offsets"], dtype=np.float64))
    return subnet_from_dict(d)


def save(model: GammliModel, path) -> None:
    c = model.config
    doc = {
        "meta": {
            "format_version": FORMAT_VERSION,
            "task": model.task,
            "n_users": model.user_table.n_entities,
            "n_items": model.item_table.n_entities,
            "user_table": _table_to_dict(model.user_table),
            "item_table": _table_to_dict(model.item_table),
            "config": {
                "n_user_groups": c.n_user_groups,
                "n_item_groups": c.n_item_groups,
                "latent_reg": c.latent_reg,
                "latent_rank": c.latent_rank,
                "als_max_iters": c.als_max_iters,
                "als_tol": c.als_tol,
                "max_pairs": c.max_pairs,
                "train": {
                    "learning_rate": c.train.learning_rate,
                    "max_epochs": c.train.max_epochs,
                    "fine_tune_epochs": c.train.fine_tune_epochs,
                    "batch_size": c.train.batch_size,
                    "patience": c.train.patience,
                    "validation_fraction": c.train.validation_fraction,
                    "seed": c.train.seed,
                },
                "seed": c.seed,
            },
            "stage_val_losses": model.stage_val_losses,
        },
        "scaling": {
            "user": {k: list(v) for k, v in model.user_scaling.bounds.items()},
            "item": {k: list(v) for k, v in model.item_scaling.bounds.items()},
        },
        "main_effects": {
            "mu": model.main.mu,
            "effects": {n: _effect_to_dict(e) for n, e in model.main.effects.items()},
            "sides": {n: list(s) for n, s in model.main.sides.items()},
            "retained": list(model.main.retained),
            "variation": dict(model.main.variation),
        },
        "manifest_interactions": {
            "interactions": [
                {"user": fu, "item": fi, "net": subnet_to_dict(net)}
                for (fu, fi), net in model.manifest.interactions.items()
            ],
            "retained": [list(k) for k in model.manifest.retained],
            "variation": [
                {"user": fu, "item": fi, "value": v}
                for (fu, fi), v in model.manifest.variation.items()
            ],
        },
        "latent": {
            "u": model.latent.u.tolist(),
            "v": model.latent.v.tolist(),
            "sigma": model.latent.sigma.tolist(),
            "u_star": model.latent.u_star.tolist(),
            "v_star": model.latent.v_star.tolist(),
            "lam": model.latent.lam,
            "rank": model.latent.rank,
            "user_assign": model.latent.user_assign.tolist(),
            "item_assign": model.latent.item_assign.tolist(),
        },
        "clusters": {
            side: {
                "k": cl.k,
                "centroids": cl.centroids.tolist(),
                "assignments": cl.assignments.tolist(),
                "inertia": cl.inertia,
            }
            for side, cl in (("user", model.user_clusters), ("item", model.item_clusters))
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load(path) -> GammliModel:
    """Rebuild a model; predictions are bit-identical to the saved model."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a valid model file ({exc})") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: not a valid model file")
    for section in SECTIONS:
        if section not in doc:
            raise ValidationError(f"{path}: model file missing section {section!r}")
    meta = doc["meta"]
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported model format version {version!r} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    me = doc["main_effects"]
    main = MainEffectsModel(
        mu=float(me["mu"]),
        effects={n: _effect_from_dict(e) for n, e in me["effects"].items()},
        sides={n: (s[0], s[1]) for n, s in me["sides"].items()},
        retained=list(me["retained"]),
        variation={n: float(v) for n, v in me["variation"].items()},
    )
    mi = doc["manifest_interactions"]
    manifest = ManifestModel(
        interactions={
            (e["user"], e["item"]): subnet_from_dict(e["net"]) for e in mi["interactions"]
        },
        retained=[(a, b) for a, b in mi["retained"]],
        variation={(e["user"], e["item"]): float(e["value"]) for e in mi["variation"]},
    )
    la = doc["latent"]
    latent = LatentFactors(
        u=np.array(la["u"], dtype=np.float64),
        v=np.array(la["v"], dtype=np.float64),
        sigma=np.array(la["sigma"], dtype=np.float64),
        u_star=np.array(la["u_star"], dtype=np.float64),
        v_star=np.array(la["v_star"], dtype=np.float64),
        lam=float(la["lam"]),
        rank=int(la["rank"]),
        user_assign=np.array(la["user_assign"], dtype=np.int64),
        item_assign=np.array(la["item_assign"], dtype=np.int64),
    )
    clusters = {}
    for side in ("user", "item"):
        cd = doc["clusters"][side]
        clusters[side] = Clustering(
            int(cd["k"]),
            np.array(cd["centroids"], dtype=np.float64),
            np.array(cd["assignments"], dtype=np.int64),
            float(cd["inertia"]),
        )
    cfg = meta["config"]
    tc = cfg["train"]
    config = FitConfig(
        n_user_groups=int(cfg["n_user_groups"]),
        n_item_groups=int(cfg["n_item_groups"]),
        latent_reg=float(cfg["latent_reg"]),
        latent_rank=int(cfg["latent_rank"]),
        als_max_iters=int(cfg["als_max_iters"]),
        als_tol=float(cfg["als_tol"]),
        max_pairs=int(cfg["max_pairs"]),
        train=TrainConfig(
            learning_rate=float(tc["learning_rate"]),
            max_epochs=int(tc["max_epochs"]),
            fine_tune_epochs=int(tc["fine_tune_epochs"]),
            batch_size=int(tc["batch_size"]),
            patience=int(tc["patience"]),
            validation_fraction=float(tc["validation_fraction"]),
            seed=int(tc["seed"]),
        ),
        seed=int(cfg["seed"]),
    )
    return GammliModel(
        task=meta["task"],
        user_table=_table_from_dict(meta["user_table"]),
        item_table=_table_from_dict(meta["item_table"]),
        user_scaling=ScalingParams(
            {k: (v[0], v[1]) for k, v in doc["scaling"]["user"].items()}
        ),
        item_scaling=ScalingParams(
            {k: (v[0], v[1]) for k, v in doc["scaling"]["item"].items()}
        ),
        main=main,
        manifest=manifest,
        latent=latent,
        user_clusters=clusters["user"],
        item_clusters=clusters["item"],
        config=config,
        stage_val_losses=dict(meta.get("stage_val_losses", {})),
    )
