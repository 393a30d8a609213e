"""Interpretation tools: importance ratios, effect curves, group summaries.

Importance is variation share on the training pairs: each retained effect
contributes D = sum(value^2) / (n_obs - 1) (effects are mean-centered over the
training pairs by construction, the latent term is centered here), and the
importance ratio is D over the total across all retained effects plus the
latent block. Ratios sum to one.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np

from . import stages
from .data import NUMERIC, ObservationSet
from .errors import ValidationError
from .latent import cluster_means
from .model import GammliModel
from .stages import CategoricalEffect
from .subnet import forward_batch


@dataclass
class ImportanceReport:
    ratios: dict[str, float]   # name -> share of total variation, sums to 1
    variations: dict[str, float]
    total: float


def _latent_variation(model: GammliModel, obs: ObservationSet) -> float:
    vals = model.latent.predict_pairs(obs.user_idx, obs.item_idx)
    return stages.variation(vals - vals.mean())


def importance_ratios(model: GammliModel, train: ObservationSet) -> ImportanceReport:
    """Variation shares of every retained effect plus the latent block,
    computed fresh on the given training pairs."""
    if len(train) < 2:
        raise ValidationError("importance needs at least two training pairs")
    variations: dict[str, float] = {}
    for name in model.main.retained:
        vals = stages.main_effect_values(
            model.main, model.user_table, model.item_table,
            train.user_idx, train.item_idx, names=[name],
        )[name]
        variations[name] = stages.variation(vals)
    if model.manifest.retained:
        per_pair = stages.manifest_values(
            model.manifest, model.user_table, model.item_table,
            train.user_idx, train.item_idx, pairs=model.manifest.retained,
        )
        for (fu, fi), vals in per_pair.items():
            variations[f"{fu} x {fi}"] = stages.variation(vals)
    variations["latent"] = _latent_variation(model, train)
    total = float(sum(variations.values()))
    if total <= 0:
        raise ValidationError("model has no variation to attribute")
    ratios = {k: v / total for k, v in variations.items()}
    return ImportanceReport(ratios, variations, total)


@dataclass
class EffectCurve:
    feature: str
    side: str
    kind: str
    retained: bool
    grid: np.ndarray          # scaled inputs (numeric) or level indices
    values: np.ndarray        # effect output at each grid point
    levels: tuple[str, ...]   # categorical only, else empty
    density_edges: np.ndarray  # histogram of the feature over training pairs
    density_counts: np.ndarray


def _entity_values_for_obs(model, side, feature, train):
    table = model.user_table if side == "user" else model.item_table
    idx = train.user_idx if side == "user" else train.item_idx
    block = table.values[:, table.columns_for(feature)]
    return table, block[idx]


def main_effect_curve(
    model: GammliModel, name: str, train: ObservationSet, grid_size: int = 100
) -> EffectCurve:
    """Shape of one fitted main effect over its input range, with the empirical
    distribution of that input across training pairs. Pruned effects keep their
    fitted shape and are flagged instead of being zeroed."""
    if name not in model.main.effects:
        raise ValidationError(f"unknown main effect {name!r}")
    side, feature = model.main.sides[name]
    effect = model.main.effects[name]
    table, obs_block = _entity_values_for_obs(model, side, feature, train)
    retained = name in model.main.retained
    if isinstance(effect, CategoricalEffect):
        counts = obs_block.sum(axis=0)
        return EffectCurve(
            feature, side, "categorical", retained,
            grid=np.arange(len(effect.levels), dtype=np.float64),
            values=effect.offsets.copy(),
            levels=effect.levels,
            density_edges=np.arange(len(effect.levels) + 1, dtype=np.float64),
            density_counts=counts,
        )
    grid = np.linspace(0.0, 1.0, grid_size)
    values = forward_batch(effect, grid)
    counts, edges = np.histogram(obs_block[:, 0], bins=20, range=(0.0, 1.0))
    return EffectCurve(
        feature, side, "numeric", retained, grid, values, (),
        density_edges=edges, density_counts=counts.astype(np.float64),
    )


@dataclass
class InteractionSurface:
    user_feature: str
    item_feature: str
    retained: bool
    user_grid: np.ndarray
    item_grid: np.ndarray
    values: np.ndarray  # (len(user_grid), len(item_grid))


def _pair_grid(table, feature, grid_size):
    if dict(table.schema)[feature] == NUMERIC:
        return np.linspace(0.0, 1.0, grid_size)
    n_levels = len(table.levels[feature])
    return np.arange(n_levels, dtype=np.float64) / max(n_levels - 1, 1)


def interaction_surface(
    model: GammliModel, user_feature: str, item_feature: str, grid_size: int = 50
) -> InteractionSurface:
    key = (user_feature, item_feature)
    if key not in model.manifest.interactions:
        raise ValidationError(f"unknown interaction {user_feature!r} x {item_feature!r}")
    net = model.manifest.interactions[key]
    ug = _pair_grid(model.user_table, user_feature, grid_size)
    ig = _pair_grid(model.item_table, item_feature, grid_size)
    uu, ii = np.meshgrid(ug, ig, indexing="ij")
    flat = np.column_stack([uu.ravel(), ii.ravel()])
    values = forward_batch(net, flat).reshape(len(ug), len(ig))
    return InteractionSurface(
        user_feature, item_feature, key in model.manifest.retained, ug, ig, values
    )


def group_interaction_matrix(model: GammliModel) -> np.ndarray:
    """(K, L) matrix of latent scores between user and item group centroids.

    Entry (k, l) is exactly the latent term a cold user in group k gets with a
    cold item in group l.
    """
    mean_u, mean_v = model.group_latent_means()
    out = np.empty((mean_u.shape[0], mean_v.shape[0]))
    # per-pair dot products, matching the scalar path used in cold prediction
    for k in range(mean_u.shape[0]):
        for l in range(mean_v.shape[0]):
            out[k, l] = float(np.dot(mean_u[k], mean_v[l]))
    return out


@dataclass
class GroupProfile:
    side: str
    sizes: np.ndarray            # entities per cluster
    feature_names: tuple[str, ...]
    centers: np.ndarray          # (k, d) mean scaled features per cluster


def group_profiles(model: GammliModel) -> tuple[GroupProfile, GroupProfile]:
    out = []
    for side, table, cl in (
        ("user", model.user_table, model.user_clusters),
        ("item", model.item_table, model.item_clusters),
    ):
        sizes = np.bincount(cl.assignments, minlength=cl.k).astype(np.float64)
        centers = np.zeros((cl.k, table.values.shape[1]))
        np.add.at(centers, cl.assignments, table.values)
        centers /= np.maximum(sizes, 1.0)[:, None]
        out.append(GroupProfile(side, sizes, table.feature_names, centers))
    return out[0], out[1]


def local_explanation(model: GammliModel, user_id: str, item_id: str) -> dict:
    """Per-term contributions for one prediction, largest magnitude first.
    The contributions sum to the link-scale score."""
    result = model.predict(user_id, item_id)
    ordered = sorted(result.decomposition.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
    return {
        "user": user_id,
        "item": item_id,
        "score": result.score,
        "probability": result.probability,
        "contributions": [{"term": k, "value": v} for k, v in ordered],
    }


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]", "_", name)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(c) for c in row) + "\n")


def _cell(c) -> str:
    if isinstance(c, float):
        return repr(c)
    return str(c)


def write_report(
    model: GammliModel,
    train: ObservationSet,
    out_dir: str,
    pairs: list[tuple[str, str]] | None = None,
    grid_size: int = 100,
) -> list[str]:
    """Dump the full explanation bundle to a directory; returns written paths.

    importance.json, one main_<feature>.csv per fitted main effect, one
    pair_<f1>__<f2>.csv per retained interaction, group_matrix.csv,
    group_profiles.csv, and local_<user>_<item>.json for requested pairs.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    report = importance_ratios(model, train)
    path = os.path.join(out_dir, "importance.json")
    with open(path, "w") as fh:
        json.dump(
            {
                "total_variation": report.total,
                "terms": [
                    {"term": k, "ratio": report.ratios[k], "variation": report.variations[k]}
                    for k in sorted(report.ratios, key=lambda n: -report.ratios[n])
                ],
            },
            fh,
            indent=2,
        )
    written.append(path)

    for name in model.main.effects:
        curve = main_effect_curve(model, name, train, grid_size=grid_size)
        path = os.path.join(out_dir, f"main_{_safe(name)}.csv")
        n = max(len(curve.grid), len(curve.density_counts))
        rows = []
        for i in range(n):
            rows.append(
                [
                    repr(float(curve.grid[i])) if i < len(curve.grid) else "",
                    repr(float(curve.values[i])) if i < len(curve.values) else "",
                    curve.levels[i] if i < len(curve.levels) else "",
                    repr(float(curve.density_edges[i])) if i < len(curve.density_counts) else "",
                    repr(float(curve.density_counts[i])) if i < len(curve.density_counts) else "",
                ]
            )
        _write_csv(
            path,
            [f"# {curve.side}:{curve.feature} kind={curve.kind} retained={curve.retained}",
             "value", "level", "bin_left", "bin_count"],
            rows,
        )
        written.append(path)

    for fu, fi in model.manifest.retained:
        surface = interaction_surface(model, fu, fi, grid_size=max(grid_size // 2, 2))
        path = os.path.join(out_dir, f"pair_{_safe(fu)}__{_safe(fi)}.csv")
        header = ["user_value\\item_value"] + [repr(float(v)) for v in surface.item_grid]
        rows = [
            [repr(float(surface.user_grid[r]))] + [repr(float(v)) for v in surface.values[r]]
            for r in range(len(surface.user_grid))
        ]
        _write_csv(path, header, rows)
        written.append(path)

    matrix = group_interaction_matrix(model)
    path = os.path.join(out_dir, "group_matrix.csv")
    header = ["user_group\\item_group"] + [f"item_g{l}" for l in range(matrix.shape[1])]
    rows = [[f"user_g{k}"] + [repr(float(v)) for v in matrix[k]] for k in range(matrix.shape[0])]
    _write_csv(path, header, rows)
    written.append(path)

    users, items = group_profiles(model)
    path = os.path.join(out_dir, "group_profiles.csv")
    header = ["side", "group", "size"] + ["mean_scaled_feature", "feature"]
    rows = []
    for profile in (users, items):
        for g in range(len(profile.sizes)):
            for j, fname in enumerate(profile.feature_names):
                rows.append(
                    [profile.side, str(g), repr(float(profile.sizes[g])),
                     repr(float(profile.centers[g, j])), fname]
                )
    _write_csv(path, header, rows)
    written.append(path)

    for user_id, item_id in pairs or []:
        local = local_explanation(model, user_id, item_id)
        path = os.path.join(out_dir, f"local_{_safe(user_id)}_{_safe(item_id)}.json")
        with open(path, "w") as fh:
            json.dump(local, fh, indent=2)
        written.append(path)
    return written
