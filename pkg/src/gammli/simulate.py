"""Synthetic recommendation benchmark with known additive structure.

Users and items each carry five features drawn from per-group Gaussian blobs
(centers uniform in a side-10 cube) and a rank-3 latent vector drawn the same
way from the same group labels. Feature blobs are diffuse (blob_sd) while
latent blobs stay tight (latent_blob_sd), so observed features are only weak
proxies for group membership but the latent block keeps clear group structure.
Features are min-max scaled to [0, 1], latent vectors to [-1, 1]. The
response is

    y = 5*x1 + 5*z1^2 + 0.5*exp(-4*(z2 + x3) + 4)
        + 5*sin(2*pi*x2*z3) + 3*<u, v> + noise

so x1, x2, x3 and z1, z2, z3 matter, x4, x5, z4, z5 are pure noise features,
and the exponential term dominates the scale near z2 + x3 = 0 (it reaches
0.5*e^4 ~= 27.3, an order of magnitude above the other terms). Entries are
kept independently with probability 1 - missing_rate. Classification
binarizes the noisy response at the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import CLASSIFICATION, REGRESSION, FeatureTable, ObservationSet
from .errors import ValidationError

TERM_NAMES = ("5*x1", "5*z1^2", "exp term", "sin term", "latent")


@dataclass
class SimulationConfig:
    n_users: int = 1000
    n_items: int = 1000
    task: str = REGRESSION
    missing_rate: float = 0.9
    n_user_groups: int = 10
    n_item_groups: int = 10
    n_features: int = 5
    latent_rank: int = 3
    noise_sd: float = 1.0
    blob_sd: float = 3.5
    latent_blob_sd: float = 1.0
    center_side: float = 10.0
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValidationError(f"unknown task {self.task!r}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValidationError("missing_rate must lie in [0, 1)")
        if self.n_features < 5 or self.latent_rank < 1:
            raise ValidationError("need at least 5 features and rank >= 1")
        if min(self.noise_sd, self.blob_sd, self.latent_blob_sd) < 0:
            raise ValidationError("spread parameters must be non-negative")
        if min(self.n_users, self.n_items) < max(self.n_user_groups, self.n_item_groups):
            raise ValidationError("fewer entities than groups")


@dataclass
class SyntheticDataset:
    config: SimulationConfig
    users: FeatureTable  # scaled to [0, 1]
    items: FeatureTable
    obs: ObservationSet  # noisy (binarized for classification)
    noiseless: np.ndarray  # pre-noise response per observation
    noisy: np.ndarray  # pre-binarization response per observation
    terms: dict[str, np.ndarray]  # ground-truth term values per observation
    user_latent: np.ndarray  # (m, r) in [-1, 1]
    item_latent: np.ndarray
    user_groups: np.ndarray
    item_groups: np.ndarray


def response_terms(x: np.ndarray, z: np.ndarray, latent_dot: np.ndarray):
    """Ground-truth decomposition; inputs are scaled feature rows."""
    terms = {
        TERM_NAMES[0]: 5.0 * x[..., 0],
        TERM_NAMES[1]: 5.0 * z[..., 0] ** 2,
        TERM_NAMES[2]: 0.5 * np.exp(-4.0 * (z[..., 1] + x[..., 2]) + 4.0),
        TERM_NAMES[3]: 5.0 * np.sin(2.0 * np.pi * x[..., 1] * z[..., 2]),
        TERM_NAMES[4]: 3.0 * latent_dot,
    }
    return terms, sum(terms.values())


def _blobs(rng, n, groups, dim, sd, side):
    labels = rng.permutation(np.arange(n) % groups)
    centers = rng.uniform(0.0, side, size=(groups, dim))
    points = centers[labels] + sd * rng.standard_normal((n, dim))
    return labels, points


def _minmax(points: np.ndarray, lo: float, hi: float) -> np.ndarray:
    mins = points.min(axis=0)
    maxs = points.max(axis=0)
    span = np.where(maxs > mins, maxs - mins, 1.0)
    return lo + (hi - lo) * (points - mins) / span


def _table(prefix: str, ids_prefix: str, points: np.ndarray) -> FeatureTable:
    names = tuple(f"{prefix}{j + 1}" for j in range(points.shape[1]))
    ids = tuple(f"{ids_prefix}{i}" for i in range(len(points)))
    return FeatureTable(ids, tuple((n, "numeric") for n in names), names, points)


def generate(config: SimulationConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    c = config
    user_groups, x_raw = _blobs(
        rng, c.n_users, c.n_user_groups, c.n_features, c.blob_sd, c.center_side
    )
    item_groups, z_raw = _blobs(
        rng, c.n_items, c.n_item_groups, c.n_features, c.blob_sd, c.center_side
    )
    # latent vectors share the feature group labels so feature-space clusters
    # are informative about latent structure (the cold-start premise)
    u_raw = rng.uniform(0.0, c.center_side, (c.n_user_groups, c.latent_rank))[
        user_groups
    ] + c.latent_blob_sd * rng.standard_normal((c.n_users, c.latent_rank))
    v_raw = rng.uniform(0.0, c.center_side, (c.n_item_groups, c.latent_rank))[
        item_groups
    ] + c.latent_blob_sd * rng.standard_normal((c.n_items, c.latent_rank))

    x = _minmax(x_raw, 0.0, 1.0)
    z = _minmax(z_raw, 0.0, 1.0)
    u = _minmax(u_raw, -1.0, 1.0)
    v = _minmax(v_raw, -1.0, 1.0)

    mask = rng.random((c.n_users, c.n_items)) >= c.missing_rate
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise ValidationError("missing rate left no observed entries")

    terms, noiseless = response_terms(
        x[rows], z[cols], np.einsum("ij,ij->i", u[rows], v[cols])
    )
    noisy = noiseless + c.noise_sd * rng.standard_normal(len(rows))
    response = (
        (noisy > c.threshold).astype(np.float64) if c.task == CLASSIFICATION else noisy
    )
    obs = ObservationSet(rows, cols, response, c.task, c.n_users, c.n_items)
    return SyntheticDataset(
        config=c,
        users=_table("x", "u", x),
        items=_table("z", "i", z),
        obs=obs,
        noiseless=noiseless,
        noisy=noisy,
        terms=terms,
        user_latent=u,
        item_latent=v,
        user_groups=user_groups,
        item_groups=item_groups,
    )


@dataclass
class ColdSplit:
    """Visible sub-dataset for fitting plus the held-out cold observations.

    ``cold_obs`` keeps the original index space; cold entity features come
    from the original tables. Every observation touching a held-out user or
    item is cold.
    """

    visible: SyntheticDataset
    cold_obs: ObservationSet
    cold_noiseless: np.ndarray
    cold_users: np.ndarray  # original user indices held out
    cold_items: np.ndarray


def cold_start_split(dataset: SyntheticDataset, fraction: float, seed: int) -> ColdSplit:
    """Remove a random ``fraction`` of users and of items entirely from the
    training data; their observations form the cold test set."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("cold-start fraction must lie in (0, 1)")
    c = dataset.config
    rng = np.random.default_rng(seed)
    n_cu = int(np.floor(fraction * c.n_users + 0.5))
    n_ci = int(np.floor(fraction * c.n_items + 0.5))
    if n_cu >= c.n_users or n_ci >= c.n_items:
        raise ValidationError("cold-start fraction leaves no training entities")
    cold_users = np.sort(rng.choice(c.n_users, size=n_cu, replace=False))
    cold_items = np.sort(rng.choice(c.n_items, size=n_ci, replace=False))
    user_cold = np.zeros(c.n_users, dtype=bool)
    user_cold[cold_users] = True
    item_cold = np.zeros(c.n_items, dtype=bool)
    item_cold[cold_items] = True

    obs = dataset.obs
    cold_mask = user_cold[obs.user_idx] | item_cold[obs.item_idx]
    if not cold_mask.any():
        raise ValidationError("no observations fall in the cold set")
    if cold_mask.all():
        raise ValidationError("cold split leaves no training observations")

    keep_users = np.flatnonzero(~user_cold)
    keep_items = np.flatnonzero(~item_cold)
    new_user = np.full(c.n_users, -1, dtype=np.int64)
    new_user[keep_users] = np.arange(len(keep_users))
    new_item = np.full(c.n_items, -1, dtype=np.int64)
    new_item[keep_items] = np.arange(len(keep_items))

    vis = np.flatnonzero(~cold_mask)
    visible_obs = ObservationSet(
        new_user[obs.user_idx[vis]],
        new_item[obs.item_idx[vis]],
        obs.response[vis],
        obs.task,
        len(keep_users),
        len(keep_items),
    )
    sub = lambda t, keep: FeatureTable(
        tuple(t.entity_ids[i] for i in keep),
        t.schema,
        t.feature_names,
        t.values[keep],
        dict(t.levels),
    )
    visible = SyntheticDataset(
        config=replace(c, n_users=len(keep_users), n_items=len(keep_items)),
        users=sub(dataset.users, keep_users),
        items=sub(dataset.items, keep_items),
        obs=visible_obs,
        noiseless=dataset.noiseless[vis],
        noisy=dataset.noisy[vis],
        terms={k: t[vis] for k, t in dataset.terms.items()},
        user_latent=dataset.user_latent[keep_users],
        item_latent=dataset.item_latent[keep_items],
        user_groups=dataset.user_groups[keep_users],
        item_groups=dataset.item_groups[keep_items],
    )
    cold = np.flatnonzero(cold_mask)
    return ColdSplit(
        visible=visible,
        cold_obs=obs.subset(cold),
        cold_noiseless=dataset.noiseless[cold],
        cold_users=cold_users,
        cold_items=cold_items,
    )
