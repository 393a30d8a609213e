"""Feature tables, observation triples, min-max scaling, and data splits.

CSV layout: the first column is the entity id, remaining columns are features.
Categorical columns are expanded to one-hot indicator columns named
``"<column>=<level>"`` with levels ordered lexicographically; numeric columns
keep their declared name.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

NUMERIC = "numeric"
CATEGORICAL = "categorical"

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASKS = (REGRESSION, CLASSIFICATION)


@dataclass
class FeatureTable:
    """Dense feature matrix for one entity side (users or items).

    ``schema`` lists the declared columns as (name, kind) pairs in file order;
    ``values`` holds the one-hot expanded matrix with rows aligned to
    ``entity_ids`` and columns named by ``feature_names``.
    """

    entity_ids: tuple[str, ...]
    schema: tuple[tuple[str, str], ...]
    feature_names: tuple[str, ...]
    values: np.ndarray
    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.entity_ids) == 0:
            raise ValidationError("feature table has no rows")
        if len(set(self.entity_ids)) != len(self.entity_ids):
            dup = _first_duplicate(self.entity_ids)
            raise ValidationError(f"duplicate entity id {dup!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.entity_ids), len(self.feature_names)):
            raise ValidationError("feature matrix shape does not match ids/columns")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature table contains non-finite values")
        for name, kind in self.schema:
            if kind not in (NUMERIC, CATEGORICAL):
                raise ValidationError(f"unknown column kind {kind!r} for {name!r}")

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    def columns_for(self, name: str) -> slice:
        """Expanded-column slice for one declared feature."""
        kinds = dict(self.schema)
        if name not in kinds:
            raise ValidationError(f"unknown feature {name!r}")
        if kinds[name] == NUMERIC:
            j = self.feature_names.index(name)
            return slice(j, j + 1)
        first = self.feature_names.index(f"{name}={self.levels[name][0]}")
        return slice(first, first + len(self.levels[name]))

    def index_of(self, entity_id: str) -> int:
        try:
            return self._id_index[entity_id]
        except AttributeError:
            self._id_index = {e: i for i, e in enumerate(self.entity_ids)}
            return self.index_of(entity_id)
        except KeyError:
            raise ValidationError(f"unknown entity id {entity_id!r}") from None


@dataclass
class ScalingParams:
    """Per numeric column (min, max) learned from training entities.

    ``scale_value`` clamps to [0, 1] so later (cold-start) inputs outside the
    training range cannot leave the unit interval. Constant columns map to 0.
    """

    bounds: dict[str, tuple[float, float]]

    def scale_value(self, name: str, raw: float) -> float:
        lo, hi = self.bounds[name]
        if hi == lo:
            return 0.0
        return min(1.0, max(0.0, (float(raw) - lo) / (hi - lo)))


@dataclass
class ObservationSet:
    """Aligned (user index, item index, response) triples over an m x n grid."""

    user_idx: np.ndarray
    item_idx: np.ndarray
    response: np.ndarray
    task: str
    n_users: int
    n_items: int

    def __post_init__(self):
        self.user_idx = np.asarray(self.user_idx, dtype=np.int64)
        self.item_idx = np.asarray(self.item_idx, dtype=np.int64)
        self.response = np.asarray(self.response, dtype=np.float64)
        if not (len(self.user_idx) == len(self.item_idx) == len(self.response)):
            raise ValidationError("observation columns have mismatched lengths")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if len(self.user_idx):
            if self.user_idx.min() < 0 or self.user_idx.max() >= self.n_users:
                raise ValidationError("user index out of range")
            if self.item_idx.min() < 0 or self.item_idx.max() >= self.n_items:
                raise ValidationError("item index out of range")
            codes = self.user_idx * self.n_items + self.item_idx
            if len(np.unique(codes)) != len(codes):
                raise ValidationError("duplicate (user, item) observation")
        if not np.all(np.isfinite(self.response)):
            raise ValidationError("non-finite response value")
        if self.task == CLASSIFICATION and not np.all(
            (self.response == 0.0) | (self.response == 1.0)
        ):
            raise ValidationError("classification responses must be 0 or 1")

    def __len__(self) -> int:
        return len(self.response)

    def subset(self, rows: np.ndarray) -> "ObservationSet":
        return ObservationSet(
            self.user_idx[rows],
            self.item_idx[rows],
            self.response[rows],
            self.task,
            self.n_users,
            self.n_items,
        )


@dataclass
class DataSplit:
    """Disjoint train/validation/test observation sets over one index space."""

    train: ObservationSet
    validation: ObservationSet
    test: ObservationSet


def _first_duplicate(items):
    seen = set()
    for x in items:
        if x in seen:
            return x
        seen.add(x)
    return None


def load_feature_table(path, schema: dict[str, str] | None = None) -> FeatureTable:
    """Read a feature CSV (first column = entity id).

    ``schema`` maps declared column names to ``"numeric"``/``"categorical"``.
    With ``schema=None`` every column is taken numeric unless some cell fails
    to parse as a float. Declared columns missing from the header raise a
    schema error; undeclared file columns are ignored.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if len(header) < 2:
        raise ValidationError(f"{path}: need an id column plus at least one feature")
    feat_cols = header[1:]
    for row_i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(
                f"{path}: row {row_i} has {len(row)} cells, expected {len(header)}"
            )
    if schema is None:
        schema = {}
        for j, name in enumerate(feat_cols):
            kind = NUMERIC
            for row in rows:
                try:
                    float(row[1 + j])
                except ValueError:
                    kind = CATEGORICAL
                    break
            schema[name] = kind
    else:
        for name in schema:
            if name not in feat_cols:
                raise ValidationError(f"{path}: declared column {name!r} not in header")

    ids = tuple(row[0] for row in rows)
    declared = tuple((name, schema[name]) for name in feat_cols if name in schema)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    levels: dict[str, tuple[str, ...]] = {}
    for name, kind in declared:
        j = 1 + feat_cols.index(name)
        raw = [row[j] for row in rows]
        if kind == NUMERIC:
            col = np.empty(len(raw))
            for row_i, cell in enumerate(raw):
                try:
                    col[row_i] = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"{path}: row {row_i}, column {name!r}: "
                        f"cannot parse {cell!r} as a number"
                    ) from None
            blocks.append(col[:, None])
            names.append(name)
        else:
            levs = tuple(sorted(set(raw)))
            levels[name] = levs
            pos = {lev: k for k, lev in enumerate(levs)}
            onehot = np.zeros((len(raw), len(levs)))
            for row_i, cell in enumerate(raw):
                onehot[row_i, pos[cell]] = 1.0
            blocks.append(onehot)
            names.extend(f"{name}={lev}" for lev in levs)
    values = np.hstack(blocks) if blocks else np.zeros((len(ids), 0))
    return FeatureTable(ids, declared, tuple(names), values, levels)


def save_feature_table(table: FeatureTable, path) -> None:
    """Write the table back to CSV in its declared (un-expanded) form.

    Floats are written with repr so a reload reproduces the values exactly.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [name for name, _ in table.schema])
        for i, entity in enumerate(table.entity_ids):
            row = [entity]
            for name, kind in table.schema:
                block = table.values[i, table.columns_for(name)]
                if kind == NUMERIC:
                    row.append(repr(float(block[0])))
                else:
                    row.append(table.levels[name][int(np.argmax(block))])
            writer.writerow(row)


def scale_features(table: FeatureTable) -> tuple[FeatureTable, ScalingParams]:
    """Min-max scale each declared numeric column to [0, 1].

    One-hot indicator columns already live in {0, 1} and pass through
    unchanged. Constant numeric columns map to 0.0.
    """
    values = table.values.copy()
    bounds: dict[str, tuple[float, float]] = {}
    for name, kind in table.schema:
        if kind != NUMERIC:
            continue
        sl = table.columns_for(name)
        col = values[:, sl]
        lo, hi = float(col.min()), float(col.max())
        bounds[name] = (lo, hi)
        values[:, sl] = 0.0 if hi == lo else (col - lo) / (hi - lo)
    scaled = FeatureTable(
        table.entity_ids, table.schema, table.feature_names, values, dict(table.levels)
    )
    return scaled, ScalingParams(bounds)


def encode_row(
    table: FeatureTable, params: ScalingParams, raw: dict[str, object]
) -> np.ndarray:
    """Scaled feature vector for a new entity described by one value per
    declared column. Numeric values are clamped to the training [min, max];
    an unseen categorical level is a validation error."""
    vec = np.zeros(len(table.feature_names))
    for name, kind in table.schema:
        if name not in raw:
            raise ValidationError(f"missing feature {name!r}")
        sl = table.columns_for(name)
        if kind == NUMERIC:
            try:
                x = float(raw[name])  # type: ignore[arg-type]
            except (TypeError, ValueError):
                raise ValidationError(f"feature {name!r}: not a number") from None
            if not np.isfinite(x):
                raise ValidationError(f"feature {name!r}: non-finite value")
            vec[sl.start] = params.scale_value(name, x)
        else:
            level = str(raw[name])
            if level not in table.levels[name]:
                raise ValidationError(f"feature {name!r}: unseen level {level!r}")
            vec[sl.start + table.levels[name].index(level)] = 1.0
    extra = set(raw) - {name for name, _ in table.schema}
    if extra:
        raise ValidationError(f"unknown feature {sorted(extra)[0]!r}")
    return vec


def load_observations(
    path, user_ids: tuple[str, ...], item_ids: tuple[str, ...], task: str
) -> ObservationSet:
    """Read an observation CSV (user_id, item_id, response)."""
    umap = {e: i for i, e in enumerate(user_ids)}
    imap = {e: i for i, e in enumerate(item_ids)}
    uu, ii, yy = [], [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        for row_i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}: row {row_i} needs 3 cells")
            u, it, y = row
            if u not in umap:
                raise ValidationError(f"{path}: row {row_i}: unknown user id {u!r}")
            if it not in imap:
                raise ValidationError(f"{path}: row {row_i}: unknown item id {it!r}")
            try:
                yy.append(float(y))
            except ValueError:
                raise ValidationError(
                    f"{path}: row {row_i}: cannot parse response {y!r}"
                ) from None
            uu.append(umap[u])
            ii.append(imap[it])
    return ObservationSet(
        np.array(uu, dtype=np.int64),
        np.array(ii, dtype=np.int64),
        np.array(yy),
        task,
        len(user_ids),
        len(item_ids),
    )


def save_observations(
    obs: ObservationSet, user_ids, item_ids, path, response: np.ndarray | None = None
) -> None:
    vals = obs.response if response is None else response
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "response"])
        for u, i, y in zip(obs.user_idx, obs.item_idx, vals):
            writer.writerow([user_ids[u], item_ids[i], repr(float(y))])


def split_observations(
    obs: ObservationSet, ratios: tuple[float, float, float], seed: int
) -> DataSplit:
    """Random train/validation/test partition with the requested proportions.

    Set sizes are the rounded ratio shares (test takes the remainder), so each
    is within one element of exact. Deterministic for a fixed seed.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError("need three positive split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios sum to {sum(ratios)}, expected 1")
    n = len(obs)
    if n < 3:
        raise ValidationError("need at least 3 observations to split")
    n_train = int(np.floor(ratios[0] * n + 0.5))
    n_val = int(np.floor(ratios[1] * n + 0.5))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ValidationError(
            "split leaves an empty subset; adjust ratios or provide more data"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return DataSplit(
        train=obs.subset(np.sort(perm[:n_train])),
        validation=obs.subset(np.sort(perm[n_train : n_train + n_val])),
        test=obs.subset(np.sort(perm[n_train + n_val :])),
    )
