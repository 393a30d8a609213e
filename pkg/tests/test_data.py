import numpy as np
import pytest

from gammli.data import (
    CATEGORICAL,
    CLASSIFICATION,
    NUMERIC,
    REGRESSION,
    FeatureTable,
    ObservationSet,
    ScalingParams,
    encode_row,
    load_feature_table,
    load_observations,
    save_feature_table,
    save_observations,
    scale_features,
    split_observations,
)
from gammli.errors import ValidationError


def table(values, ids=None, names=None):
    values = np.asarray(values, dtype=np.float64)
    ids = ids or tuple(f"e{i}" for i in range(values.shape[0]))
    names = names or tuple(f"f{j}" for j in range(values.shape[1]))
    schema = tuple((n, NUMERIC) for n in names)
    return FeatureTable(tuple(ids), schema, tuple(names), values)


def test_scale_maps_min_to_zero_and_max_to_one():
    t = table([[2.0], [4.0], [6.0]])
    scaled, params = scale_features(t)
    assert scaled.values[:, 0].tolist() == [0.0, 0.5, 1.0]
    assert params.bounds["f0"] == (2.0, 6.0)


def test_scale_constant_column_goes_to_zero():
    scaled, params = scale_features(table([[5.0], [5.0]]))
    assert scaled.values[:, 0].tolist() == [0.0, 0.0]
    assert params.scale_value("f0", 5.0) == 0.0


def test_stored_params_scale_and_clamp_new_values():
    params = ScalingParams({"f0": (0.0, 8.0)})
    assert params.scale_value("f0", 4.0) == 0.5
    assert params.scale_value("f0", 8.0) == 1.0
    assert params.scale_value("f0", 12.0) == 1.0  # clamped
    assert params.scale_value("f0", -3.0) == 0.0


def test_scaling_leaves_onehot_columns_alone():
    t = FeatureTable(
        ("a", "b"),
        (("x", NUMERIC), ("c", CATEGORICAL)),
        ("x", "c=hi", "c=lo"),
        np.array([[10.0, 1.0, 0.0], [20.0, 0.0, 1.0]]),
        {"c": ("hi", "lo")},
    )
    scaled, params = scale_features(t)
    assert scaled.values[:, 1:].tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert "c" not in params.bounds


def test_duplicate_entity_id_rejected():
    with pytest.raises(ValidationError, match="duplicate entity id 'a'"):
        table([[1.0], [2.0]], ids=("a", "a"))


def test_index_of_unknown_id():
    t = table([[1.0]])
    assert t.index_of("e0") == 0
    with pytest.raises(ValidationError, match="unknown entity id"):
        t.index_of("nope")


def test_columns_for_categorical_block():
    t = FeatureTable(
        ("a",),
        (("x", NUMERIC), ("c", CATEGORICAL)),
        ("x", "c=p", "c=q", "c=r"),
        np.array([[1.0, 0.0, 1.0, 0.0]]),
        {"c": ("p", "q", "r")},
    )
    assert t.columns_for("x") == slice(0, 1)
    assert t.columns_for("c") == slice(1, 4)


def test_encode_row_scales_and_one_hots():
    t = FeatureTable(
        ("a", "b"),
        (("x", NUMERIC), ("c", CATEGORICAL)),
        ("x", "c=hi", "c=lo"),
        np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]),
        {"c": ("hi", "lo")},
    )
    params = ScalingParams({"x": (0.0, 10.0)})
    vec = encode_row(t, params, {"x": 5.0, "c": "lo"})
    assert vec.tolist() == [0.5, 0.0, 1.0]


@pytest.mark.parametrize(
    "raw,message",
    [
        ({"c": "hi"}, "missing feature 'x'"),
        ({"x": "abc", "c": "hi"}, "not a number"),
        ({"x": float("inf"), "c": "hi"}, "non-finite"),
        ({"x": 1.0, "c": "unknown"}, "unseen level"),
        ({"x": 1.0, "c": "hi", "zz": 1.0}, "unknown feature 'zz'"),
    ],
)
def test_encode_row_rejects_bad_input(raw, message):
    t = FeatureTable(
        ("a",),
        (("x", NUMERIC), ("c", CATEGORICAL)),
        ("x", "c=hi", "c=lo"),
        np.array([[0.0, 1.0, 0.0]]),
        {"c": ("hi", "lo")},
    )
    with pytest.raises(ValidationError, match=message):
        encode_row(t, ScalingParams({"x": (0.0, 1.0)}), raw)


def test_load_feature_table_infers_kinds(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,age,color\nu1,3.5,red\nu2,4.0,blue\n")
    t = load_feature_table(p)
    assert dict(t.schema) == {"age": NUMERIC, "color": CATEGORICAL}
    assert t.feature_names == ("age", "color=blue", "color=red")  # levels sorted
    assert t.values[0].tolist() == [3.5, 0.0, 1.0]


def test_load_feature_table_parse_error_names_row_and_column(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,age\nu1,3.5\nu2,oops\n")
    with pytest.raises(ValidationError, match=r"row 1, column 'age'"):
        load_feature_table(p, schema={"age": NUMERIC})


def test_load_feature_table_missing_declared_column(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,age\nu1,3.5\n")
    with pytest.raises(ValidationError, match="declared column 'weight'"):
        load_feature_table(p, schema={"weight": NUMERIC})


def test_feature_table_roundtrip_is_exact(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,age,color\nu1,0.1,red\nu2,4.000000001,blue\nu3,-2.5,red\n")
    t = load_feature_table(p)
    q = tmp_path / "copy.csv"
    save_feature_table(t, q)
    t2 = load_feature_table(q, schema=dict(t.schema))
    assert t2.entity_ids == t.entity_ids
    assert t2.feature_names == t.feature_names
    assert np.array_equal(t2.values, t.values)


def test_observations_roundtrip(tmp_path):
    obs = ObservationSet([0, 1, 1], [1, 0, 2], [0.25, -1.5, 3.0], REGRESSION, 2, 3)
    p = tmp_path / "obs.csv"
    save_observations(obs, ("u0", "u1"), ("i0", "i1", "i2"), p)
    back = load_observations(p, ("u0", "u1"), ("i0", "i1", "i2"), REGRESSION)
    assert np.array_equal(back.user_idx, obs.user_idx)
    assert np.array_equal(back.item_idx, obs.item_idx)
    assert np.array_equal(back.response, obs.response)


def test_load_observations_rejects_unknown_ids(tmp_path):
    p = tmp_path / "obs.csv"
    p.write_text("user_id,item_id,response\nu9,i0,1.0\n")
    with pytest.raises(ValidationError, match="unknown user id 'u9'"):
        load_observations(p, ("u0",), ("i0",), REGRESSION)


def test_observation_set_validations():
    with pytest.raises(ValidationError, match="duplicate"):
        ObservationSet([0, 0], [1, 1], [1.0, 2.0], REGRESSION, 2, 2)
    with pytest.raises(ValidationError, match="out of range"):
        ObservationSet([0, 2], [0, 0], [1.0, 2.0], REGRESSION, 2, 2)
    with pytest.raises(ValidationError, match="0 or 1"):
        ObservationSet([0], [0], [0.5], CLASSIFICATION, 1, 1)
    with pytest.raises(ValidationError, match="non-finite"):
        ObservationSet([0], [0], [float("nan")], REGRESSION, 1, 1)


def grid_obs(n_users, n_items, seed=0):
    rng = np.random.default_rng(seed)
    u, i = np.meshgrid(np.arange(n_users), np.arange(n_items), indexing="ij")
    return ObservationSet(
        u.ravel(), i.ravel(), rng.standard_normal(n_users * n_items),
        REGRESSION, n_users, n_items,
    )


def test_split_sizes_match_rounded_ratios():
    obs = grid_obs(2, 5)  # n = 10
    split = split_observations(obs, (0.8, 0.1, 0.1), seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (8, 1, 1)


def test_split_sizes_within_one_of_exact():
    obs = grid_obs(100, 37)
    n = len(obs)
    split = split_observations(obs, (0.61, 0.22, 0.17), seed=3)
    assert abs(len(split.train) - 0.61 * n) <= 1
    assert abs(len(split.validation) - 0.22 * n) <= 1
    assert abs(len(split.test) - 0.17 * n) <= 1


def test_split_is_disjoint_and_covers_everything():
    obs = grid_obs(20, 20, seed=1)
    split = split_observations(obs, (0.6, 0.2, 0.2), seed=7)
    seen = set()
    for part in (split.train, split.validation, split.test):
        codes = set((part.user_idx * 20 + part.item_idx).tolist())
        assert not (codes & seen)
        seen |= codes
    assert len(seen) == len(obs)


def test_split_deterministic_for_seed():
    obs = grid_obs(15, 15, seed=2)
    a = split_observations(obs, (0.6, 0.2, 0.2), seed=11)
    b = split_observations(obs, (0.6, 0.2, 0.2), seed=11)
    c = split_observations(obs, (0.6, 0.2, 0.2), seed=12)
    assert np.array_equal(a.train.user_idx, b.train.user_idx)
    assert np.array_equal(a.train.response, b.train.response)
    assert not np.array_equal(a.train.user_idx, c.train.user_idx)


def test_split_rejects_bad_ratios_and_tiny_data():
    obs = grid_obs(3, 3)
    with pytest.raises(ValidationError, match="sum"):
        split_observations(obs, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ValidationError, match="positive"):
        split_observations(obs, (1.0, 0.0, 0.0), seed=0)
    tiny = ObservationSet([0, 0], [0, 1], [1.0, 2.0], REGRESSION, 1, 2)
    with pytest.raises(ValidationError, match="at least 3"):
        split_observations(tiny, (0.6, 0.2, 0.2), seed=0)
    with pytest.raises(ValidationError, match="empty subset"):
        split_observations(grid_obs(1, 5), (0.9, 0.05, 0.05), seed=0)
