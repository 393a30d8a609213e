import json

import pytest

from gammli.cli import main

FAST_SETS = [
    "--set", "train.learning_rate=0.02",
    "--set", "train.max_epochs=25",
    "--set", "train.fine_tune_epochs=10",
    "--set", "train.patience=8",
    "--set", "fit.n_user_groups=3",
    "--set", "fit.n_item_groups=3",
    "--set", "fit.latent_rank=2",
    "--set", "fit.als_max_iters=25",
]


def simulate_args(out, extra=()):
    return [
        "simulate", "--out", str(out), "--seed", "0",
        "--set", "n_users=40", "--set", "n_items=30",
        "--set", "missing_rate=0.5", "--set", "n_user_groups=3",
        "--set", "n_item_groups=3", "--set", "noise_sd=0.5",
        *extra,
    ]


def data_args(data_dir):
    return [
        "--users", str(data_dir / "users.csv"),
        "--items", str(data_dir / "items.csv"),
        "--observations", str(data_dir / "observations.csv"),
        "--task", "regression",
    ]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(simulate_args(data)) == 0
    run = root / "run"
    assert main(["train", *data_args(data), "--out", str(run),
                 "--seed", "0", *FAST_SETS]) == 0
    return data, run


def test_simulate_writes_dataset(pipeline):
    data, _ = pipeline
    for name in ("users.csv", "items.csv", "observations.csv", "truth.csv"):
        assert (data / name).exists(), name
    assert len((data / "users.csv").read_text().splitlines()) == 41
    obs_lines = (data / "observations.csv").read_text().splitlines()
    truth_lines = (data / "truth.csv").read_text().splitlines()
    assert len(obs_lines) == len(truth_lines)
    # same pairs, different response column
    assert [l.rsplit(",", 1)[0] for l in obs_lines] == [
        l.rsplit(",", 1)[0] for l in truth_lines
    ]


def test_simulate_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(simulate_args(a)) == 0
    assert main(simulate_args(b)) == 0
    for name in ("users.csv", "items.csv", "observations.csv", "truth.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_outputs(pipeline, capsys):
    data, run = pipeline
    assert (run / "model.json").exists()
    trace = (run / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "stage,epoch,train_loss,val_loss"
    stages_seen = {line.split(",")[0] for line in trace[1:]}
    assert {"stage1", "stage2", "latent"} <= stages_seen


def test_predict_decomposition(pipeline, capsys):
    data, run = pipeline
    assert main(["predict", "--model", str(run / "model.json"),
                 "--user", "u0", "--item", "i0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["probability"] is None
    assert "intercept" in out["decomposition"] and "latent" in out["decomposition"]
    total = sum(out["decomposition"].values())
    assert total == pytest.approx(out["score"], abs=1e-12)


def test_predict_unknown_id_exits_2(pipeline, capsys):
    _, run = pipeline
    assert main(["predict", "--model", str(run / "model.json"),
                 "--user", "ghost", "--item", "i0"]) == 2
    assert "predict_cold" in capsys.readouterr().err


def test_predict_cold_feature_route(pipeline, capsys):
    _, run = pipeline
    feats = json.dumps({f"x{j}": 0.5 for j in range(1, 6)})
    assert main(["predict-cold", "--model", str(run / "model.json"),
                 "--user-features", feats, "--item", "i3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert "latent" in out["decomposition"]
    assert out["score"] == pytest.approx(sum(out["decomposition"].values()),
                                         abs=1e-12)


def test_explain_bundle(pipeline, tmp_path, capsys):
    data, run = pipeline
    out_dir = tmp_path / "report"
    assert main(["explain", "--model", str(run / "model.json"),
                 "--observations", str(data / "observations.csv"),
                 "--out", str(out_dir), "--pair", "u0,i0",
                 "--grid-size", "12"]) == 0
    listed = json.loads(capsys.readouterr().out)["files"]
    assert "importance.json" in listed
    assert "local_u0_i0.json" in listed
    doc = json.loads((out_dir / "importance.json").read_text())
    assert sum(t["ratio"] for t in doc["terms"]) == pytest.approx(1.0, abs=1e-9)


def test_evaluate_with_truth(pipeline, capsys):
    data, run = pipeline
    assert main(["evaluate", "--model", str(run / "model.json"),
                 "--observations", str(data / "observations.csv"),
                 "--truth", str(data / "truth.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"rmse", "mae"}
    assert out["rmse"] >= out["mae"] > 0


def test_evaluate_rejects_mismatched_truth(pipeline, tmp_path, capsys):
    data, run = pipeline
    lines = (data / "truth.csv").read_text().splitlines()
    shuffled = [lines[0]] + lines[2:] + [lines[1]]
    bad = tmp_path / "truth.csv"
    bad.write_text("\n".join(shuffled) + "\n")
    assert main(["evaluate", "--model", str(run / "model.json"),
                 "--observations", str(data / "observations.csv"),
                 "--truth", str(bad)]) == 2
    assert "same pairs" in capsys.readouterr().err


def test_baseline_command(pipeline, capsys):
    data, _ = pipeline
    assert main(["baseline", *data_args(data), "--seed", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"rmse", "mae", "lam"}
    assert out["rmse"] >= out["mae"]


def test_tune_command(pipeline, tmp_path, capsys):
    data, _ = pipeline
    out_dir = tmp_path / "tune"
    assert main(["tune", *data_args(data), "--out", str(out_dir), "--seed", "0",
                 *FAST_SETS,
                 "--set", "tune.user_groups_min=2", "--set", "tune.user_groups_max=3",
                 "--set", "tune.item_groups_min=2", "--set", "tune.item_groups_max=3",
                 "--set", "tune.latent_reg_min=0.0", "--set", "tune.latent_reg_max=2.0",
                 "--set", "tune.grid_points=2", "--set", "tune.iterations=1"]) == 0
    best = json.loads(capsys.readouterr().out)
    assert 2 <= best["user_groups"] <= 3
    assert 2 <= best["item_groups"] <= 3
    trace = (out_dir / "tune_trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,")
    assert len(trace) > 1


def test_config_file_and_set_precedence(tmp_path, capsys):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text(
        "# synthetic benchmark\n"
        "n_users = 40\n"
        "n_items = 30   # comment after value\n"
        "missing_rate = 0.5\n"
        "n_user_groups = 3\n"
        "n_item_groups = 3\n"
    )
    out = tmp_path / "data"
    assert main(["simulate", "--out", str(out), "--config", str(cfg),
                 "--set", "n_users=35"]) == 0
    assert len((out / "users.csv").read_text().splitlines()) == 36  # --set wins
    assert len((out / "items.csv").read_text().splitlines()) == 31


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "x"),
                 "--set", "bogus_knob=1"]) == 2
    err = capsys.readouterr().err
    assert "unknown config key" in err and "n_users" in err


def test_missing_input_exits_2(tmp_path, capsys):
    assert main(["train", "--users", str(tmp_path / "none.csv"),
                 "--items", str(tmp_path / "none2.csv"),
                 "--observations", str(tmp_path / "none3.csv"),
                 "--task", "regression", "--out", str(tmp_path / "run")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_unexpected_error_exits_1(tmp_path, capsys):
    broken = tmp_path / "model.json"
    broken.write_text(json.dumps({
        "meta": {"format_version": 1}, "scaling": {}, "main_effects": {},
        "manifest_interactions": {}, "latent": {}, "clusters": {},
    }))
    assert main(["predict", "--model", str(broken),
                 "--user", "u0", "--item", "i0"]) == 1
    assert "error:" in capsys.readouterr().err


def test_experiment_deterministic_metrics(tmp_path):
    args = lambda out, seed: [
        "experiment", "--out", str(out), "--seed", seed,
        "--set", "n_users=35", "--set", "n_items=25",
        "--set", "missing_rate=0.5", "--set", "n_user_groups=3",
        "--set", "n_item_groups=3", "--set", "noise_sd=0.5",
        "--set", "repeats=2", "--set", "include_baseline=true",
        "--set", "cold_fraction=0.15",
        *FAST_SETS,
    ]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(args(a, "0")) == 0
    assert main(args(b, "0")) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.json").exists() and (a / "loss_trace.csv").exists()
    assert main(args(c, "1")) == 0
    assert (a / "metrics.csv").read_bytes() != (c / "metrics.csv").read_bytes()

    lines = (a / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "repeat"
    assert "rmse" in header
    tags = [l.split(",")[0] for l in lines[1:]]
    assert tags == ["1", "2", "mean", "sd"]
