"""Command line front end.

Configuration is a flat ``key = value`` file plus repeatable ``--set key=value``
overrides; one ``--seed`` drives every stage through a seed stream. Exit codes:
0 success, 2 bad input, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np
from scipy.special import expit

from . import explain as explain_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import simulate as simulate_mod
from . import tune as tune_mod
from .data import (
    CLASSIFICATION,
    NUMERIC,
    REGRESSION,
    load_feature_table,
    load_observations,
    save_feature_table,
    save_observations,
    split_observations,
)
from .errors import ValidationError
from .explain import _write_csv
from .model import FitConfig
from .subnet import TrainConfig

SIM_KEYS = {
    "task", "n_users", "n_items", "missing_rate", "n_user_groups",
    "n_item_groups", "n_features", "latent_rank", "noise_sd", "blob_sd",
    "latent_blob_sd", "center_side", "threshold",
}
FIT_KEYS = {
    "fit.n_user_groups", "fit.n_item_groups", "fit.latent_reg",
    "fit.latent_rank", "fit.als_max_iters", "fit.als_tol", "fit.max_pairs",
}
TRAIN_KEYS = {
    "train.learning_rate", "train.max_epochs", "train.fine_tune_epochs",
    "train.batch_size", "train.patience", "train.validation_fraction",
}
SPLIT_KEYS = {"split.train", "split.validation", "split.test"}
EXP_KEYS = {"repeats", "include_baseline", "cold_fraction"}
TUNE_KEYS = {
    "tune.user_groups_min", "tune.user_groups_max", "tune.item_groups_min",
    "tune.item_groups_max", "tune.latent_reg_min", "tune.latent_reg_max",
    "tune.grid_points", "tune.iterations",
}


def _parse_value(text: str):
    t = text.strip()
    if t.lower() == "true":
        return True
    if t.lower() == "false":
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def read_config(args, allowed: set[str]) -> dict:
    cfg: dict = {}
    entries = []
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ValidationError(f"cannot read config file: {exc}") from None
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(
                    f"{args.config}:{lineno}: expected key = value, got {raw.strip()!r}"
                )
            entries.append(tuple(line.split("=", 1)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        entries.append(tuple(item.split("=", 1)))
    for key, value in entries:
        key = key.strip()
        if key not in allowed:
            raise ValidationError(
                f"unknown config key {key!r} (known: {', '.join(sorted(allowed))})"
            )
        cfg[key] = _parse_value(value)
    return cfg


def _sub(cfg: dict, keys: set[str]) -> dict:
    return {k.split(".", 1)[1]: cfg[k] for k in keys if k in cfg}


def _sim_config(cfg: dict, seed: int) -> simulate_mod.SimulationConfig:
    kw = {k: cfg[k] for k in SIM_KEYS if k in cfg}
    return simulate_mod.SimulationConfig(seed=seed, **kw)


def _fit_config(cfg: dict, seed: int) -> FitConfig:
    train = TrainConfig(**_sub(cfg, TRAIN_KEYS))
    return FitConfig(train=train, seed=seed, **_sub(cfg, FIT_KEYS))


def _ratios(cfg: dict) -> tuple[float, float, float]:
    return (
        float(cfg.get("split.train", 0.6)),
        float(cfg.get("split.validation", 0.2)),
        float(cfg.get("split.test", 0.2)),
    )


def _search_space(cfg: dict) -> tune_mod.SearchSpace:
    d = tune_mod.SearchSpace()
    return tune_mod.SearchSpace(
        user_groups=(
            int(cfg.get("tune.user_groups_min", d.user_groups[0])),
            int(cfg.get("tune.user_groups_max", d.user_groups[1])),
        ),
        item_groups=(
            int(cfg.get("tune.item_groups_min", d.item_groups[0])),
            int(cfg.get("tune.item_groups_max", d.item_groups[1])),
        ),
        latent_reg=(
            float(cfg.get("tune.latent_reg_min", d.latent_reg[0])),
            float(cfg.get("tune.latent_reg_max", d.latent_reg[1])),
        ),
        grid_points=int(cfg.get("tune.grid_points", d.grid_points)),
        iterations=int(cfg.get("tune.iterations", d.iterations)),
    )


def _load_inputs(args, task: str):
    users = load_feature_table(args.users)
    items = load_feature_table(args.items)
    obs = load_observations(args.observations, users.entity_ids, items.entity_ids, task)
    return users, items, obs


def _write_loss_trace(traces: dict, path: str) -> None:
    rows = []
    for stage in ("stage1", "stage2", "fine_tune"):
        for epoch, tr, vl in traces.get(stage, []):
            rows.append([stage, str(int(epoch)), float(tr), float(vl)])
    # latent rows carry (penalized objective, observed-entry rmse)
    for sweep, rm, obj in traces.get("latent", []):
        rows.append(["latent", str(int(sweep)), float(obj), float(rm)])
    _write_csv(path, ["stage", "epoch", "train_loss", "val_loss"], rows)


def _feature_dict(table, row: int) -> dict:
    out = {}
    for name, kind in table.schema:
        sl = table.columns_for(name)
        if kind == NUMERIC:
            out[name] = float(table.values[row, sl.start])
        else:
            out[name] = table.levels[name][int(np.argmax(table.values[row, sl]))]
    return out


def _truth_grid(dataset) -> np.ndarray:
    grid = np.zeros((dataset.config.n_users, dataset.config.n_items))
    grid[dataset.obs.user_idx, dataset.obs.item_idx] = dataset.noiseless
    return grid


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = read_config(args, SIM_KEYS)
    dataset = simulate_mod.generate(_sim_config(cfg, args.seed))
    os.makedirs(args.out, exist_ok=True)
    save_feature_table(dataset.users, os.path.join(args.out, "users.csv"))
    save_feature_table(dataset.items, os.path.join(args.out, "items.csv"))
    uids, iids = dataset.users.entity_ids, dataset.items.entity_ids
    save_observations(dataset.obs, uids, iids, os.path.join(args.out, "observations.csv"))
    save_observations(
        dataset.obs, uids, iids, os.path.join(args.out, "truth.csv"),
        response=dataset.noiseless,
    )
    print(json.dumps({"out": args.out, "n_observations": len(dataset.obs)}))
    return 0


def cmd_train(args) -> int:
    cfg = read_config(args, FIT_KEYS | TRAIN_KEYS | SPLIT_KEYS)
    users, items, obs = _load_inputs(args, args.task)
    split_seed, fit_seed = (
        int(s) for s in np.random.SeedSequence(args.seed).generate_state(2)
    )
    split = split_observations(obs, _ratios(cfg), split_seed)
    model = model_mod.fit(split, users, items, _fit_config(cfg, fit_seed))
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, "model.json"))
    _write_loss_trace(model.traces, os.path.join(args.out, "loss_trace.csv"))
    print(json.dumps({"out": args.out, "stage_val_losses": model.stage_val_losses}))
    return 0


def cmd_tune(args) -> int:
    cfg = read_config(args, FIT_KEYS | TRAIN_KEYS | SPLIT_KEYS | TUNE_KEYS)
    users, items, obs = _load_inputs(args, args.task)
    split_seed, ctx_seed = (
        int(s) for s in np.random.SeedSequence(args.seed).generate_state(2)
    )
    split = split_observations(obs, _ratios(cfg), split_seed)
    train_config = TrainConfig(**_sub(cfg, TRAIN_KEYS))
    context = tune_mod.build_tuner_context(
        split, users, items, train_config,
        rank=int(cfg.get("fit.latent_rank", 3)),
        als_max_iters=int(cfg.get("fit.als_max_iters", 100)),
        als_tol=float(cfg.get("fit.als_tol", 1e-4)),
        max_pairs=int(cfg.get("fit.max_pairs", 200)),
        seed=ctx_seed,
    )
    result = tune_mod.coarse_to_fine_search(context.evaluate, _search_space(cfg))
    os.makedirs(args.out, exist_ok=True)
    _write_csv(
        os.path.join(args.out, "tune_trace.csv"),
        ["iteration", "user_groups", "item_groups", "latent_reg", "val_loss", "status"],
        [
            [str(r.iteration), str(r.user_groups), str(r.item_groups),
             float(r.latent_reg), float(r.val_loss), r.status]
            for r in result.trace
        ],
    )
    print(json.dumps({
        "user_groups": result.user_groups,
        "item_groups": result.item_groups,
        "latent_reg": result.latent_reg,
        "val_loss": result.best_loss,
        "evaluations": result.evaluations,
    }))
    return 0


def _print_prediction(result) -> None:
    print(json.dumps({
        "score": result.score,
        "probability": result.probability,
        "decomposition": result.decomposition,
    }, indent=2))


def cmd_predict(args) -> int:
    model = model_mod.load(args.model)
    _print_prediction(model.predict(args.user, args.item))
    return 0


def _parse_features(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"features must be a JSON object: {exc}") from None
    if not isinstance(value, dict):
        raise ValidationError("features must be a JSON object")
    return value


def cmd_predict_cold(args) -> int:
    model = model_mod.load(args.model)
    result = model.predict_cold(
        user_id=args.user,
        user_features=_parse_features(args.user_features) if args.user_features else None,
        item_id=args.item,
        item_features=_parse_features(args.item_features) if args.item_features else None,
    )
    _print_prediction(result)
    return 0


def cmd_explain(args) -> int:
    model = model_mod.load(args.model)
    obs = load_observations(
        args.observations, model.user_table.entity_ids,
        model.item_table.entity_ids, model.task,
    )
    pairs = []
    for spec_pair in args.pair or []:
        if "," not in spec_pair:
            raise ValidationError(f"--pair expects USER,ITEM, got {spec_pair!r}")
        u, i = spec_pair.split(",", 1)
        pairs.append((u, i))
    written = explain_mod.write_report(
        model, obs, args.out, pairs=pairs, grid_size=args.grid_size
    )
    print(json.dumps({"out": args.out, "files": [os.path.basename(p) for p in written]}))
    return 0


def cmd_evaluate(args) -> int:
    model = model_mod.load(args.model)
    obs = load_observations(
        args.observations, model.user_table.entity_ids,
        model.item_table.entity_ids, model.task,
    )
    targets = obs.response
    if args.truth:
        truth = load_observations(
            args.truth, model.user_table.entity_ids,
            model.item_table.entity_ids, REGRESSION,
        )
        if not (
            np.array_equal(obs.user_idx, truth.user_idx)
            and np.array_equal(obs.item_idx, truth.item_idx)
        ):
            raise ValidationError("truth file must list the same pairs in the same order")
        targets = truth.response
    scores = model.predict_scores(obs.user_idx, obs.item_idx)
    if model.task == CLASSIFICATION:
        probs = expit(2.0 * scores)
        out = {
            "auc": metrics_mod.auc(targets, probs),
            "logloss": metrics_mod.logloss(targets, probs),
        }
    else:
        out = {
            "rmse": metrics_mod.rmse(targets, scores),
            "mae": metrics_mod.mae(targets, scores),
        }
    print(json.dumps(out))
    return 0


def cmd_baseline(args) -> int:
    cfg = read_config(args, SPLIT_KEYS)
    users, items, obs = _load_inputs(args, args.task)
    split_seed, fit_seed = (
        int(s) for s in np.random.SeedSequence(args.seed).generate_state(2)
    )
    split = split_observations(obs, _ratios(cfg), split_seed)
    base = metrics_mod.baseline_svd(split, seed=fit_seed)
    test = split.test
    pred = base.predict(test.user_idx, test.item_idx)
    if args.task == CLASSIFICATION:
        out = {
            "auc": metrics_mod.auc(test.response, pred),
            "logloss": metrics_mod.logloss(test.response, np.clip(pred, 0.0, 1.0)),
        }
    else:
        out = {
            "rmse": metrics_mod.rmse(test.response, pred),
            "mae": metrics_mod.mae(test.response, pred),
        }
    out["lam"] = base.lam
    print(json.dumps(out))
    return 0


def run_experiment(cfg: dict, seed: int, out_dir: str) -> list[dict]:
    """Repeated simulate/fit/evaluate rounds; summary rows land in metrics.csv.

    Regression is scored against the pre-noise responses, so the reported
    errors measure signal recovery rather than the irreducible noise.
    """
    task = cfg.get("task", REGRESSION)
    repeats = int(cfg.get("repeats", 1))
    if repeats < 1:
        raise ValidationError("repeats must be positive")
    include_baseline = bool(cfg.get("include_baseline", False))
    cold_fraction = float(cfg.get("cold_fraction", 0.0))
    ratios = _ratios(cfg)
    os.makedirs(out_dir, exist_ok=True)

    rows: list[dict] = []
    for r in range(1, repeats + 1):
        seeds = [
            int(s) for s in np.random.SeedSequence((seed, r)).generate_state(5)
        ]
        sim_seed, split_seed, fit_seed, base_seed, cold_seed = seeds
        dataset = simulate_mod.generate(_sim_config(cfg, sim_seed))
        cold = None
        fit_ds = dataset
        if cold_fraction > 0:
            cold = simulate_mod.cold_start_split(dataset, cold_fraction, cold_seed)
            fit_ds = cold.visible
        split = split_observations(fit_ds.obs, ratios, split_seed)
        model = model_mod.fit(split, fit_ds.users, fit_ds.items, _fit_config(cfg, fit_seed))
        test = split.test
        scores = model.predict_scores(test.user_idx, test.item_idx)

        row: dict = {"repeat": r}
        if task == CLASSIFICATION:
            probs = expit(2.0 * scores)
            row["auc"] = metrics_mod.auc(test.response, probs)
            row["logloss"] = metrics_mod.logloss(test.response, probs)
        else:
            truth = _truth_grid(fit_ds)[test.user_idx, test.item_idx]
            row["rmse"] = metrics_mod.rmse(truth, scores)
            row["mae"] = metrics_mod.mae(truth, scores)

        if include_baseline:
            base = metrics_mod.baseline_svd(split, seed=base_seed)
            bpred = base.predict(test.user_idx, test.item_idx)
            if task == CLASSIFICATION:
                row["baseline_auc"] = metrics_mod.auc(test.response, bpred)
                row["baseline_logloss"] = metrics_mod.logloss(
                    test.response, np.clip(bpred, 0.0, 1.0)
                )
            else:
                row["baseline_rmse"] = metrics_mod.rmse(truth, bpred)
                row["baseline_mae"] = metrics_mod.mae(truth, bpred)

        if cold is not None:
            row.update(_cold_metrics(model, dataset, cold, split, task))
        rows.append(row)

        if r == 1:
            model.save(os.path.join(out_dir, "model.json"))
            _write_loss_trace(model.traces, os.path.join(out_dir, "loss_trace.csv"))

    _write_metrics_csv(rows, repeats, os.path.join(out_dir, "metrics.csv"))
    return rows


def _cold_metrics(model, dataset, cold, split, task) -> dict:
    user_cold = np.zeros(dataset.config.n_users, dtype=bool)
    user_cold[cold.cold_users] = True
    item_cold = np.zeros(dataset.config.n_items, dtype=bool)
    item_cold[cold.cold_items] = True
    preds = np.empty(len(cold.cold_obs))
    for j in range(len(cold.cold_obs)):
        u = int(cold.cold_obs.user_idx[j])
        i = int(cold.cold_obs.item_idx[j])
        result = model.predict_cold(
            user_id=None if user_cold[u] else dataset.users.entity_ids[u],
            user_features=_feature_dict(dataset.users, u) if user_cold[u] else None,
            item_id=None if item_cold[i] else dataset.items.entity_ids[i],
            item_features=_feature_dict(dataset.items, i) if item_cold[i] else None,
        )
        preds[j] = result.score
    mean_response = float(split.train.response.mean())
    constant = np.full(len(cold.cold_obs), mean_response)
    if task == CLASSIFICATION:
        probs = expit(2.0 * preds)
        labels = cold.cold_obs.response
        return {
            "cold_auc": metrics_mod.auc(labels, probs),
            "cold_logloss": metrics_mod.logloss(labels, probs),
            "cold_baseline_auc": metrics_mod.auc(labels, constant),
            "cold_baseline_logloss": metrics_mod.logloss(
                labels, np.clip(constant, 0.0, 1.0)
            ),
        }
    truth = cold.cold_noiseless
    return {
        "cold_rmse": metrics_mod.rmse(truth, preds),
        "cold_mae": metrics_mod.mae(truth, preds),
        "cold_baseline_rmse": metrics_mod.rmse(truth, constant),
        "cold_baseline_mae": metrics_mod.mae(truth, constant),
    }


def _write_metrics_csv(rows: list[dict], repeats: int, path: str) -> None:
    columns = ["repeat"] + [k for k in rows[0] if k != "repeat"]
    table = [[str(row["repeat"])] + [float(row[c]) for c in columns[1:]] for row in rows]
    means, sds = ["mean"], ["sd"]
    for c in columns[1:]:
        vals = np.array([row[c] for row in rows], dtype=np.float64)
        means.append(float(vals.mean()))
        sds.append(float(vals.std(ddof=1)) if repeats > 1 else 0.0)
    table.append(means)
    table.append(sds)
    _write_csv(path, columns, table)


def cmd_experiment(args) -> int:
    cfg = read_config(args, SIM_KEYS | FIT_KEYS | TRAIN_KEYS | SPLIT_KEYS | EXP_KEYS)
    rows = run_experiment(cfg, args.seed, args.out)
    summary = {"out": args.out, "repeats": len(rows)}
    for key in rows[0]:
        if key != "repeat":
            summary[f"mean_{key}"] = float(np.mean([row[key] for row in rows]))
    print(json.dumps(summary))
    return 0


# -- parser ---------------------------------------------------------------

def _add_config_args(p) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gammli",
        description="Explainable recommendation: additive effects plus "
                    "group-constrained latent factors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_simulate)

    for name, fn, needs_out in (
        ("train", cmd_train, True),
        ("tune", cmd_tune, True),
        ("baseline", cmd_baseline, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--users", required=True)
        p.add_argument("--items", required=True)
        p.add_argument("--observations", required=True)
        p.add_argument("--task", choices=(REGRESSION, CLASSIFICATION), required=True)
        if needs_out:
            p.add_argument("--out", required=True)
        _add_config_args(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("predict", help="score one known user/item pair")
    p.add_argument("--model", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("predict-cold", help="score a pair where either side may be new")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--user")
    g.add_argument("--user-features", metavar="JSON")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--item")
    g.add_argument("--item-features", metavar="JSON")
    p.set_defaults(func=cmd_predict_cold)

    p = sub.add_parser("explain", help="write the explanation bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--observations", required=True,
                   help="training pairs used for importance and densities")
    p.add_argument("--out", required=True)
    p.add_argument("--pair", action="append", metavar="USER,ITEM",
                   help="also write a local explanation for this pair (repeatable)")
    p.add_argument("--grid-size", type=int, default=100)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="score a model on an observation file")
    p.add_argument("--model", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--truth", help="optional pre-noise responses for the same pairs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="repeated simulate/fit/evaluate rounds")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
