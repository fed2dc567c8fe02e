"""Command line entry point ``kma``.

Exit codes: 0 ok, 1 usage or configuration error, 2 numerical failure
(divergence, unstabilizable model), 3 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..averaging import rollout
from ..dynamics import simulate
from ..errors import ConfigError, DivergedError, NotStabilizableError
from . import io, pipeline
from .config import load_config

log = logging.getLogger("kma")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--system", choices=["duffing", "cartpole"], help="system defaults when no config is given")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="kma", description="Koopman model averaging experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate the partitioned dataset")

    r = sub.add_parser("run", parents=[common], help="train the base model and build the weighted model")
    r.add_argument("--data", type=Path, help="dataset CSV (default OUT/dataset.csv)")

    b = sub.add_parser("baselines", parents=[common], help="fit the EDMD and single-model baselines")
    b.add_argument("--data", type=Path, help="dataset CSV (default OUT/dataset.csv)")

    pr = sub.add_parser("predict", parents=[common], help="multi-step prediction against the true plant")
    pr.add_argument("--model", type=Path, required=True)
    pr.add_argument("--x0", type=_floats, required=True, help="initial state, e.g. 1,0")
    pr.add_argument("--steps", type=int, default=50)
    src = pr.add_mutually_exclusive_group()
    src.add_argument("--u", type=_floats, help="constant input")
    src.add_argument("--inputs", type=Path, help="CSV with columns u0..u{p-1}")
    src.add_argument("--random-inputs", action="store_true", help="draw inputs from the data distribution")
    pr.add_argument("--name", default="prediction", help="output file stem")

    c = sub.add_parser("control", parents=[common], help="closed-loop LQR or MPC on the true plant")
    c.add_argument("--model", type=Path, required=True)
    c.add_argument("--task", choices=["lqr", "mpc"], required=True)
    c.add_argument("--x0", type=_floats)
    c.add_argument("--steps", type=int)
    c.add_argument("--name", help="output file stem (default: task name)")

    sub.add_parser("report", parents=[common], help="prediction metrics for every model in OUT")
    return p


def _config(args):
    """``--config`` wins; otherwise reuse the config echoed into ``--out``; otherwise defaults."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.system is None and (args.out / "config.toml").exists():
        cfg = load_config(args.out / "config.toml")
    else:
        cfg = load_config(None, args.system)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _echo_config(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())


def _load_data(args):
    path = args.data or args.out / "dataset.csv"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run gen-data first)")
    return io.load_dataset(path)


def cmd_gen_data(args, cfg):
    ds = pipeline.gen_data(cfg)
    io.save_dataset(ds, args.out / "dataset.csv")
    counts = {label: int(np.count_nonzero(ds.partition == label)) for label in ds.labels}
    print(json.dumps({"samples": len(ds), "partitions": counts}))


def cmd_run(args, cfg):
    ds = _load_data(args)
    res = pipeline.run(cfg, ds)
    out, system = args.out, cfg.system
    io.save_features(out / "features.json", res.lift)
    io.save_model(out / "base_model.json", res.ensemble.members[0], res.lift, system)
    for i, m in enumerate(res.ensemble.members, start=1):
        io.save_model(out / "members" / f"member_{i}.json", m, res.lift, system)
    io.save_weights_report(out / "weights.json", res.elpds, res.w, res.n_heldout, res.ensemble.partitions)
    io.save_model(out / "weighted_model.json", res.weighted, res.lift, system, elpds=res.elpds)
    io.save_train_report(out / "train_report.csv", res.report)
    print(json.dumps({"elpd": res.elpds.tolist(), "w": res.w.tolist(),
                      "best_val_loss": res.report.best_val_loss}))


def cmd_baselines(args, cfg):
    ds = _load_data(args)
    b = pipeline.train_baselines(cfg, ds)
    io.save_model(args.out / "edmd_model.json", b.edmd_model, b.edmd_lift, cfg.system)
    io.save_model(args.out / "normal_nn_model.json", b.nn_model, b.nn_lift, cfg.system)
    io.save_train_report(args.out / "normal_nn_train_report.csv", b.nn_report)
    print(json.dumps({"edmd_lift_dim": b.edmd_lift.n_lift, "normal_nn_val_loss": b.nn_report.best_val_loss}))


def _model(args, cfg):
    wm, lift, system = io.load_predictor(args.model)
    system = system or cfg.system
    if wm.n != system.n or wm.p != system.p or lift.n != system.n:
        raise ConfigError("model", f"model dimensions (n={wm.n}, p={wm.p}) do not match system {system.name}")
    return wm, lift, system


def cmd_predict(args, cfg):
    wm, lift, system = _model(args, cfg)
    x0 = args.x0
    if x0.shape != (system.n,):
        raise ConfigError("x0", f"expected {system.n} values")
    T = args.steps
    if T < 0:
        raise ConfigError("steps", "must be >= 0")
    if args.inputs is not None:
        with open(args.inputs, newline="") as fh:
            rows = list(csv.DictReader(fh))
        U = np.array([[float(r[f"u{i}"]) for i in range(system.p)] for r in rows]).reshape(-1, system.p)[:T]
        if len(U) < T:
            raise ConfigError("inputs", f"file has {len(U)} rows, need {T}")
    elif args.random_inputs:
        rng = np.random.default_rng([cfg.seed, pipeline.EVAL_STREAM + 1])
        U = rng.uniform(-cfg.u_range, cfg.u_range, size=(T, system.p))
    else:
        u = np.zeros(system.p) if args.u is None else args.u
        if u.shape != (system.p,):
            raise ConfigError("u", f"expected {system.p} values")
        U = np.tile(u, (T, 1))
    t = np.arange(1, T + 1) * system.dt
    if T == 0:
        truth = pred = np.zeros((0, system.n))
        rmse = None
    else:
        truth = simulate(system, x0, U).states[1:]
        pred = rollout(wm, lift, x0, U)
        rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    io.save_prediction(args.out / f"{args.name}.csv", t, truth, pred)
    io.write_json(args.out / f"{args.name}_metrics.json", {"total_rmse": rmse, "steps": T})
    print("RMSE: undefined (T=0)" if rmse is None else f"RMSE: {rmse:.17g}")


def cmd_control(args, cfg):
    wm, lift, system = _model(args, cfg)
    if system != cfg.system:
        cfg = cfg.__class__.from_dict({**cfg.raw, "system": system.to_dict()})
    runner = pipeline.lqr_experiment if args.task == "lqr" else pipeline.mpc_experiment
    _, res = runner(cfg, wm, lift, x0=args.x0, steps=args.steps)
    name = args.name or args.task
    io.save_closed_loop(args.out / f"{name}_closed_loop.csv", res)
    io.write_json(args.out / f"{name}_metrics.json", res.metrics)
    summary = {k: v for k, v in res.metrics.items() if not isinstance(v, list)}
    print(json.dumps(summary))


REPORT_MODELS = ["weighted_model", "base_model", "normal_nn_model", "edmd_model"]


def cmd_report(args, cfg):
    predictors = {}
    for name in REPORT_MODELS:
        path = args.out / f"{name}.json"
        if path.exists():
            wm, lift, _ = io.load_predictor(path)
            predictors[name] = (wm, lift)
    for path in sorted((args.out / "members").glob("member_*.json"), key=lambda p: int(p.stem.split("_")[1])):
        wm, lift, _ = io.load_predictor(path)
        predictors[path.stem] = (wm, lift)
    if not predictors:
        raise FileNotFoundError(f"no model files in {args.out}")
    metrics = pipeline.evaluate_models(cfg, predictors)
    weights_path = args.out / "weights.json"
    if weights_path.exists() and "weighted_model" in metrics:
        wr = io.read_json(weights_path)
        metrics["weighted_model"].elpds = wr["elpd"]
        metrics["weighted_model"].weights = wr["w"]
    report_path = args.out / "train_report.csv"
    if report_path.exists() and "base_model" in metrics:
        with open(report_path, newline="") as fh:
            metrics["base_model"].validation_loss = min(float(r["val_loss"]) for r in csv.DictReader(fh))
    io.write_json(args.out / "report.json", {k: m.to_dict() for k, m in metrics.items()})
    names = list(metrics)
    steps = len(next(iter(metrics.values())).rmse_per_step)
    rows = [[k + 1] + [metrics[nm].rmse_per_step[k] for nm in names] for k in range(steps)]
    io.write_csv(args.out / "report_rmse.csv", ["step"] + names, rows)
    print(json.dumps({k: m.total_rmse for k, m in metrics.items()}))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "baselines": cmd_baselines,
    "predict": cmd_predict,
    "control": cmd_control,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        _echo_config(cfg, args.out)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"kma {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedError, NotStabilizableError) as exc:
        print(f"kma {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"kma {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
