"""Command-line entry point.

Every command reads a JSON config (``--config``) and writes its outputs into
``--out``.  Relative paths inside a config are resolved against the config's
directory.  Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

COMMANDS = ("generate-data", "fit-gp", "train-ndde", "train-stable-ndde", "train-feedback",
            "evaluate", "certify", "export-plots")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def build_parser():
    p = _Parser(prog="stable-ndde", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--system", default=None, help="overrides the config system id")
    return p


def _limit_threads():
    raw = os.environ.get("STABLE_NDDE_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UserError(f"STABLE_NDDE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UserError(f"STABLE_NDDE_THREADS must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


class Context:
    def __init__(self, args):
        self.config_path = Path(args.config)
        try:
            self.cfg = json.loads(self.config_path.read_text())
        except OSError as e:
            raise UserError(f"cannot read config {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UserError(f"config {args.config} is not valid JSON: {e}") from None
        if not isinstance(self.cfg, dict):
            raise UserError("config must be a JSON object")
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        if args.seed is not None:
            self.cfg["seed"] = args.seed
            self.cfg.setdefault("train", {})["seed"] = args.seed
        if args.system is not None:
            self.cfg["system"] = args.system

    def path(self, key):
        if key not in self.cfg:
            raise UserError(f"config is missing {key!r}")
        p = Path(self.cfg[key])
        return p if p.is_absolute() else self.config_path.parent / p

    def get(self, key, default=None):
        return self.cfg.get(key, default)

    def require(self, key):
        if key not in self.cfg:
            raise UserError(f"config is missing {key!r}")
        return self.cfg[key]

    def write_json(self, name, obj):
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True))
        return path


def _system(ctx):
    from .systems import make_system

    return make_system(ctx.require("system"), **ctx.get("system_params", {}))


def cmd_generate_data(ctx):
    from .systems import generate_dataset, save_dataset

    sys_ = _system(ctx)
    ds = generate_dataset(sys_, ctx.require("initial_conditions"), tuple(ctx.require("horizon")),
                          int(ctx.require("N")), float(ctx.get("sigma", 0.0)), seed=ctx.get("seed", 0),
                          lookback=float(ctx.get("lookback", 0.0)), h=float(ctx.get("h", 1e-3)),
                          split=ctx.get("split", "train"))
    path = save_dataset(ds, ctx.out)
    print(f"wrote {len(ds)} trajectories, manifest {path}")


def cmd_fit_gp(ctx):
    import numpy as np

    from .gp import fit_gp, save_interpolant
    from .systems import load_dataset

    ds = load_dataset(ctx.path("dataset"))
    n_grid = int(ctx.get("grid_points", 200))
    for k, tr in enumerate(ds.trajectories):
        t_h, y_h = tr.history()
        if len(t_h) < 2:
            raise UserError(f"trajectory {k} has fewer than two history observations")
        gp = fit_gp(t_h, y_h, seed=ctx.get("seed", 0))
        save_interpolant(gp, ctx.out / f"gp_{k:03d}.json")
        grid = np.linspace(t_h[0], t_h[-1], n_grid)
        _write_rows(ctx.out / f"gp_{k:03d}.csv", ["t"] + [f"mean{i + 1}" for i in range(gp.dim)],
                    np.column_stack([grid, gp(grid)]))
    print(f"fitted {len(ds)} history interpolants")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _train_config(ctx):
    from .trainer import TrainConfig

    d = dict(ctx.get("train", {}))
    if "seed" in ctx.cfg:
        d.setdefault("seed", ctx.cfg["seed"])
    return TrainConfig.from_dict(d)


def _model(ctx, n):
    from .ndde import NddeModel
    from .nets import MLP_HIDDEN

    m = ctx.require("model")
    return NddeModel.init(n, float(m["tau"]), int(m["K"]), tuple(m.get("hidden", MLP_HIDDEN)),
                          seed=ctx.get("seed", 0))


def _lrf(ctx, dim):
    from .nets import ICNN_HIDDEN, LrfNetwork

    l = ctx.get("lrf", {})
    return LrfNetwork.init(dim, tuple(l.get("hidden", ICNN_HIDDEN)), c=float(l.get("c", 1e-3)),
                           d=float(l.get("d", 0.1)), seed=ctx.get("seed", 0))


def _raz(ctx):
    from .razumikhin import RazumikhinConfig

    return RazumikhinConfig(**ctx.require("razumikhin"))


def _finish_training(ctx, record, metrics, **parts):
    from .trainer import save_checkpoint

    ckpt = save_checkpoint(ctx.out / "checkpoint.json", **parts)
    record.metrics.update(metrics)
    record.checkpoints["final"] = str(ckpt)
    record.save(ctx.out / "run.jsonl")
    ctx.write_json("metrics.json", metrics)
    print(json.dumps(metrics))


def cmd_train_ndde(ctx):
    from .ndde import dataset_mse
    from .systems import load_dataset
    from .trainer import train_ndde

    ds = load_dataset(ctx.path("dataset"))
    model = _model(ctx, ds.n)
    cfg = _train_config(ctx)
    model, record = train_ndde(model, ds, cfg)
    mse = dataset_mse(model, ds, model.grid.r, cfg.step)
    _finish_training(ctx, record, {"train_mse": mse}, model=model)


def cmd_train_stable_ndde(ctx):
    from .gp import RkhsHistorySampler
    from .ndde import dataset_mse
    from .systems import load_dataset
    from .trainer import train_stable_ndde

    ds = load_dataset(ctx.path("dataset"))
    model = _model(ctx, ds.n)
    s = ctx.require("sampler")
    sampler = RkhsHistorySampler(float(s["A"]), float(s["B"]), float(s["C"]), int(s.get("n_centers", 10)),
                                 float(s.get("lookback", model.grid.r)), dim=ds.n)
    cfg = _train_config(ctx)
    model, lrf, record = train_stable_ndde(model, _lrf(ctx, ds.n), ds, sampler, cfg, _raz(ctx))
    mse = dataset_mse(model, ds, model.grid.r, cfg.step)
    _finish_training(ctx, record, {"train_mse": mse}, model=model, lrf=lrf)


def _policy_from_lqr(ctx, sys_):
    import numpy as np

    from .systems import FeedbackPolicy

    lq = ctx.get("lqr", {})
    Q = np.asarray(lq["Q"], float) if "Q" in lq else None
    R = np.asarray(lq["R"], float) if "R" in lq else None
    return FeedbackPolicy.from_lqr(sys_, float(ctx.require("tau_u")), Q, R)


def cmd_train_feedback(ctx):
    from .trainer import ControlHistoryConfig, train_feedback

    sys_ = _system(ctx)
    policy = _policy_from_lqr(ctx, sys_)
    hist = ctx.get("history", {})
    hcfg = ControlHistoryConfig(float(hist.get("radius", 1.5707963267948966)),
                                float(hist.get("lookback", policy.tau_u)))
    cfg = _train_config(ctx)
    ctx.write_json("lqr.json", {"gains": policy.gains.tolist(), "tau_u": policy.tau_u})
    trained, lrf, record = train_feedback(sys_, policy, _lrf(ctx, sys_.m), hcfg, cfg, _raz(ctx))
    _finish_training(ctx, record, {"gains": trained.gains.tolist(),
                                   "final_lrf_loss": record.rows[-1]["lrf_loss"] if record.rows else None},
                     policy=trained, lrf=lrf)


def cmd_evaluate(ctx):
    import numpy as np

    from .ndde import HistoryFitter, full_windows, predict
    from .systems import load_dataset
    from .trainer import load_checkpoint

    parts = load_checkpoint(ctx.path("checkpoint"))
    if "model" not in parts:
        raise UserError("evaluate needs a checkpoint holding an NDDE model")
    model = parts["model"]
    ds = load_dataset(ctx.path("dataset"))
    step = ctx.get("step")
    fitter = HistoryFitter(ds, model.grid.r, seed=ctx.get("seed", 0))
    per_traj, sq, count = [], 0.0, 0
    for w in full_windows(ds, model.grid.r, fitter):
        pred = predict(model, w.history, w.times, step)
        err = float(np.mean((pred - w.ys) ** 2))
        per_traj.append(err)
        sq += float(np.sum((pred - w.ys) ** 2))
        count += w.ys.size
        n = w.ys.shape[1]
        _write_rows(ctx.out / f"predictions_{w.trajectory:03d}.csv",
                    ["t"] + [f"y{i + 1}" for i in range(n)] + [f"yhat{i + 1}" for i in range(n)],
                    np.column_stack([w.times, w.ys, pred]))
    metrics = {"mse": sq / count, "mse_per_trajectory": per_traj}
    ctx.write_json("metrics.json", metrics)
    print(json.dumps(metrics))


def cmd_certify(ctx):
    import numpy as np

    from .gp import RkhsHistorySampler, sample_history
    from .razumikhin import verify_decay
    from .systems import closed_loop_field, control_history_sampler
    from .trainer import load_checkpoint

    parts = load_checkpoint(ctx.path("checkpoint"))
    if "lrf" not in parts:
        raise UserError("certify needs a checkpoint holding an LRF")
    raz = _raz(ctx)
    rng = np.random.default_rng(ctx.get("seed", 0))
    n_hist = int(ctx.get("histories", 20))
    horizon = float(ctx.require("horizon"))
    if "policy" in parts:
        sys_ = _system(ctx)
        policy = parts["policy"]
        f, grid = closed_loop_field(sys_, policy)
        radius = float(ctx.get("radius", 1.5707963267948966))
        hists = [control_history_sampler(sys_, radius, policy.tau_u, rng=rng) for _ in range(n_hist)]
        h = float(ctx.get("step", policy.tau_u / 2 if policy.tau_u > 0 else raz.tau_V))
    elif "model" in parts:
        model = parts["model"]
        f, grid = model.field(), model.grid
        s = ctx.require("sampler")
        sampler = RkhsHistorySampler(float(s["A"]), float(s["B"]), float(s["C"]), int(s.get("n_centers", 10)),
                                     float(s.get("lookback", grid.r)), dim=model.n)
        hists = [sample_history(sampler, rng=rng) for _ in range(n_hist)]
        h = float(ctx.get("step", grid.tau / 2))
    else:
        raise UserError("checkpoint holds neither a policy nor a model")
    report = verify_decay(f, grid, raz, parts["lrf"], hists, horizon, h)
    report.save(ctx.out / "certificate.json")
    print(json.dumps({"max_residual": report.max_residual, "gamma": report.gamma, "M": report.M,
                      "violations": int(sum(report.violations))}))


def cmd_export_plots(ctx):
    import numpy as np

    from . import plotting
    from .trainer import RunRecord

    written = []
    if "run" in ctx.cfg:
        rec = RunRecord.load(ctx.path("run"))
        path = ctx.out / "loss_curve.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "lrf_loss", "lr"])
            for r in rec.rows:
                w.writerow([r["iteration"], "" if r["train_loss"] is None else repr(r["train_loss"]),
                            "" if r["lrf_loss"] is None else repr(r["lrf_loss"]), repr(r["lr"])])
        plotting.loss_curves(rec.rows, ctx.out / "loss_curve.png")
        written += [path, ctx.out / "loss_curve.png"]
    for k, p in enumerate(ctx.get("predictions", [])):
        src = Path(p) if Path(p).is_absolute() else ctx.config_path.parent / p
        arr = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
        n = (arr.shape[1] - 1) // 2
        png = ctx.out / f"{src.stem}.png"
        plotting.predictions(arr[:, 0], arr[:, 1:1 + n], arr[:, 1 + n:], png)
        written.append(png)
    if not written:
        raise UserError("export-plots needs 'run' and/or 'predictions' in the config")
    for p in written:
        print(p)


HANDLERS = {
    "generate-data": cmd_generate_data,
    "fit-gp": cmd_fit_gp,
    "train-ndde": cmd_train_ndde,
    "train-stable-ndde": cmd_train_stable_ndde,
    "train-feedback": cmd_train_feedback,
    "evaluate": cmd_evaluate,
    "certify": cmd_certify,
    "export-plots": cmd_export_plots,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _limit_threads()
        ctx = Context(args)
        return _dispatch(args.command, ctx)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(command, ctx) -> int:
    import numpy as np

    from .ad import ConfigurationError
    from .dde import DivergenceError, DomainError
    from .systems import SolverError
    from .trainer import TrainingDivergedError

    try:
        HANDLERS[command](ctx)
    except (UserError, ConfigurationError, DomainError, KeyError, TypeError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DivergenceError, TrainingDivergedError, SolverError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
