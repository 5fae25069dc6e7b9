"""Training loops: plain NDDE fitting, LRF-stabilized fitting, delayed feedback and ANODE."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ad
from .ad import ConfigurationError
from .dde import DivergenceError
from .gp import RkhsHistorySampler, sample_history
from .ndde import (AnodeBaseline, HistoryFitter, NddeModel, anode_initial_state, anode_loss,
                   batch_windows, full_windows, windows_loss)
from .nets import (IcnnParams, LrfNetwork, MlpParams, lrf_from_dict, lrf_to_dict, mlp_from_dict,
                   mlp_to_dict, wz_positions)
from .razumikhin import RazumikhinConfig, collect_samples, lrf_loss
from .systems import BenchmarkSystem, FeedbackPolicy, closed_loop_field, control_history_sampler


class TrainingDivergedError(FloatingPointError):
    def __init__(self, record, message):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    iterations: int = 80
    lr_start: float = 5e-3
    lr_end: float = 1e-5
    schedule: str = "exponential"  # or "cyclic"
    period: int = 50
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_time: int | None = None  # None: whole trajectories
    batch_size: int = 4
    lrf_batch: int = 256
    histories_per_iter: int = 4
    t_stab: float = 30.0
    step: float | None = None  # solver step, defaults to tau / 2
    seed: int = 0
    w_ndde: float = 1.0
    w_lrf: float = 1.0
    divergence_window: int = 10
    policy_lr_scale: float = 1.0  # feedback training: step-size multiplier for the policy gains
    steps_per_iteration: int = 1  # optimizer steps (fresh batches) sharing one scheduled learning rate

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be nonnegative")
        if not (self.lr_start >= self.lr_end >= 0):
            raise ConfigurationError("learning rates need start >= end >= 0")
        if self.schedule not in ("exponential", "cyclic"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cyclic" and self.period < 1:
            raise ConfigurationError("cyclic schedule needs period >= 1")
        if self.steps_per_iteration < 1:
            raise ConfigurationError("steps_per_iteration must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, i: int) -> float:
    """Exponential decay from lr_start to lr_end; the cyclic variant restarts every ``period`` steps."""
    if i < 0:
        raise ConfigurationError("iteration must be nonnegative")
    if cfg.lr_start == 0:
        return 0.0
    if cfg.schedule == "cyclic":
        i, steps = i % cfg.period, cfg.period
    else:
        steps = cfg.iterations
    if steps <= 1:
        return cfg.lr_start
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (i / (steps - 1))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, scales=None):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.scales = [1.0] * len(params) if scales is None else list(scales)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        out = []
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.scales[k] * lr
            out.append(p - step * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


class Sgd:
    def __init__(self, params, scales=None):
        self.scales = [1.0] * len(params) if scales is None else list(scales)

    def step(self, params, grads, lr):
        return [p - s * lr * g for p, g, s in zip(params, grads, self.scales)]


def make_optimizer(cfg: TrainConfig, params, scales=None):
    if cfg.optimizer == "sgd":
        return Sgd(params, scales)
    return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, scales)


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    wall_time: float = 0.0
    metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)

    def log(self, iteration, train_loss, lrf_loss, lr, diverged=False):
        bad = diverged or any(v is not None and not math.isfinite(v) for v in (train_loss, lrf_loss))
        self.rows.append({"kind": "iteration", "iteration": int(iteration),
                          "train_loss": _finite_or_none(train_loss), "lrf_loss": _finite_or_none(lrf_loss),
                          "lr": float(lr), "diverged": bool(bad)})

    def losses(self, key="train_loss"):
        return np.array([np.nan if r[key] is None else r[key] for r in self.rows])

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.rows]
        lines.append(json.dumps({"kind": "summary", "wall_time": self.wall_time,
                                 "metrics": self.metrics, "checkpoints": self.checkpoints}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("kind") == "summary":
                rec.wall_time = d["wall_time"]
                rec.metrics = d["metrics"]
                rec.checkpoints = d["checkpoints"]
            else:
                rec.rows.append(d)
        return rec


def _streams(seed):
    data, hist = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data), np.random.default_rng(hist)


def _check_divergence(record: RunRecord, cfg: TrainConfig):
    w = cfg.divergence_window
    recent = record.rows[-w:]
    if len(recent) == w and sum(r["diverged"] for r in recent) > w / 2:
        raise TrainingDivergedError(record, f"more than half of the last {w} batches diverged "
                                            f"(iteration {record.rows[-1]['iteration']})")


def _project_icnn(arrays, offset):
    """Clip hidden-to-hidden ICNN weights (located after ``offset`` leading arrays) at zero."""
    out = list(arrays)
    n_icnn = len(arrays) - offset
    for k in wz_positions(n_icnn):
        out[offset + k] = np.maximum(out[offset + k], 0.0)
    return out


def _ndde_objective(model, windows, h, P):
    J = windows_loss(model, windows, h, P)
    count = sum(w.ys.size for w in windows)
    return ad.scale(J, 1.0 / count)


def _windows(dataset, cfg, fitter, lookback, rng, fixed):
    if cfg.batch_time is None:
        return fixed
    return batch_windows(dataset, cfg.batch_time, cfg.batch_size, lookback=lookback, fitter=fitter, rng=rng)


def train_ndde(model: NddeModel, dataset, cfg: TrainConfig, fitter: HistoryFitter | None = None,
               callback=None):
    """Adam/SGD on the mean squared trajectory error; returns (model, RunRecord)."""
    model, _, record = _fit_ndde(model, dataset, cfg, fitter, callback=callback)
    return model, record


def train_stable_ndde(model: NddeModel, lrf: LrfNetwork, dataset, sampler: RkhsHistorySampler,
                      cfg: TrainConfig, raz: RazumikhinConfig, fitter: HistoryFitter | None = None,
                      callback=None):
    """Joint fit: w_ndde * grad J + w_lrf * grad l_LRF for the model, w_lrf * grad l_LRF for the LRF.

    Every step draws fresh RKHS histories, integrates the current model along
    them and evaluates the Razumikhin loss at random times.  Returns
    (model, lrf, RunRecord).
    """
    if lrf.in_dim != model.n:
        raise ConfigurationError(f"LRF acts on R^{lrf.in_dim}, model state is R^{model.n}")
    if sampler.dim != model.n or sampler.lookback < model.grid.r - 1e-12:
        raise ConfigurationError("history sampler must match the model dimension and lookback")
    raz.ratio(model.grid)
    return _fit_ndde(model, dataset, cfg, fitter, lrf, sampler, raz, callback)


def _fit_ndde(model, dataset, cfg, fitter=None, lrf=None, sampler=None, raz=None, callback=None):
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    lookback = model.grid.r
    fitter = HistoryFitter(dataset, lookback, seed=cfg.seed) if fitter is None else fitter
    fixed = full_windows(dataset, lookback, fitter) if cfg.batch_time is None else None
    data_rng, hist_rng = _streams(cfg.seed)
    h = cfg.step if cfg.step is not None else model.grid.tau / 2
    use_lrf = lrf is not None and cfg.w_lrf > 0
    theta = [np.array(a) for a in model.params.arrays()]
    phi = [np.array(a) for a in lrf.icnn.arrays()] if lrf is not None else []
    n_theta = len(theta)
    opt = make_optimizer(cfg, theta + phi)
    per_traj = max(1, cfg.lrf_batch // cfg.histories_per_iter)
    record = RunRecord()
    t0 = time.perf_counter()
    for i in range(cfg.iterations):
        lr = lr_at(cfg, i)
        j_vals, l_vals = [], []
        for _ in range(cfg.steps_per_iteration):
            wins = _windows(dataset, cfg, fitter, lookback, data_rng, fixed)
            tape = ad.Tape()
            P = tape.vars(theta + phi)
            Pt, Pp = P[:n_theta], P[n_theta:]
            try:
                J = _ndde_objective(model, wins, cfg.step, Pt)
            except DivergenceError:
                continue
            total = ad.scale(J, cfg.w_ndde)
            l_val = None
            if use_lrf:
                hists = [sample_history(sampler, rng=hist_rng) for _ in range(cfg.histories_per_iter)]
                X = collect_samples(model.field(theta), model.grid, raz, hists, cfg.t_stab, per_traj, h,
                                    rng=hist_rng, as_array=True)
                if len(X):
                    l = lrf_loss(lrf, model.field(Pt), model.grid, raz, X, Pp)
                    l_val = float(ad.value(l))
                    total = ad.add(total, ad.scale(l, cfg.w_lrf))
            grads = tape.gradient(total, P)
            if not all(np.all(np.isfinite(g)) for g in grads):
                continue
            new = opt.step(theta + phi, grads, lr)
            if phi:
                new = _project_icnn(new, n_theta)
            theta, phi = new[:n_theta], new[n_theta:]
            j_vals.append(float(ad.value(J)))
            if l_val is not None:
                l_vals.append(l_val)
        if not j_vals:
            record.log(i, None, None, lr, diverged=True)
            _check_divergence(record, cfg)
            continue
        record.log(i, float(np.mean(j_vals)), float(np.mean(l_vals)) if l_vals else None, lr)
        if callback:
            callback(i, record)
    record.wall_time = time.perf_counter() - t0
    new_lrf = LrfNetwork(IcnnParams.from_arrays(phi), lrf.c, lrf.d) if lrf is not None else None
    return model.with_params(MlpParams.from_arrays(theta)), new_lrf, record


@dataclass(frozen=True)
class ControlHistoryConfig:
    """Open-loop initial histories starting on a sphere of given radius."""

    radius: float
    lookback: float


def train_feedback(sys: BenchmarkSystem, policy: FeedbackPolicy, lrf: LrfNetwork, hist: ControlHistoryConfig,
                   cfg: TrainConfig, raz: RazumikhinConfig, callback=None):
    """Minimize the Razumikhin loss over the linear policy gains and the LRF."""
    if lrf.in_dim != sys.m:
        raise ConfigurationError(f"LRF acts on R^{lrf.in_dim}, system state is R^{sys.m}")
    _, grid = closed_loop_field(sys, policy)
    raz.ratio(grid)
    h = cfg.step if cfg.step is not None else (grid.tau / 2 if grid.K else raz.tau_V)
    _, hist_rng = _streams(cfg.seed)
    params = [np.array(policy.gains, dtype=float)] + [np.array(a) for a in lrf.icnn.arrays()]
    opt = make_optimizer(cfg, params, [cfg.policy_lr_scale] + [1.0] * (len(params) - 1))
    per_traj = max(1, cfg.lrf_batch // cfg.histories_per_iter)
    record = RunRecord()
    t0 = time.perf_counter()
    for i in range(cfg.iterations):
        lr = lr_at(cfg, i)
        current = FeedbackPolicy(params[0], policy.tau_u)
        f_num, _ = closed_loop_field(sys, current)
        hists = [control_history_sampler(sys, hist.radius, hist.lookback, rng=hist_rng)
                 for _ in range(cfg.histories_per_iter)]
        X = collect_samples(f_num, grid, raz, hists, cfg.t_stab, per_traj, h, rng=hist_rng, as_array=True)
        if not len(X):
            record.log(i, None, None, lr, diverged=True)
            _check_divergence(record, cfg)
            continue
        tape = ad.Tape()
        P = tape.vars(params)
        f_tape, _ = closed_loop_field(sys, current, gains=P[0])
        l = lrf_loss(lrf, f_tape, grid, raz, X, P[1:])
        grads = tape.gradient(l, P)
        l_val = float(ad.value(l))
        if not all(np.all(np.isfinite(g)) for g in grads):
            record.log(i, l_val, l_val, lr, diverged=True)
            _check_divergence(record, cfg)
            continue
        params = _project_icnn(opt.step(params, grads, lr), 1)
        record.log(i, l_val, l_val, lr)
        if callback:
            callback(i, record)
    record.wall_time = time.perf_counter() - t0
    new_lrf = LrfNetwork(IcnnParams.from_arrays(params[1:]), lrf.c, lrf.d)
    return FeedbackPolicy(params[0], policy.tau_u), new_lrf, record


def initial_observations(dataset):
    """y(0) per trajectory, shape (L, n)."""
    return np.stack([tr.prediction()[1][0] for tr in dataset.trajectories])


def true_augmented_state(sys: BenchmarkSystem, dataset):
    """Unobserved latent coordinates at t = 0 per trajectory (ground truth)."""
    hidden = [i for i in range(sys.m) if i not in sys.obs_indices]
    return np.stack([np.asarray(tr.z0, float)[hidden] for tr in dataset.trajectories])


def train_anode(baseline: AnodeBaseline, dataset, cfg: TrainConfig, z_aug=None, h: float | None = None,
                callback=None):
    """Fit the augmented neural ODE on whole trajectories.

    ``z_aug`` (L, a) holds the augmented initial states: the truth for
    ``fixed-true``, ignored (zeros) for ``zero``, and the starting point for ``learned``.
    Returns (baseline, z_aug, RunRecord).
    """
    h = 0.15 if h is None else h
    y0 = initial_observations(dataset)
    L = len(dataset)
    if baseline.ic_mode == "zero" or z_aug is None:
        if baseline.ic_mode == "fixed-true" and z_aug is None:
            raise ConfigurationError("fixed-true mode needs the true augmented states")
        z_aug = np.zeros((L, baseline.a))
    z_aug = np.array(z_aug, dtype=float).reshape(L, baseline.a)
    times = dataset.trajectories[0].prediction()[0]
    for tr in dataset.trajectories[1:]:
        if not np.allclose(tr.prediction()[0], times):
            raise ConfigurationError("ANODE training needs identical observation times per trajectory")
    ys = np.stack([tr.prediction()[1] for tr in dataset.trajectories], axis=1)
    learn_ic = baseline.ic_mode == "learned"
    params = [np.array(a) for a in baseline.params.arrays()] + ([z_aug] if learn_ic else [])
    opt = make_optimizer(cfg, params)
    record = RunRecord()
    t0 = time.perf_counter()
    for i in range(cfg.iterations):
        lr = lr_at(cfg, i)
        tape = ad.Tape()
        P = tape.vars(params)
        theta = P[:-1] if learn_ic else P
        za = P[-1] if learn_ic else z_aug
        try:
            J = anode_loss(baseline, anode_initial_state(baseline, y0, za), times - times[0], ys, h, theta)
            loss = ad.scale(J, 1.0 / ys.size)
            grads = tape.gradient(loss, P)
        except DivergenceError:
            record.log(i, None, None, lr, diverged=True)
            _check_divergence(record, cfg)
            continue
        params = opt.step(params, grads, lr)
        record.log(i, float(ad.value(loss)), None, lr)
        if callback:
            callback(i, record)
    record.wall_time = time.perf_counter() - t0
    theta = params[:-1] if learn_ic else params
    if learn_ic:
        z_aug = params[-1]
    return baseline.with_params(MlpParams.from_arrays(theta)), z_aug, record


def anode_mse(baseline: AnodeBaseline, dataset, z_aug, h: float = 0.15) -> float:
    from .ndde import anode_predict

    y0 = initial_observations(dataset)
    z0 = np.asarray(anode_initial_state(baseline, y0, np.asarray(z_aug, float)))
    times = dataset.trajectories[0].prediction()[0]
    ys = np.stack([tr.prediction()[1] for tr in dataset.trajectories], axis=1)
    pred = anode_predict(baseline, z0, times - times[0], h)
    return float(np.mean((pred - ys) ** 2))


# --- checkpoints ------------------------------------------------------------------

def policy_to_dict(policy: FeedbackPolicy) -> dict:
    return {"format_version": 1, "kind": "policy", "gains": np.asarray(policy.gains).tolist(),
            "tau_u": policy.tau_u}


def policy_from_dict(d: dict) -> FeedbackPolicy:
    if d.get("kind") != "policy":
        raise ValueError(f"checkpoint kind {d.get('kind')!r}, expected 'policy'")
    return FeedbackPolicy(np.asarray(d["gains"], float), float(d["tau_u"]))


def save_checkpoint(path, *, model: NddeModel | None = None, lrf: LrfNetwork | None = None,
                    policy: FeedbackPolicy | None = None) -> Path:
    out = {}
    if model is not None:
        out["model"] = {"tau": model.grid.tau, "K": model.grid.K, "n": model.n, "mlp": mlp_to_dict(model.params)}
    if lrf is not None:
        out["lrf"] = lrf_to_dict(lrf)
    if policy is not None:
        out["policy"] = policy_to_dict(policy)
    path = Path(path)
    path.write_text(json.dumps(out))
    return path


def load_checkpoint(path) -> dict:
    from .dde import DelayGrid

    d = json.loads(Path(path).read_text())
    out = {}
    if "model" in d:
        m = d["model"]
        out["model"] = NddeModel(DelayGrid(m["tau"], m["K"]), mlp_from_dict(m["mlp"]), m["n"])
    if "lrf" in d:
        out["lrf"] = lrf_from_dict(d["lrf"])
    if "policy" in d:
        out["policy"] = policy_from_dict(d["policy"])
    return out


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
