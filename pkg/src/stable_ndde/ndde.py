"""Neural DDE model, least-squares objective, window batching and the ANODE baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import ConfigurationError, ShapeError
from .dde import (DelayGrid, HistoryFunction, VectorFieldSpec, constant_history,
                  integrate, stack_histories)
from .gp import RbfKernel, fit_hyperparameters, fit_posterior_mean
from .nets import MLP_HIDDEN, MlpParams, mlp_forward
from .systems import TrajectoryDataset


def default_step(grid: DelayGrid, h: float | None = None) -> float:
    if h is not None:
        return h
    return grid.tau / 2 if grid.K else 0.05


@dataclass(frozen=True)
class NddeModel:
    grid: DelayGrid
    params: MlpParams
    n: int

    def __post_init__(self):
        if self.params.in_dim != self.n * (self.grid.K + 1) or self.params.out_dim != self.n:
            raise ShapeError(f"mlp maps {self.params.in_dim}->{self.params.out_dim}, "
                             f"model needs {self.n * (self.grid.K + 1)}->{self.n}")

    @classmethod
    def init(cls, n, tau, K, hidden=MLP_HIDDEN, seed=0):
        return cls(DelayGrid(tau, K), MlpParams.init(n * (K + 1), n, hidden, seed=seed), n)

    def field(self, arrays=None) -> VectorFieldSpec:
        arrays = self.params.arrays() if arrays is None else arrays
        return VectorFieldSpec(lambda v: mlp_forward(arrays, v), self.n, kind="neural")

    def with_params(self, params: MlpParams) -> "NddeModel":
        return NddeModel(self.grid, params, self.n)


def solve(model: NddeModel, psi: HistoryFunction, t_f: float, h=None, arrays=None, **kw):
    return integrate(model.field(arrays), model.grid, psi, t_f, default_step(model.grid, h), **kw)


def predict(model: NddeModel, psi: HistoryFunction, t, h=None):
    """x_hat(t) for a time or an array of times (numeric)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ConfigurationError("predictions are only defined for t >= 0")
    t_max = float(np.max(t))
    if t_max == 0.0:
        return np.broadcast_to(psi(np.zeros(t.shape)), t.shape + np.shape(psi(0.0))).copy()
    return solve(model, psi, t_max, h).sample(t)


def squared_error(sol, times, ys):
    """sum_i |y_i - x_hat(t_i)|^2 with x_hat read from a (possibly taped) dense solution."""
    preds = ad.stack([sol(float(t)) for t in times], axis=0)
    return ad.sumsq(ad.sub(preds, np.asarray(ys, dtype=float)))


def ndde_loss(model: NddeModel, psi: HistoryFunction, times, ys, h=None, arrays=None):
    """J = sum_i |y_i - x_hat(t_i)|^2.

    ``ys`` has shape (len(times), n) or, with a stacked history, (len(times), B, n).
    Pass ``arrays`` (tape variables) to record the loss for differentiation.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ConfigurationError("observation times must be nonnegative")
    t_f = max(float(times.max()), default_step(model.grid, h))
    sol = solve(model, psi, t_f, h, arrays)
    return squared_error(sol, times, ys)


# --- windows --------------------------------------------------------------------

@dataclass
class Window:
    trajectory: int
    start: int
    times: np.ndarray  # relative to the window start
    ys: np.ndarray
    history: HistoryFunction


@dataclass
class HistoryFitter:
    """Per-trajectory GP hyperparameters; window histories condition on [t_s - r, t_s]."""

    dataset: TrajectoryDataset
    lookback: float
    hyper: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not self.hyper:
            for tr in self.dataset.trajectories:
                t_h, y_h = tr.history()
                t_fit, y_fit = (t_h, y_h) if len(t_h) >= 2 else (tr.times, tr.values)
                self.hyper.append(fit_hyperparameters(t_fit, y_fit, seed=self.seed))

    def history(self, k: int, t_start: float) -> HistoryFunction:
        key = (k, round(t_start, 12))
        if key not in self.cache:
            tr = self.dataset.trajectories[k]
            tol = 1e-9 * max(1.0, abs(t_start))
            keep = (tr.times >= t_start - self.lookback - tol) & (tr.times <= t_start + tol)
            hp = self.hyper[k]
            gp = fit_posterior_mean(tr.times[keep], tr.values[keep],
                                    [RbfKernel(l, s) for l, s, _ in hp], [nv for *_, nv in hp])
            self.cache[key] = gp.as_history(self.lookback, shift=t_start)
        return self.cache[key]


def _valid_start(tr, start, batch_time, lookback):
    if start + batch_time > len(tr.times):
        return False
    t_s = tr.times[start]
    if t_s < -1e-12:
        return False
    return t_s - lookback >= tr.times[0] - 1e-9 * max(1.0, lookback)


def valid_starts(dataset: TrajectoryDataset, batch_time: int, lookback: float):
    return [(k, s) for k, tr in enumerate(dataset.trajectories)
            for s in range(len(tr.times)) if _valid_start(tr, s, batch_time, lookback)]


def sample_window_starts(dataset: TrajectoryDataset, batch_time: int, batch_size: int, rng, lookback: float,
                         max_tries: int = 100000):
    """Uniform (trajectory, start) pairs by rejection over all candidate starts."""
    if batch_time < 1 or any(batch_time > len(tr.prediction()[0]) for tr in dataset.trajectories):
        raise ConfigurationError("batch_time exceeds the number of observations")
    out = []
    tries = 0
    while len(out) < batch_size:
        tries += 1
        if tries > max_tries:
            raise ConfigurationError("no valid window start: histories extend before the available data")
        k = int(rng.integers(len(dataset.trajectories)))
        tr = dataset.trajectories[k]
        s = int(rng.integers(len(tr.times)))
        if _valid_start(tr, s, batch_time, lookback):
            out.append((k, s))
    return out


def batch_windows(dataset: TrajectoryDataset, batch_time: int, batch_size: int, seed=None, *,
                  lookback: float, fitter: HistoryFitter | None = None, rng=None) -> list:
    """Contiguous observation windows with GP histories on [t_start - r, t_start]."""
    rng = np.random.default_rng(seed) if rng is None else rng
    fitter = HistoryFitter(dataset, lookback) if fitter is None else fitter
    wins = []
    for k, s in sample_window_starts(dataset, batch_time, batch_size, rng, lookback):
        tr = dataset.trajectories[k]
        t = tr.times[s:s + batch_time]
        wins.append(Window(k, s, t - t[0], tr.values[s:s + batch_time], fitter.history(k, float(t[0]))))
    return wins


def full_windows(dataset: TrajectoryDataset, lookback: float, fitter: HistoryFitter | None = None) -> list:
    """One window per trajectory covering all prediction observations."""
    fitter = HistoryFitter(dataset, lookback) if fitter is None else fitter
    wins = []
    for k, tr in enumerate(dataset.trajectories):
        s = int(np.searchsorted(tr.times, -1e-12))
        t = tr.times[s:]
        wins.append(Window(k, s, t - t[0], tr.values[s:], fitter.history(k, float(t[0]))))
    return wins


def group_windows(windows):
    """Merge windows with identical relative times into stacked batches (history, times, ys)."""
    groups = {}
    for w in windows:
        groups.setdefault((len(w.times), tuple(np.round(w.times, 10))), []).append(w)
    out = []
    for ws in groups.values():
        psi = stack_histories([w.history for w in ws])
        ys = np.stack([w.ys for w in ws], axis=1)
        out.append((psi, ws[0].times, ys))
    return out


def windows_loss(model: NddeModel, windows, h=None, arrays=None):
    total = None
    for psi, times, ys in group_windows(windows):
        J = ndde_loss(model, psi, times, ys, h, arrays)
        total = J if total is None else ad.add(total, J)
    return total


def dataset_mse(model: NddeModel, dataset: TrajectoryDataset, lookback: float, h=None,
                fitter: HistoryFitter | None = None, horizon: float | None = None) -> float:
    """Mean squared prediction error over all scalar observations at t >= 0."""
    wins = full_windows(dataset, lookback, fitter)
    sq, count = 0.0, 0
    for w in wins:
        keep = w.times <= (np.inf if horizon is None else horizon + 1e-9)
        pred = predict(model, w.history, w.times[keep], h)
        sq += float(np.sum((pred - w.ys[keep]) ** 2))
        count += w.ys[keep].size
    return sq / count


# --- ANODE --------------------------------------------------------------------

ANODE_IC_MODES = ("fixed-true", "learned", "zero")


@dataclass(frozen=True)
class AnodeBaseline:
    """Neural ODE on R^(n+a); the first n coordinates are observed."""

    params: MlpParams
    n: int
    a: int
    ic_mode: str = "learned"

    def __post_init__(self):
        if self.ic_mode not in ANODE_IC_MODES:
            raise ConfigurationError(f"ic_mode must be one of {ANODE_IC_MODES}")
        d = self.n + self.a
        if self.params.in_dim != d or self.params.out_dim != d:
            raise ShapeError(f"anode mlp must map {d}->{d}")

    @classmethod
    def init(cls, n, a, ic_mode="learned", hidden=MLP_HIDDEN, seed=0):
        return cls(MlpParams.init(n + a, n + a, hidden, seed=seed), n, a, ic_mode)

    def field(self, arrays=None) -> VectorFieldSpec:
        arrays = self.params.arrays() if arrays is None else arrays
        return VectorFieldSpec(lambda v: mlp_forward(arrays, v), self.n + self.a, kind="neural")

    def project(self, z):
        return ad.getitem(z, (Ellipsis, slice(0, self.n)))

    def with_params(self, params):
        return AnodeBaseline(params, self.n, self.a, self.ic_mode)


def anode_initial_state(baseline: AnodeBaseline, y0, z_aug):
    """Augmented initial condition (y0, z_aug); ``z_aug`` may be a tape variable."""
    if baseline.a == 0:
        return np.asarray(y0, dtype=float)
    return ad.concat([np.asarray(y0, dtype=float), z_aug], axis=-1)


def anode_solve(baseline: AnodeBaseline, z0, t_f, h=0.05, arrays=None):
    return integrate(baseline.field(arrays), DelayGrid(0.0, 0), _initial_history(z0), t_f, h)


def _initial_history(z0):
    if ad.is_var(z0):
        return HistoryFunction(lambda t: z0, 0.0, kind="analytic")
    return constant_history(z0, 0.0)


def anode_loss(baseline: AnodeBaseline, z0, times, ys, h=0.05, arrays=None):
    """Least squares on the projected ODE solution; gradients reach params and a taped ``z0``."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ConfigurationError("observation times must be nonnegative")
    sol = anode_solve(baseline, z0, max(float(times.max()), h), h, arrays)
    preds = ad.stack([baseline.project(sol(float(t))) for t in times], axis=0)
    return ad.sumsq(ad.sub(preds, np.asarray(ys, dtype=float)))


def anode_predict(baseline: AnodeBaseline, z0, times, h=0.05):
    times = np.asarray(times, dtype=float)
    sol = anode_solve(baseline, np.asarray(z0, float), max(float(times.max()), h), h)
    return sol.sample(times)[..., :baseline.n]
