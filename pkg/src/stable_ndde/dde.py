"""Constant-delay DDE integration by the method of steps.

Classical RK4 on a fixed mesh ``t_i = i*h`` with ``tau/h`` integral, so every
propagated discontinuity ``j*tau`` is a mesh point.  Delayed lookups at stage
times land either on mesh points (exact step values), on interval midpoints
(cubic Hermite continuous extension) or inside the initial history.

The stepper only uses :mod:`stable_ndde.ad` primitives, so integrating a vector
field whose parameters are tape variables yields a tape-recorded solution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ad
from .ad import ConfigurationError


class DomainError(ValueError):
    """Evaluation outside the domain of a history or solution."""


class DivergenceError(FloatingPointError):
    def __init__(self, t: float, norm: float):
        super().__init__(f"solution diverged at t={t:.6g} (|x|={norm:.3g})")
        self.t = t
        self.norm = norm


_EPS = 1e-9


class HistoryFunction:
    """Initial history psi on [-lookback, 0].

    ``evaluator`` maps an array of times to an array of shape ``t.shape + (n,)``
    (or ``t.shape + (B, n)`` for stacked histories).
    """

    def __init__(self, evaluator: Callable, lookback: float, kind: str = "analytic"):
        if lookback < 0:
            raise ConfigurationError("history lookback must be nonnegative")
        self.evaluator = evaluator
        self.lookback = float(lookback)
        self.kind = kind

    def __call__(self, t):
        tt = np.asarray(t, dtype=float)
        if np.any(tt > _EPS) or np.any(tt < -self.lookback - _EPS * max(1.0, self.lookback)):
            raise DomainError(f"history evaluated outside [-{self.lookback}, 0]: {tt.min()}..{tt.max()}")
        return self.evaluator(tt)

    def sup_norm(self, n_grid=1001) -> np.ndarray:
        """max over a fine grid of |psi(s)|_2 (per batch row when stacked)."""
        s = np.linspace(-self.lookback, 0.0, n_grid)
        vals = np.asarray(self(s))
        return np.max(np.linalg.norm(vals, axis=-1), axis=0)


def constant_history(value, lookback: float) -> HistoryFunction:
    value = np.asarray(value, dtype=float)

    def ev(t):
        return np.broadcast_to(value, np.shape(t) + value.shape).copy()
    return HistoryFunction(ev, lookback, kind="analytic")


def stack_histories(histories) -> HistoryFunction:
    """Batch several histories; evaluation returns shape ``t.shape + (B, n)``."""
    lookback = min(h.lookback for h in histories)

    def ev(t):
        return np.stack([h(t) for h in histories], axis=-2)
    return HistoryFunction(ev, lookback, kind=histories[0].kind)


@dataclass(frozen=True)
class DelayGrid:
    tau: float
    K: int

    def __post_init__(self):
        if self.K < 0 or int(self.K) != self.K:
            raise ConfigurationError(f"number of delays must be a nonnegative integer, got {self.K}")
        if self.K > 0 and not self.tau > 0:
            raise ConfigurationError(f"delay must be positive, got {self.tau}")

    @property
    def r(self) -> float:
        return self.K * self.tau


@dataclass
class VectorFieldSpec:
    """Right-hand side f(x(t), x(t - tau), ..., x(t - K tau)) on the last axis."""

    fn: Callable
    n: int
    kind: str = "analytic-open"
    lipschitz: float | None = None

    def __call__(self, v):
        return self.fn(v)


@dataclass
class DenseSolution:
    """Mesh values and derivatives with a cubic Hermite continuous extension."""

    h: float
    xs: list
    fs: list
    history: HistoryFunction
    grid: DelayGrid
    valid_until: np.ndarray | None = None
    _stacked: tuple | None = field(default=None, repr=False)

    @property
    def t_final(self) -> float:
        return (len(self.xs) - 1) * self.h

    @property
    def mesh(self) -> np.ndarray:
        return np.arange(len(self.xs)) * self.h

    def __call__(self, t: float):
        """x(t), recorded on the tape when the solution is."""
        if t <= 0.0:
            if t >= -_EPS:
                return self.xs[0]
            return self.history(t)
        pos = t / self.h
        i = int(math.floor(pos + 1e-9))
        M = len(self.xs) - 1
        if i > M or (i == M and pos - M > 1e-9):
            raise DomainError(f"t={t} beyond integrated horizon {self.t_final}")
        theta = pos - i
        if abs(theta) <= 1e-9:
            return self.xs[i]
        return hermite(theta, self.h, self.xs[i], self.xs[i + 1], self.fs[i], self.fs[i + 1])

    def stacked(self):
        if self._stacked is None:
            self._stacked = (np.stack([ad.value(x) for x in self.xs]), np.stack([ad.value(f) for f in self.fs]))
        return self._stacked

    def sample(self, times) -> np.ndarray:
        """Vectorized numeric evaluation at many times (history for t < 0)."""
        times = np.asarray(times, dtype=float)
        X, F = self.stacked()
        out = np.empty(times.shape + X.shape[1:])
        neg = times < 0
        if np.any(neg):
            out[neg] = self.history(times[neg])
        pos = ~neg
        if np.any(pos):
            tp = times[pos]
            M = len(self.xs) - 1
            if np.any(tp > self.t_final * (1 + 1e-12) + 1e-12):
                raise DomainError(f"sample beyond integrated horizon {self.t_final}")
            p = tp / self.h
            i = np.clip(np.floor(p + 1e-9).astype(int), 0, max(M - 1, 0))
            th = (p - i).reshape((-1,) + (1,) * (X.ndim - 1))
            h00, h10, h01, h11 = _hermite_basis(th)
            vals = h00 * X[i] + h10 * self.h * F[i] + h01 * X[i + 1] + h11 * self.h * F[i + 1]
            # mesh points return the stepped values exactly
            near = np.rint(p).astype(int)
            on_mesh = np.abs(p - near) <= 1e-9
            vals[on_mesh] = X[near[on_mesh]]
            out[pos] = vals
        return out

    def delayed_state(self, t: float):
        return delayed_state(self, self.history, self.grid, t)


def _hermite_basis(th):
    th2 = th * th
    th3 = th2 * th
    return 2 * th3 - 3 * th2 + 1, th3 - 2 * th2 + th, -2 * th3 + 3 * th2, th3 - th2


def hermite(theta, h, x0, x1, f0, f1):
    h00, h10, h01, h11 = _hermite_basis(theta)
    return ad.lincomb((h00, h10 * h, h01, h11 * h), (x0, f0, x1, f1))


def _resolve_step(grid: DelayGrid, h: float, strict_overlap: bool) -> tuple[float, int]:
    if not h > 0:
        raise ConfigurationError(f"step must be positive, got {h}")
    if grid.K == 0:
        return h, 0
    if h > grid.tau * (1 + 1e-12):
        raise ConfigurationError(f"step {h} exceeds delay {grid.tau}; delayed lookups would overlap the step")
    m = int(math.ceil(grid.tau / h - 1e-9))
    if strict_overlap and m < 2:
        raise ConfigurationError("step must be at most tau/2 (pass strict_overlap=False to allow h = tau)")
    return grid.tau / m, m


def integrate(f, grid: DelayGrid, psi: HistoryFunction, t_f: float, h: float, *,
              divergence_bound: float = 1e6, truncate_on_divergence: bool = False,
              strict_overlap: bool = True) -> DenseSolution:
    """Solve x'(t) = f(x(t), x(t-tau), ..., x(t-K tau)) on [0, t_f] with x = psi on [-r, 0].

    The step is snapped to ``tau/m`` and the last mesh point is ``ceil(t_f/h)*h``.
    Works for batched states (B, n) and for tape-recorded vector fields.  With
    ``truncate_on_divergence`` (numeric mode only) rows that blow up are frozen
    at zero and ``valid_until`` records their last finite time.
    """
    if not t_f > 0:
        raise ConfigurationError(f"final time must be positive, got {t_f}")
    if psi.lookback < grid.r - 1e-12:
        raise ConfigurationError(f"history covers {psi.lookback}, model needs lookback {grid.r}")
    h, m = _resolve_step(grid, h, strict_overlap)
    M = int(math.ceil(t_f / h - 1e-9))
    K = grid.K

    hist_vals = {}
    if K:
        # every history lookup is at a half-step multiple in [-r, 0]
        ks = np.arange(-2 * m * K, 1)
        vals = np.asarray(psi(ks * (h / 2)))
        hist_vals = {int(k): vals[i] for i, k in enumerate(ks)}

    x0 = psi(np.asarray(0.0)) if not K else hist_vals[0]
    xs = [x0]
    fs = []
    mids = {}

    def at(idx2):
        """State at time idx2*h/2."""
        if idx2 <= 0:
            return xs[0] if idx2 == 0 else hist_vals[idx2]
        i, rem = divmod(idx2, 2)
        if rem == 0:
            return xs[i]
        mid = mids.get(i)
        if mid is None:
            mid = hermite(0.5, h, xs[i], xs[i + 1], fs[i], fs[i + 1])
            mids[i] = mid
        return mid

    def field_at(x, idx2):
        if not K:
            return f(x)
        parts = [x] + [at(idx2 - 2 * j * m) for j in range(1, K + 1)]
        return f(ad.concat(parts, axis=-1))

    valid_until = None
    x = x0
    for i in range(M):
        i2 = 2 * i
        k1 = field_at(x, i2)
        fs.append(k1)
        k2 = field_at(ad.lincomb((1.0, 0.5 * h), (x, k1)), i2 + 1)
        k3 = field_at(ad.lincomb((1.0, 0.5 * h), (x, k2)), i2 + 1)
        k4 = field_at(ad.lincomb((1.0, h), (x, k3)), i2 + 2)
        x = ad.lincomb((1.0, h / 6, h / 3, h / 3, h / 6), (x, k1, k2, k3, k4))
        xv = ad.value(x)
        nrm = np.linalg.norm(xv, axis=-1)
        bad = ~np.isfinite(nrm) | (nrm > divergence_bound)
        if np.any(bad):
            t_bad = (i + 1) * h
            if not truncate_on_divergence:
                raise DivergenceError(t_bad, float(np.max(np.where(np.isfinite(nrm), nrm, np.inf))))
            if ad.is_var(x):
                raise ConfigurationError("truncation on divergence is only available for numeric integration")
            if valid_until is None:
                valid_until = np.full(np.shape(nrm), np.inf)
            newly = bad & np.isinf(valid_until)
            valid_until[newly] = i * h
            x = np.where(bad[..., None], 0.0, xv)
        xs.append(x)
    fs.append(field_at(x, 2 * M))
    if valid_until is not None:
        valid_until = np.where(np.isinf(valid_until), M * h, valid_until)
    return DenseSolution(h, xs, fs, psi, grid, valid_until)


def integrate_differentiable(f, grid, psi, t_f, h, **kw) -> DenseSolution:
    """Alias of :func:`integrate` for vector fields closing over tape variables."""
    return integrate(f, grid, psi, t_f, h, **kw)


def delayed_state(sol: DenseSolution, psi: HistoryFunction, grid: DelayGrid, t: float):
    """(x(t), x(t - tau), ..., x(t - K tau)) concatenated on the last axis."""
    if t - grid.r < -psi.lookback - 1e-9:
        raise DomainError(f"lookback to {t - grid.r} exceeds history domain [-{psi.lookback}, 0]")
    parts = []
    for j in range(grid.K + 1):
        s = t - j * grid.tau
        parts.append(psi(s) if s < -1e-12 else sol(max(s, 0.0)))
    return ad.concat(parts, axis=-1)


def write_trajectory_csv(sol: DenseSolution, times, path) -> None:
    """Rows ``t, x1..xn`` for a single (unbatched) trajectory."""
    vals = sol.sample(np.asarray(times, float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(vals.shape[-1])])
        for t, row in zip(times, vals):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in np.ravel(row)])
