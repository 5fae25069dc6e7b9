"""Lyapunov-Razumikhin loss, sample collection and empirical decay certificates."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .ad import ConfigurationError
from .dde import DelayGrid, VectorFieldSpec, integrate, stack_histories
from .nets import lrf_forward, lrf_value_and_derivative


@dataclass(frozen=True)
class RazumikhinConfig:
    tau_V: float
    K_V: int
    alpha: float
    q: float
    eps: float = 0.01  # radius excluded from the discretization-margin bound

    def __post_init__(self):
        if not self.q > 1:
            raise ConfigurationError(f"Razumikhin margin q must exceed 1, got {self.q}")
        if not self.alpha > 0:
            raise ConfigurationError(f"decay coefficient alpha must be positive, got {self.alpha}")
        if not self.tau_V > 0 or self.K_V < 0 or int(self.K_V) != self.K_V:
            raise ConfigurationError("need tau_V > 0 and an integer K_V >= 0")

    @property
    def r_V(self) -> float:
        return self.K_V * self.tau_V

    @property
    def gamma(self) -> float:
        return gamma(self)

    def ratio(self, grid: DelayGrid) -> int:
        """Integer l with tau = l * tau_V; also checks r_V >= r."""
        if grid.K == 0:
            return 1
        l = grid.tau / self.tau_V
        if abs(l - round(l)) > 1e-9 * max(1.0, l) or round(l) < 1:
            raise ConfigurationError(f"model delay {grid.tau} is not an integer multiple of tau_V={self.tau_V}")
        l = int(round(l))
        if grid.K * l > self.K_V:
            raise ConfigurationError(f"LRF lookback r_V={self.r_V} is shorter than the model lookback {grid.r}")
        return l


def gamma(cfg: RazumikhinConfig) -> float:
    """Guaranteed decay rate min(alpha, log q / r_V) / 2."""
    rate = cfg.alpha if cfg.r_V == 0 else min(cfg.alpha, math.log(cfg.q) / cfg.r_V)
    return rate / 2


@dataclass(frozen=True)
class QuadraticLrf:
    """Analytic V(x) = x^T P x, used for checks against hand-derived values."""

    P: np.ndarray

    @property
    def c1(self):
        return float(np.min(np.linalg.eigvalsh(self.P)))

    @property
    def c2(self):
        return float(np.max(np.linalg.eigvalsh(self.P)))


def lrf_values(phi, x, arrays=None):
    if isinstance(phi, QuadraticLrf):
        return ad.sum(ad.mul(x, ad.matmul(x, phi.P)), axis=-1)
    return lrf_forward(phi, x, arrays)


def lrf_values_and_derivative(phi, x, v, arrays=None):
    if isinstance(phi, QuadraticLrf):
        Px = ad.matmul(x, phi.P)
        return ad.sum(ad.mul(x, Px), axis=-1), ad.scale(ad.sum(ad.mul(Px, v), axis=-1), 2.0)
    return lrf_value_and_derivative(phi, x, v, arrays)


def lower_constant(phi) -> float:
    """c1 with V(x) >= c1 |x|^2."""
    return phi.c1 if isinstance(phi, QuadraticLrf) else phi.c


@dataclass
class RazumikhinSample:
    """(x(t), x(t - tau_V), ..., x(t - K_V tau_V)) flattened; ``trajectory`` and ``t`` locate it."""

    x: np.ndarray
    trajectory: int
    t: float

    def lags(self, n: int) -> np.ndarray:
        return self.x.reshape(-1, n)


def as_lag_array(samples, n: int) -> np.ndarray:
    """Samples (list of RazumikhinSample, flat vectors, or an array) -> (S, K_V + 1, n)."""
    if isinstance(samples, np.ndarray) and samples.ndim == 3:
        return samples
    if isinstance(samples, np.ndarray) and samples.ndim == 1:
        samples = [samples]
    if isinstance(samples, RazumikhinSample):
        samples = [samples]
    rows = [s.x if isinstance(s, RazumikhinSample) else np.asarray(s, float) for s in samples]
    arr = np.stack(rows)
    if arr.shape[1] % n:
        raise ConfigurationError(f"sample length {arr.shape[1]} is not a multiple of n={n}")
    return arr.reshape(arr.shape[0], -1, n)


def razumikhin_gate(phi, X, q, arrays=None) -> np.ndarray:
    """Theta(q V(x(t)) - max_j V(x(t - j tau_V))) per sample, ties open; never differentiated."""
    S, L, n = X.shape
    V = np.asarray(ad.value(lrf_values(phi, X.reshape(S * L, n), _values(arrays)))).reshape(S, L)
    if L == 1:
        return np.ones(S)
    return (q * V[:, 0] - np.max(V[:, 1:], axis=1) >= 0).astype(float)


def _values(arrays):
    return None if arrays is None else [ad.value(a) for a in arrays]


def model_input(X, grid: DelayGrid, cfg: RazumikhinConfig) -> np.ndarray:
    """Model delayed-state vector from lag samples: indices j * l for j = 0..K."""
    l = cfg.ratio(grid)
    S, _, n = X.shape
    return X[:, [j * l for j in range(grid.K + 1)], :].reshape(S, n * (grid.K + 1))


def lrf_loss_terms(phi, f: VectorFieldSpec, grid: DelayGrid, cfg: RazumikhinConfig, samples,
                   phi_arrays=None):
    """Per-sample ReLU(V_dot + alpha V) * gate; shape (S,)."""
    n = f.n
    X = as_lag_array(samples, n)
    if X.shape[1] != cfg.K_V + 1:
        raise ConfigurationError(f"samples hold {X.shape[1]} lags, configuration needs {cfg.K_V + 1}")
    x_now = X[:, 0, :]
    fx = f(model_input(X, grid, cfg))
    V, Vdot = lrf_values_and_derivative(phi, x_now, fx, phi_arrays)
    gate = razumikhin_gate(phi, X, cfg.q, phi_arrays)
    return ad.mul(ad.relu(ad.add(Vdot, ad.scale(V, cfg.alpha))), gate)


def lrf_loss(phi, f: VectorFieldSpec, grid: DelayGrid, cfg: RazumikhinConfig, sample, phi_arrays=None):
    """Mean Razumikhin loss over one sample or a batch (tape-recorded through V and f)."""
    terms = lrf_loss_terms(phi, f, grid, cfg, sample, phi_arrays)
    return ad.scale(ad.sum(terms), 1.0 / np.shape(ad.value(terms))[0])


def sample_window(cfg: RazumikhinConfig, lookback: float, horizon: float):
    lo = max(0.0, cfg.r_V - lookback)
    if horizon < lo:
        raise ConfigurationError(f"horizon {horizon} shorter than the first full LRF lookback {lo}")
    return lo, horizon


def integrate_batch(f, grid, histories, horizon, h):
    psi = stack_histories(histories)
    sol = integrate(f, grid, psi, horizon, h, truncate_on_divergence=True)
    B = len(histories)
    valid = np.full(B, sol.t_final) if sol.valid_until is None else np.asarray(sol.valid_until).reshape(B)
    return sol, valid


def lag_states(sol, cfg: RazumikhinConfig, times, b: int) -> np.ndarray:
    """(len(times), K_V + 1, n) lag vectors of batch row ``b``."""
    lags = np.asarray(times)[:, None] - cfg.tau_V * np.arange(cfg.K_V + 1)[None, :]
    return sol.sample(lags)[:, :, b, :]


def collect_samples(f: VectorFieldSpec, grid: DelayGrid, cfg: RazumikhinConfig, histories, horizon: float,
                    per_traj: int, h: float, seed=None, rng=None, as_array: bool = False):
    """Integrate each history over [0, horizon] and read lag vectors at uniform random times.

    Blown-up trajectories contribute samples from their finite prefix only.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    lookback = min(hh.lookback for hh in histories)
    lo, hi = sample_window(cfg, lookback, horizon)
    sol, valid = integrate_batch(f, grid, histories, horizon, h)
    blocks, meta = [], []
    for b in range(len(histories)):
        top = min(hi, valid[b])
        if top < lo:
            continue
        ts = rng.uniform(lo, top, size=per_traj)
        blocks.append(lag_states(sol, cfg, ts, b))
        meta += [(b, float(t)) for t in ts]
    if not blocks:
        X = np.empty((0, cfg.K_V + 1, f.n))
    else:
        X = np.concatenate(blocks)
    if as_array:
        return X
    return [RazumikhinSample(x.ravel(), b, t) for x, (b, t) in zip(X, meta)]


# --- certificates ----------------------------------------------------------------

@dataclass
class DecayCertificateReport:
    gamma: float
    M: float
    c1: float
    c2: float
    max_residual: float
    residuals: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    final_norms: list = field(default_factory=list)
    horizon: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def verify_decay(f: VectorFieldSpec, grid: DelayGrid, cfg: RazumikhinConfig, phi, histories, horizon: float,
                 h: float, n_grid: int = 400, c2: float | None = None, slack: float = 0.05) -> DecayCertificateReport:
    """LRF residual on a fine time grid plus the exponential envelope check along fresh trajectories.

    The envelope is checked from the first time ``t0`` where the full LRF lookback exists:
    |x(s)| <= (1 + slack) M exp(-gamma (s - t0)) |x_t0|_{r_V} with M = c2 / c1.
    """
    lookback = min(hh.lookback for hh in histories)
    lo, hi = sample_window(cfg, lookback, horizon)
    sol, valid = integrate_batch(f, grid, histories, horizon, h)
    ts = np.linspace(lo, hi, n_grid)
    lags = [lag_states(sol, cfg, ts[ts <= valid[b] + 1e-12], b) for b in range(len(histories))]
    c1 = lower_constant(phi)
    if c2 is None:
        if isinstance(phi, QuadraticLrf):
            c2 = phi.c2
        else:
            pts = np.concatenate([L.reshape(-1, L.shape[-1]) for L in lags])
            nrm = np.sum(pts**2, axis=-1)
            keep = nrm > 1e-12
            c2 = float(np.max(np.asarray(lrf_values(phi, pts[keep])) / nrm[keep])) if np.any(keep) else c1
    g = gamma(cfg)
    M = c2 / c1
    residuals, violations, finals = [], [], []
    for b, L in enumerate(lags):
        diverged = valid[b] < hi - 1e-12
        res = float(np.max(np.asarray(lrf_loss_terms(phi, f, grid, cfg, L)))) if len(L) else math.inf
        residuals.append(math.inf if diverged else res)
        # envelope
        hist_ts = np.linspace(lo - cfg.r_V, lo, 200)
        seg = sol.sample(hist_ts)[:, b, :]
        x_norm0 = float(np.max(np.linalg.norm(seg, axis=-1)))
        norms = np.linalg.norm(L[:, 0, :], axis=-1)
        bound = (1 + slack) * M * np.exp(-g * (ts[:len(norms)] - lo)) * x_norm0
        violations.append(int(np.sum(norms > bound)) + (1 if diverged else 0))
        finals.append(float(np.linalg.norm(sol.sample(np.array([min(hi, valid[b])]))[0, b])))
    return DecayCertificateReport(g, M, c1, float(c2), float(max(residuals)), residuals, violations, finals,
                                  float(horizon))


@dataclass(frozen=True)
class DiscretizationMargin:
    q_tilde: float
    valid: bool
    w: float


def check_discretization_margin(cfg: RazumikhinConfig, L_f: float, c1: float, c2: float,
                                history_bound: float) -> DiscretizationMargin:
    """Effective continuous margin q~ = q / (1 - (4 c2 - c1) L_f^2 w tau_V^2 / (8 c1)), w = max(1, C / eps).

    ``history_bound`` is C, an upper bound on the state over the extended lookback.
    ``valid`` is False when the denominator is not positive (shrink tau_V).
    """
    w = max(1.0, history_bound / cfg.eps)
    a = (4 * c2 - c1) * L_f**2 * w * cfg.tau_V**2 / (8 * c1)
    if a >= 1:
        return DiscretizationMargin(math.inf, False, w)
    return DiscretizationMargin(cfg.q / (1 - a), True, w)
