"""GP posterior-mean interpolation of initial histories and RKHS history sampling."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, optimize

from .ad import ConfigurationError
from .dde import HistoryFunction


class GpFitError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized or the likelihood search failed."""


@dataclass(frozen=True)
class RbfKernel:
    l: float
    sigma_k2: float

    def __post_init__(self):
        if not (self.l > 0 and self.sigma_k2 > 0):
            raise ConfigurationError(f"RBF kernel needs l > 0 and sigma_k2 > 0, got {self}")

    def __call__(self, t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        return self.sigma_k2 * np.exp(-((t - s) ** 2) / (2.0 * self.l**2))

    def matrix(self, t, s):
        return self(np.asarray(t)[:, None], np.asarray(s)[None, :])


def kernel_eval(k: RbfKernel, t, s):
    return k(t, s)


def _as_obs(times, values):
    times = np.asarray(times, dtype=float).ravel()
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) == 0 or values.shape[0] != len(times):
        raise ConfigurationError("need at least one observation with matching times and values")
    return times, values


@dataclass(frozen=True)
class GpInterpolant:
    """Posterior mean psi_i(t) = k(t, T) a_i, one GP per state dimension.

    ``kernels`` and ``noise_vars`` hold per-dimension hyperparameters;
    ``coeffs`` has shape (len(times), n).
    """

    times: np.ndarray
    coeffs: np.ndarray
    kernels: tuple
    noise_vars: tuple

    @property
    def dim(self):
        return self.coeffs.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.dim,))
        for i, k in enumerate(self.kernels):
            out[..., i] = k(t[..., None], self.times) @ self.coeffs[:, i]
        return out

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "coefficients": self.coeffs.tolist(),
            "length_scales": [k.l for k in self.kernels],
            "kernel_variances": [k.sigma_k2 for k in self.kernels],
            "noise_variances": list(self.noise_vars),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpInterpolant":
        kernels = tuple(RbfKernel(l, s) for l, s in zip(d["length_scales"], d["kernel_variances"]))
        return cls(np.asarray(d["times"], float), np.asarray(d["coefficients"], float), kernels,
                   tuple(d["noise_variances"]))

    def as_history(self, lookback: float, shift: float = 0.0) -> HistoryFunction:
        """Restrict to [shift - lookback, shift] and re-parameterize onto [-lookback, 0]."""
        return HistoryFunction(lambda s: self(np.asarray(s) + shift), lookback, kind="gp-mean")


def _factor(times, kernel, noise_var):
    K = kernel.matrix(times, times) + noise_var * np.eye(len(times))
    try:
        return linalg.cho_factor(K, lower=True)
    except linalg.LinAlgError:
        dup = [float(t) for t, c in zip(*np.unique(times, return_counts=True)) if c > 1]
        raise GpFitError(f"kernel matrix not positive definite (duplicate times: {dup})") from None


def fit_posterior_mean(times, values, kernel, noise_var) -> GpInterpolant:
    """Posterior mean coefficients (K_TT + noise I)^-1 Y.

    ``kernel``/``noise_var`` may be single values (shared) or per-dimension sequences.
    """
    times, values = _as_obs(times, values)
    n = values.shape[1]
    kernels = tuple(kernel) if isinstance(kernel, (list, tuple)) else (kernel,) * n
    noises = tuple(noise_var) if np.ndim(noise_var) else (float(noise_var),) * n
    if any(not s > 0 for s in noises):
        raise ConfigurationError("noise variance must be positive")
    coeffs = np.empty_like(values)
    for i in range(n):
        cf = _factor(times, kernels[i], noises[i])
        coeffs[:, i] = linalg.cho_solve(cf, values[:, i])
    return GpInterpolant(times, coeffs, kernels, noises)


def log_marginal_likelihood(times, y, l, sigma_k2, noise_var) -> float:
    """log p(y | T) for one scalar output; -inf when the factorization fails."""
    times = np.asarray(times, float)
    y = np.asarray(y, float)
    try:
        cf = _factor(times, RbfKernel(l, sigma_k2), noise_var)
    except (GpFitError, ConfigurationError):
        return -np.inf
    a = linalg.cho_solve(cf, y)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * y @ a - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi))


# bounds on log(l), log(sigma_k2), log(noise_var)
LOG_BOUNDS = ((np.log(1e-2), np.log(1e2)), (np.log(1e-6), np.log(1e3)), (np.log(1e-8), np.log(1e1)))


def grid_search_hyperparameters(times, y, grid):
    """Best (l, sigma_k2, noise_var) over the Cartesian product of ``grid``'s three axes."""
    best, best_val = None, -np.inf
    for cand in itertools.product(*grid):
        v = log_marginal_likelihood(times, y, *cand)
        if v > best_val:
            best, best_val = cand, v
    if best is None:
        raise GpFitError("every grid candidate had a non-finite marginal likelihood")
    return tuple(float(c) for c in best), best_val


def fit_hyperparameters(times, values, init=(1.0, 1.0, 0.1), n_starts=4, seed=0):
    """Maximize the marginal likelihood per dimension.

    Multi-start L-BFGS-B in log-parameters (finite-difference gradients), with
    a log-grid fallback.  Returns one (l, sigma_k2, noise_var) per dimension;
    each has likelihood no lower than ``init``.
    """
    times, values = _as_obs(times, values)
    if len(times) < 2:
        raise ConfigurationError("hyperparameter fitting needs at least two observations")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in LOG_BOUNDS])
    hi = np.array([b[1] for b in LOG_BOUNDS])
    x_init = np.clip(np.log(np.asarray(init, float)), lo, hi)
    out = []
    for i in range(values.shape[1]):
        y = values[:, i]

        def neg(x):
            v = log_marginal_likelihood(times, y, *np.exp(x))
            return 1e10 if not np.isfinite(v) else -v

        starts = [x_init] + [rng.uniform(lo, hi) for _ in range(n_starts - 1)]
        best_x, best_f = x_init, neg(x_init)
        for x0 in starts:
            res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=LOG_BOUNDS)
            if res.fun < best_f:
                best_x, best_f = res.x, res.fun
        if best_f >= 1e10:
            grid = [np.exp(np.linspace(a, b, 7)) for a, b in LOG_BOUNDS]
            (cand, _) = grid_search_hyperparameters(times, y, grid)
            best_x = np.log(cand)
        out.append(tuple(float(v) for v in np.exp(best_x)))
    return out


def fit_gp(times, values, init=(1.0, 1.0, 0.1), seed=0) -> GpInterpolant:
    """Hyperparameters by marginal likelihood, then the posterior mean."""
    hps = fit_hyperparameters(times, values, init=init, seed=seed)
    return fit_posterior_mean(times, values, [RbfKernel(l, s) for l, s, _ in hps], [nv for *_, nv in hps])


def read_observations_csv(path):
    """CSV rows ``t, y1, ..., yn`` (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                continue  # header
    arr = np.asarray(rows, float)
    return arr[:, 0], arr[:, 1:]


def save_interpolant(gp: GpInterpolant, path) -> None:
    Path(path).write_text(json.dumps(gp.to_dict()))


# --- RKHS history sampling --------------------------------------------------

@dataclass(frozen=True)
class RkhsHistorySampler:
    """Random histories sum_i c_i k(t, t_i) with |c| <= A, 1/l in [0, B], sigma_k in [0, C]."""

    A: float
    B: float
    C: float
    n_centers: int
    lookback: float
    dim: int = 1

    def __post_init__(self):
        if not (self.A > 0 and self.B > 0 and self.C > 0):
            raise ConfigurationError("sampler bounds A, B, C must be positive")
        if self.n_centers < 1 or not self.lookback > 0:
            raise ConfigurationError("need at least one center and a positive lookback")

    @property
    def centers(self):
        return np.linspace(-self.lookback, 0.0, self.n_centers)

    def lipschitz_bound(self) -> float:
        return self.A * self.C**2 * self.B * np.sqrt(self.n_centers / np.e)


@dataclass(frozen=True)
class RkhsHistory:
    centers: np.ndarray
    coeffs: np.ndarray  # (n_centers, dim)
    inv_l: np.ndarray   # (dim,)
    sigma_k: np.ndarray  # (dim,)

    def __call__(self, t):
        t = np.asarray(t, float)
        dt = t[..., None] - self.centers
        out = np.empty(t.shape + (self.coeffs.shape[1],))
        for i in range(self.coeffs.shape[1]):
            k = self.sigma_k[i] ** 2 * np.exp(-0.5 * (dt * self.inv_l[i]) ** 2)
            out[..., i] = k @ self.coeffs[:, i]
        return out


def sample_ball(rng, dim, radius):
    """Uniform sample from the closed L2-ball of given radius in R^dim."""
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform() ** (1.0 / dim)


def sample_history(s: RkhsHistorySampler, seed=None, rng=None) -> HistoryFunction:
    """Draw one history; each state dimension gets its own coefficients and kernel."""
    rng = np.random.default_rng(seed) if rng is None else rng
    coeffs = np.stack([sample_ball(rng, s.n_centers, s.A) for _ in range(s.dim)], axis=1)
    inv_l = rng.uniform(0.0, s.B, size=s.dim)
    sigma_k = rng.uniform(0.0, s.C, size=s.dim)
    fn = RkhsHistory(s.centers, coeffs, inv_l, sigma_k)
    return HistoryFunction(fn, s.lookback, kind="analytic")
