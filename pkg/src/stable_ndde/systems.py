"""Benchmark dynamics, noisy data generation, LQR and closed-loop assembly."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from . import ad
from .ad import ConfigurationError
from .dde import (DelayGrid, HistoryFunction, VectorFieldSpec, constant_history,
                  integrate)

G = 9.81


class SolverError(RuntimeError):
    """Iterative solver failed to converge."""


@dataclass(frozen=True)
class BenchmarkSystem:
    id: str
    m: int
    obs_indices: tuple
    params: dict = field(default_factory=dict)
    p: int = 0  # input dimension

    @property
    def n(self) -> int:
        return len(self.obs_indices)

    def observe(self, z):
        return np.asarray(z)[..., list(self.obs_indices)]

    def rhs(self, z, u=None):
        return rhs(self, z, u)


def oscillator():
    return BenchmarkSystem("oscillator", 2, (0,))


def damped_oscillator(gamma=0.05):
    return BenchmarkSystem("damped-oscillator", 2, (0,), {"gamma": gamma})


def double_pendulum(m=1.0, l=1.0, b=0.1):
    return BenchmarkSystem("double-pendulum", 4, (0, 1), {"m1": m, "m2": m, "l": l, "b1": b, "b2": b, "g": G})


def inverted_pendulum(m=1.0, l=1.0):
    return BenchmarkSystem("inverted-pendulum", 2, (0, 1), {"m": m, "l": l, "g": G}, p=1)


def cartpole(m_cart=1.0, m_pole=0.1, half_length=0.5):
    return BenchmarkSystem("cartpole", 4, (0, 1, 2, 3),
                           {"m_cart": m_cart, "m_pole": m_pole, "l": half_length, "g": G}, p=1)


def lotka_volterra(alpha=5 / 3, beta=4 / 3, gamma=1.0, delta=1.0):
    return BenchmarkSystem("lotka-volterra", 2, (0,), {"alpha": alpha, "beta": beta, "gamma": gamma, "delta": delta})


SYSTEMS = {
    "oscillator": oscillator,
    "damped-oscillator": damped_oscillator,
    "double-pendulum": double_pendulum,
    "inverted-pendulum": inverted_pendulum,
    "cartpole": cartpole,
    "lotka-volterra": lotka_volterra,
}


def make_system(id: str, **params) -> BenchmarkSystem:
    try:
        return SYSTEMS[id](**params)
    except KeyError:
        raise ConfigurationError(f"unknown system {id!r}; choose from {sorted(SYSTEMS)}") from None


def _col(z, i):
    return ad.getitem(z, (Ellipsis, slice(i, i + 1)))


def _inv(x):
    return ad.exp(ad.scale(ad.log(x), -1.0))


def rhs(sys: BenchmarkSystem, z, u=None):
    """Right-hand side on the last axis of ``z``; ``u`` has shape z.shape[:-1] (scalar input)."""
    if np.shape(z)[-1] != sys.m:
        raise ConfigurationError(f"{sys.id}: state has {np.shape(z)[-1]} components, expected {sys.m}")
    P = sys.params
    if sys.id == "oscillator":
        return ad.matmul(z, np.array([[0.0, -1.0], [1.0, 0.0]]))
    if sys.id == "damped-oscillator":
        return ad.matmul(z, np.array([[0.0, -1.0], [1.0, -2.0 * P["gamma"]]]))
    if sys.id == "lotka-volterra":
        x, y = _col(z, 0), _col(z, 1)
        xy = ad.mul(x, y)
        return ad.concat([ad.sub(ad.scale(x, P["alpha"]), ad.scale(xy, P["beta"])),
                          ad.add(ad.scale(y, -P["gamma"]), ad.scale(xy, P["delta"]))], axis=-1)
    if sys.id == "inverted-pendulum":
        x1, x2 = _col(z, 0), _col(z, 1)
        acc = ad.scale(ad.sin(x1), P["g"] / P["l"])
        if u is not None:
            acc = ad.add(acc, ad.scale(ad.reshape(u, np.shape(u) + (1,)), 1.0 / (P["m"] * P["l"] ** 2)))
        return ad.concat([x2, acc], axis=-1)
    if sys.id == "cartpole":
        return _cartpole(P, z, u)
    if sys.id == "double-pendulum":
        return _double_pendulum(P, np.asarray(ad.value(z)))
    raise ConfigurationError(f"no dynamics for {sys.id!r}")


def _cartpole(P, z, u):
    # state (phi, phi_dot, xi, xi_dot); phi measured from upright
    mc, mp, l, g = P["m_cart"], P["m_pole"], P["l"], P["g"]
    total = mc + mp
    phi, dphi, dxi = _col(z, 0), _col(z, 1), _col(z, 3)
    s, c = ad.sin(phi), ad.cos(phi)
    force = 0.0 if u is None else ad.reshape(u, np.shape(u) + (1,))
    # temp = (F + mp l dphi^2 sin) / total
    temp = ad.scale(ad.add(force, ad.scale(ad.mul(ad.mul(dphi, dphi), s), mp * l)), 1.0 / total)
    den = ad.scale(ad.sub(4.0 / 3.0, ad.scale(ad.mul(c, c), mp / total)), l)
    ddphi = ad.mul(ad.sub(ad.scale(s, g), ad.mul(c, temp)), _inv(den))
    ddxi = ad.sub(temp, ad.scale(ad.mul(ddphi, c), mp * l / total))
    return ad.concat([dphi, ddphi, dxi, ddxi], axis=-1)


def double_pendulum_mass_forcing(P, z):
    z = np.asarray(z, float)
    m1, m2, l, g, b1, b2 = P["m1"], P["m2"], P["l"], P["g"], P["b1"], P["b2"]
    p1, p2, w1, w2 = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    I1, I2 = m1 * l**2 / 12, m2 * l**2 / 12
    dlt = p1 - p2
    M11 = m1 * l**2 / 4 + m2 * l**2 + I1
    M22 = m2 * l**2 / 4 + I2
    M12 = 0.5 * m2 * l**2 * np.cos(dlt)
    F1 = -0.5 * m2 * l**2 * np.sin(dlt) * w2**2 - (0.5 * m1 + m2) * l * g * np.sin(p1) - b1 * w1
    F2 = 0.5 * m2 * l**2 * np.sin(dlt) * w1**2 - 0.5 * m2 * l * g * np.sin(p2) - b2 * w2
    return M11 * np.ones_like(M12), M12, M22 * np.ones_like(M12), F1, F2


def _double_pendulum(P, z):
    M11, M12, M22, F1, F2 = double_pendulum_mass_forcing(P, z)
    det = M11 * M22 - M12 * M12
    if np.any(np.abs(det) < 1e-12):
        raise np.linalg.LinAlgError("double pendulum mass matrix is singular")
    a1 = (M22 * F1 - M12 * F2) / det
    a2 = (M11 * F2 - M12 * F1) / det
    return np.stack([z[..., 2], z[..., 3], a1, a2], axis=-1)


def double_pendulum_energy(P, z):
    z = np.asarray(z, float)
    m1, m2, l, g = P["m1"], P["m2"], P["l"], P["g"]
    p1, p2, w1, w2 = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    T = (0.5 * m1 * (l / 2) ** 2 * w1**2
         + 0.5 * m2 * (l**2 * w1**2 + (l / 2) ** 2 * w2**2 + l**2 * w1 * w2 * np.cos(p1 - p2))
         + 0.5 * (m1 * l**2 / 12) * w1**2 + 0.5 * (m2 * l**2 / 12) * w2**2)
    V = -m1 * g * (l / 2) * np.cos(p1) - m2 * g * (l * np.cos(p1) + (l / 2) * np.cos(p2))
    return T + V


def lotka_volterra_invariant(P, z):
    z = np.asarray(z, float)
    x, y = z[..., 0], z[..., 1]
    return P["delta"] * x - P["gamma"] * np.log(x) + P["beta"] * y - P["alpha"] * np.log(y)


def simulate(sys: BenchmarkSystem, z0, t_f: float, h: float = 1e-3, backward: bool = False):
    """Fine-step ground-truth ODE solve; ``backward`` integrates toward negative time."""
    sign = -1.0 if backward else 1.0
    spec = VectorFieldSpec(lambda z: sign * np.asarray(rhs(sys, z)), sys.m, kind="analytic-open")
    return integrate(spec, DelayGrid(0.0, 0), constant_history(z0, 0.0), t_f, h)


# --- datasets -----------------------------------------------------------------

@dataclass
class Trajectory:
    """Observations on [-lookback, T]; rows with t <= 0 form the initial history."""

    times: np.ndarray
    values: np.ndarray  # (len(times), n)
    z0: np.ndarray
    latent: np.ndarray | None = None  # true latent state at ``times``
    split: str = "train"

    def history(self):
        keep = self.times <= 1e-12
        return self.times[keep], self.values[keep]

    def prediction(self):
        keep = self.times >= -1e-12
        return self.times[keep], self.values[keep]


@dataclass
class TrajectoryDataset:
    trajectories: list
    sigma: float
    horizon: tuple
    lookback: float
    system: str = ""

    def __len__(self):
        return len(self.trajectories)

    @property
    def n(self):
        return self.trajectories[0].values.shape[1]

    def split(self, tag):
        return [tr for tr in self.trajectories if tr.split == tag]


def generate_dataset(sys: BenchmarkSystem, initial_conditions, horizon, N: int, sigma: float,
                     seed=0, lookback: float = 0.0, h: float = 1e-3, split: str = "train") -> TrajectoryDataset:
    """N equispaced noisy observations of h(z(t)) on ``horizon`` plus history samples on [t0 - lookback, t0].

    ``z(t0)`` equals the given initial condition; the history part is obtained by
    integrating backward in time.  Times are shifted so that ``t0 = 0``.
    """
    if N < 2 or sigma < 0:
        raise ConfigurationError("need N >= 2 and sigma >= 0")
    t0, tN = horizon
    rng = np.random.default_rng(seed)
    dt = (tN - t0) / (N - 1)
    n_hist = int(np.ceil(lookback / dt - 1e-9)) if lookback > 0 else 0
    t_fwd = np.arange(N) * dt
    t_bwd = -np.arange(n_hist, 0, -1) * dt
    trajs = []
    for z0 in initial_conditions:
        z0 = np.asarray(z0, float)
        fwd = simulate(sys, z0, tN - t0, h)
        Z = fwd.sample(np.minimum(t_fwd, fwd.t_final))
        if n_hist:
            bwd = simulate(sys, z0, -t_bwd[0], h, backward=True)
            Z = np.concatenate([bwd.sample(-t_bwd), Z], axis=0)
        times = np.concatenate([t_bwd, t_fwd])
        clean = sys.observe(Z)
        noisy = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean.copy()
        trajs.append(Trajectory(times, noisy, z0, Z, split))
    return TrajectoryDataset(trajs, float(sigma), (float(t0), float(tN)), float(n_hist * dt), sys.id)


def save_dataset(ds: TrajectoryDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, tr in enumerate(ds.trajectories):
        name = f"trajectory_{k:03d}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"y{i + 1}" for i in range(tr.values.shape[1])])
            for t, row in zip(tr.times, tr.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        entries.append({"file": name, "split": tr.split, "z0": tr.z0.tolist()})
    manifest = {"system": ds.system, "sigma": ds.sigma, "horizon": list(ds.horizon),
                "lookback": ds.lookback, "trajectories": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(manifest_path) -> TrajectoryDataset:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    trajs = []
    for e in man["trajectories"]:
        arr = np.loadtxt(manifest_path.parent / e["file"], delimiter=",", skiprows=1, ndmin=2)
        trajs.append(Trajectory(arr[:, 0], arr[:, 1:], np.asarray(e["z0"], float), None, e.get("split", "train")))
    return TrajectoryDataset(trajs, man["sigma"], tuple(man["horizon"]), man["lookback"], man.get("system", ""))


# --- control ------------------------------------------------------------------

@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray


def spectral_abscissa(A) -> float:
    return float(np.max(np.linalg.eigvals(np.atleast_2d(A)).real))


def _stabilizing_seed(A, B):
    if spectral_abscissa(A) < 0:
        return np.zeros((B.shape[1], A.shape[0]))
    # Bass: (A + bI) Z + Z (A + bI)^T = 2 B B^T with -(A + bI) Hurwitz
    beta = np.max(np.abs(np.linalg.eigvals(A))) + 1.0
    Ab = A + beta * np.eye(A.shape[0])
    Z = linalg.solve_continuous_lyapunov(-Ab, -2.0 * B @ B.T)
    return B.T @ np.linalg.inv(Z)


def solve_lqr(p: LqrProblem, max_iter: int = 200, tol: float = 1e-12):
    """Gain K = R^-1 B^T P from the stabilizing Riccati solution (Newton-Kleinman).

    The optimal input is ``u = -K x``.  Returns K with shape (inputs, states),
    or a vector when there is a single input.
    """
    A, B = np.atleast_2d(p.A).astype(float), np.asarray(p.B, float)
    B = B.reshape(A.shape[0], -1)
    Q, R = np.atleast_2d(p.Q).astype(float), np.atleast_2d(p.R).astype(float)
    for M, name in ((Q, "Q"), (R, "R")):
        if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
            raise ConfigurationError(f"{name} must be symmetric positive definite")
    Rinv = np.linalg.inv(R)
    K = _stabilizing_seed(A, B)
    if spectral_abscissa(A - B @ K) >= 0:
        raise SolverError("could not find a stabilizing initial gain; (A, B) may not be stabilizable")
    P_prev = None
    for _ in range(max_iter):
        Ak = A - B @ K
        P = linalg.solve_continuous_lyapunov(Ak.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K = Rinv @ B.T @ P
        if P_prev is not None and np.max(np.abs(P - P_prev)) <= tol * max(1.0, np.max(np.abs(P))):
            break
        P_prev = P
    else:
        raise SolverError(f"Newton-Kleinman did not converge in {max_iter} iterations")
    if spectral_abscissa(A - B @ K) >= 0:
        raise SolverError("Riccati solution is not stabilizing")
    return K[0] if K.shape[0] == 1 else K


def linearization(sys: BenchmarkSystem, eps: float = 1e-6):
    """(A, B) of ``rhs`` at the origin by central differences."""
    m = sys.m
    A = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        A[:, j] = (np.asarray(rhs(sys, e, np.zeros(()))) - np.asarray(rhs(sys, -e, np.zeros(())))) / (2 * eps)
    B = (np.asarray(rhs(sys, np.zeros(m), np.array(eps))) - np.asarray(rhs(sys, np.zeros(m), np.array(-eps)))) / (2 * eps)
    return A, B.reshape(m, 1)


@dataclass(frozen=True)
class FeedbackPolicy:
    """Linear state feedback u(t) = k . x(t - tau_u)."""

    gains: np.ndarray
    tau_u: float

    @classmethod
    def from_lqr(cls, sys: BenchmarkSystem, tau_u: float, Q=None, R=None):
        A, B = linearization(sys)
        Q = np.eye(sys.m) if Q is None else np.asarray(Q, float)
        R = np.eye(1) if R is None else np.atleast_2d(R)
        return cls(-np.asarray(solve_lqr(LqrProblem(A, B, Q, R))), tau_u)


def closed_loop_field(sys: BenchmarkSystem, policy: FeedbackPolicy, gains=None):
    """Closed-loop DDE x' = f(x(t), k . x(t - tau_u)) with its delay grid.

    ``gains`` overrides ``policy.gains`` (e.g. with a tape variable).
    """
    k = policy.gains if gains is None else gains
    m = sys.m
    if np.shape(ad.value(k)) != (m,):
        raise ConfigurationError(f"policy has {np.shape(ad.value(k))} gains, system state has {m}")
    if policy.tau_u > 0:
        grid = DelayGrid(policy.tau_u, 1)

        def fn(v):
            x = ad.getitem(v, (Ellipsis, slice(0, m)))
            xd = ad.getitem(v, (Ellipsis, slice(m, 2 * m)))
            return rhs(sys, x, ad.matmul(xd, k))
    else:
        grid = DelayGrid(0.0, 0)

        def fn(v):
            return rhs(sys, v, ad.matmul(v, k))
    return VectorFieldSpec(fn, m, kind="analytic-closed-loop"), grid


def sample_sphere(rng, dim, radius):
    d = rng.standard_normal(dim)
    return radius * d / np.linalg.norm(d)


def open_loop_history(sys: BenchmarkSystem, x_start, lookback: float, h: float = 1e-3) -> HistoryFunction:
    """Zero-input trajectory from ``x_start`` at t = -lookback, re-parameterized to [-lookback, 0]."""
    x_start = np.asarray(x_start, float)
    if lookback <= 0:
        return constant_history(x_start, 0.0)
    h = min(h, lookback / 10)
    sol = simulate(sys, x_start, lookback, h)
    L = float(lookback)
    hist = HistoryFunction(lambda s: sol.sample(np.asarray(s) + L), L, kind="dense-solution-restriction")
    hist.start = x_start
    return hist


def control_history_sampler(sys: BenchmarkSystem, radius: float, lookback: float, seed=None, rng=None):
    """History whose state at t = -lookback lies on the sphere of given radius."""
    if not radius > 0:
        raise ConfigurationError("radius must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    return open_loop_history(sys, sample_sphere(rng, sys.m, radius), lookback)
