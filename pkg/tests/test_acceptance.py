"""End-to-end acceptance checks, one criterion per test.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers before asserting.
The training-based criteria take minutes; run them alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np

from conftest import rel_err
from oracles import (double_pendulum_energy, exact_linear_dde, fd_coordinates, gp_posterior_mean,
                     lotka_volterra_first_integral, random_coordinates)
from stable_ndde import ad
from stable_ndde import systems as S
from stable_ndde import trainer as T
from stable_ndde.ad import Tape
from stable_ndde.dde import DelayGrid, HistoryFunction, VectorFieldSpec, constant_history, integrate, stack_histories
from stable_ndde.gp import RbfKernel, RkhsHistorySampler, fit_posterior_mean
from stable_ndde.ndde import AnodeBaseline, HistoryFitter, NddeModel, dataset_mse, full_windows, ndde_loss, solve
from stable_ndde.nets import (IcnnParams, LrfNetwork, MlpParams, icnn_forward, lrf_forward, lrf_value_and_derivative,
                              mlp_forward, smoothed_relu, wz_positions)
from stable_ndde.razumikhin import (QuadraticLrf, RazumikhinConfig, check_discretization_margin, gamma, lrf_loss,
                                    model_input, razumikhin_gate, verify_decay)


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


# --- 1: solver against the exact method-of-steps solution ---------------------------

def test_criterion_1_solver_matches_method_of_steps(capsys):
    f = VectorFieldSpec(lambda v: ad.scale(ad.getitem(v, (Ellipsis, slice(1, 2))), -1.0), 1)
    start = time.perf_counter()
    sol = integrate(f, DelayGrid(1.0, 1), constant_history([1.0], 1.0), 4.0, 1e-3)
    q = np.linspace(0.0, 4.0, 100)
    approx = sol.sample(q)[:, 0]
    elapsed = time.perf_counter() - start
    err = float(np.max(np.abs(approx - exact_linear_dde(0, -1, 1, 1, 4)(q))))
    verdict(capsys, 1, err <= 1e-8 and elapsed < 1.0, f"max error {err:.2e} (<= 1e-8), runtime {elapsed:.3f}s (< 1s)")


# --- 2: oscillator training summary ordering ----------------------------------------

def _oscillator_mse(seed):
    ds = S.generate_dataset(S.oscillator(), [(1.0, 0.0), (0.0, 2.0)], (0.0, 30.0), 150, 0.0, lookback=3.0)
    out = {}
    for name, tau, K in (("ndde_K10", 0.3, 10), ("ndde_K1", 2.0, 1)):
        m = NddeModel.init(1, tau, K, seed=seed)
        cfg = T.TrainConfig(iterations=80, lr_start=5e-3, lr_end=1e-5, step=0.15, seed=seed)
        m, _ = T.train_ndde(m, ds, cfg)
        out[name] = dataset_mse(m, ds, m.grid.r, 0.15)
    b = AnodeBaseline.init(1, 1, "learned", seed=seed)
    cfg = T.TrainConfig(iterations=300, lr_start=5e-3, lr_end=1e-5, seed=seed)
    b, z_aug, _ = T.train_anode(b, ds, cfg, None, h=0.15)
    out["anode"] = T.anode_mse(b, ds, z_aug, 0.15)
    return out


def test_criterion_2_oscillator_ordering(capsys):
    runs = [_oscillator_mse(seed) for seed in range(3)]
    ordered = [r["ndde_K10"] < r["ndde_K1"] < r["anode"] for r in runs]
    k10 = float(np.median([r["ndde_K10"] for r in runs]))
    ok = k10 <= 1e-2 and sum(ordered) >= 2
    detail = "; ".join(f"seed {s}: K10 {r['ndde_K10']:.3e} K1 {r['ndde_K1']:.3e} ANODE {r['anode']:.3e}"
                       for s, r in enumerate(runs))
    verdict(capsys, 2, ok, f"median K10 MSE {k10:.3e} (<= 1e-2), ordering holds in {sum(ordered)}/3 seeds; {detail}")


# --- 3: gradient suite ----------------------------------------------------------------

N_POINTS = 20


def _check_points(make_point, n_coords, tol):
    """make_point(seed) -> (loss(list_of_arrays), arrays). Returns worst relative error over the points."""
    worst = 0.0
    for seed in range(N_POINTS):
        loss, arrays = make_point(seed)
        tape = Tape()
        P = tape.vars(arrays)
        grads = tape.gradient(loss(P), P)
        coords = random_coordinates(arrays, n_coords, np.random.default_rng(seed))
        ad_vals = np.array([grads[k].flat[i] for k, i in coords])
        fd_vals = fd_coordinates(lambda a: ad.value(loss(a)), arrays, coords, 1e-6)
        worst = max(worst, rel_err(ad_vals, fd_vals))
    return worst, worst <= tol


def _mlp_point(seed):
    r = np.random.default_rng(seed)
    arrays = MlpParams.init(11, 1, seed=seed).arrays()
    v = r.standard_normal((3, 11))
    return (lambda a: ad.sum(mlp_forward(a, v))), arrays


def _icnn_point(seed):
    r = np.random.default_rng(seed)
    arrays = IcnnParams.init(2, seed=seed).arrays()
    x = r.standard_normal((3, 2))
    return (lambda a: ad.sum(icnn_forward(a, x, 0.1))), arrays


def _solver_point(seed):
    r = np.random.default_rng(seed)
    m = NddeModel.init(1, 0.3, 10, (16, 16), seed=seed)
    c = r.uniform(0.5, 1.5, 2)
    psi = HistoryFunction(lambda t: (c[0] * np.cos(c[1] * t))[..., None], 3.0)
    t = np.linspace(0.0, 3.0, 16)
    y = np.cos(t)[:, None]
    return (lambda a: ndde_loss(m, psi, t, y, 0.15, a)), m.params.arrays()


def _lrf_point(seed):
    r = np.random.default_rng(seed)
    cfg = RazumikhinConfig(0.1, 6, 0.05, 5.0)
    model = NddeModel.init(2, 0.2, 2, (16, 16), seed=seed)
    phi = LrfNetwork.init(2, (16, 16), c=0.1, seed=seed + 100)
    x_now = r.uniform(0.5, 1.5, (40, 2)) * r.choice([-1.0, 1.0], 2)
    # shrunk lag copies keep every gate open for a convex V with V(0) = 0
    X = x_now[:, None, :] * np.linspace(1.0, 0.4, 7)[None, :, None]
    assert np.all(razumikhin_gate(phi, X, cfg.q) == 1.0)
    V, Vdot = lrf_value_and_derivative(phi, X[:, 0], model.field()(model_input(X, model.grid, cfg)))
    # stay away from the ReLU kink so central differences see one smooth branch
    res = np.abs(np.asarray(Vdot) + cfg.alpha * np.asarray(V))
    X = X[res > 1e-3 * res.max()]
    assert len(X) >= 10
    n_theta = len(model.params.arrays())

    def loss(a):
        return lrf_loss(phi, model.field(a[:n_theta]), model.grid, cfg, X, a[n_theta:])
    return loss, model.params.arrays() + phi.icnn.arrays()


def test_criterion_3_gradient_suite(capsys):
    results = {
        "MLP forward": _check_points(_mlp_point, 60, 1e-5),
        "ICNN forward": _check_points(_icnn_point, 60, 1e-5),
        "trajectory loss through solver": _check_points(_solver_point, 30, 1e-4),
        "LRF loss (open gate)": _check_points(_lrf_point, 40, 1e-5),
    }
    ok = all(v[1] for v in results.values())
    verdict(capsys, 3, ok, ", ".join(f"{k} worst rel err {v[0]:.2e}" for k, v in results.items()))


# --- 4: ICNN / LRF properties ---------------------------------------------------------

class _RecordingOptimizer:
    def __init__(self, inner, log):
        self.inner, self.log = inner, log

    def step(self, params, grads, lr):
        self.log.append([np.array(p) for p in params])
        return self.inner.step(params, grads, lr)


def test_criterion_4_lrf_properties(capsys, monkeypatch):
    r = np.random.default_rng(4)
    phi = LrfNetwork.init(2, seed=4)
    zero_ok = float(lrf_forward(phi, np.zeros(2))) == 0.0
    x = r.uniform(-5, 5, (10_000, 2))
    floor = float(np.min(np.asarray(lrf_forward(phi, x)) - phi.c * np.sum(x * x, -1)))
    a, b, lam = r.uniform(-5, 5, (1000, 2)), r.uniform(-5, 5, (1000, 2)), r.uniform(0, 1, (1000, 1))
    gap = np.asarray(lrf_forward(phi, lam * a + (1 - lam) * b)) - (
        lam[:, 0] * np.asarray(lrf_forward(phi, a)) + (1 - lam[:, 0]) * np.asarray(lrf_forward(phi, b)))
    convex_ok = bool(np.all(gap <= 1e-12))

    d, e = 0.1, 1e-6
    slope_end = abs(float(ad.smooth_relu_grad(d - 1e-12, d)) - 1.0)
    slope_start = abs(float(ad.smooth_relu_grad(1e-12, d)))
    s = lambda z: float(smoothed_relu(z, d))  # noqa: E731
    fd_end = abs((s(d) - s(d - e)) / e - 1.0)
    k = 1e-9
    curv = lambda z: (float(ad.smooth_relu_grad(z + k, d)) - float(ad.smooth_relu_grad(z - k, d))) / (2 * k)  # noqa: E731
    curv_jump = max(abs(curv(1e-7) - curv(-1e-7)), abs(curv(d + 1e-7) - curv(d - 1e-7)))
    c2_ok = slope_end <= 1e-8 and slope_start <= 1e-8 and fd_end <= 1e-5 and curv_jump <= 1e-3

    log = []
    real = T.make_optimizer
    monkeypatch.setattr(T, "make_optimizer", lambda *a, **k: _RecordingOptimizer(real(*a, **k), log))
    ds = S.generate_dataset(S.oscillator(), [(1.0, 0.0)], (0.0, 4.0), 21, 0.0, lookback=1.0)
    model = NddeModel.init(1, 0.25, 4, (16, 16), seed=0)
    n_theta = len(model.params.arrays())
    cfg = T.TrainConfig(iterations=15, lr_start=0.05, lr_end=0.01, step=0.125, t_stab=2.0, lrf_batch=32, seed=0)
    _, trained, _ = T.train_stable_ndde(model, LrfNetwork.init(1, (16, 16), seed=1), ds,
                                        RkhsHistorySampler(1.0, 1.0, 1.0, 5, 1.0), cfg, RazumikhinConfig(0.25, 4, 0.5, 1.01))
    # parameters entering step i are the projected result of iteration i - 1; the returned LRF closes the list
    icnn_arrays = [p[n_theta:] for p in log[1:]] + [trained.icnn.arrays()]
    wz_ok = len(log) == 15 and all(np.all(arrs[k] >= 0) for arrs in icnn_arrays for k in wz_positions(len(arrs)))

    ok = zero_ok and floor >= -1e-12 and convex_ok and c2_ok and wz_ok
    verdict(capsys, 4, ok, f"V(0)=0 {zero_ok}, min V-c|x|^2 {floor:.2e}, convexity {convex_ok} (max gap "
                           f"{gap.max():.1e}), |s'(d-)-1| {slope_end:.1e}, |s'(0+)| {slope_start:.1e}, "
                           f"curvature at joints {curv_jump:.1e}, W_z >= 0 after {len(log)} iterations {wz_ok}")


# --- 5: stabilized NDDE on the damped oscillator --------------------------------------

def _damped_oscillator_data(seed):
    sysd = S.damped_oscillator(0.05)
    rng = np.random.default_rng(1000 + seed)

    def annulus(k):
        rad, ang = rng.uniform(1, 2, k), rng.uniform(0, 2 * np.pi, k)
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1)
    train_ic, test_ic = annulus(4), annulus(4)
    train = S.generate_dataset(sysd, train_ic, (0.0, 4 * np.pi), 100, 0.3, seed=seed, lookback=3.0)
    test = S.generate_dataset(sysd, test_ic, (0.0, 40 * np.pi), 1000, 0.3, seed=seed + 100, lookback=3.0,
                              split="test")
    return train, test


def _test_peaks(model, test):
    peaks = []
    for w in full_windows(test, model.grid.r, HistoryFitter(test, model.grid.r)):
        sol = solve(model, w.history, 40 * np.pi, 0.15, truncate_on_divergence=True)
        X, _ = sol.stacked()
        peaks.append(float(np.max(np.abs(X))) if sol.valid_until is None else math.inf)
    return peaks


def test_criterion_5_stabilized_ndde_is_bounded(capsys):
    raz = RazumikhinConfig(0.3, 30, 0.01, 1.01)
    sampler = RkhsHistorySampler(2.0, 2.0, 1.5, 10, 3.0)
    lines, ok = [], True
    for seed in range(5):
        train, test = _damped_oscillator_data(seed)
        amp = max(float(np.max(np.abs(tr.values))) for tr in train.trajectories)
        cfg = T.TrainConfig(iterations=200, lr_start=5e-3, lr_end=1e-6, schedule="cyclic", period=50, step=0.15,
                            seed=seed, t_stab=30.0)
        vanilla, _ = T.train_ndde(NddeModel.init(1, 0.3, 10, seed=seed), train, cfg)
        stable, _, _ = T.train_stable_ndde(NddeModel.init(1, 0.3, 10, seed=seed), LrfNetwork.init(1, seed=seed),
                                           train, sampler, cfg, raz)
        mse_v, mse_s = dataset_mse(vanilla, train, 3.0, 0.15), dataset_mse(stable, train, 3.0, 0.15)
        peak_s, peak_v = max(_test_peaks(stable, test)), max(_test_peaks(vanilla, test))
        good = peak_s <= 10 * amp and mse_s <= 2 * mse_v
        ok &= good
        lines.append(f"seed {seed}: stable peak {peak_s:.2f} (bound {10 * amp:.2f}), vanilla peak {peak_v:.3g}, "
                     f"train MSE stable {mse_s:.3e} vs vanilla {mse_v:.3e}")
    verdict(capsys, 5, ok, "; ".join(lines))


# --- 6: delayed feedback stabilization ------------------------------------------------

PENDULUM_R = 3.5e-4 * np.eye(1)
TAU_U = 0.03


def _fresh_histories(sys_, n=20, seed=123):
    rng = np.random.default_rng(seed)
    return [S.control_history_sampler(sys_, np.pi / 2, TAU_U, rng=rng) for _ in range(n)]


def _decay_ratios(sys_, policy, hists, T_end=3.0):
    f, grid = S.closed_loop_field(sys_, policy)
    sol = integrate(f, grid, stack_histories(hists), T_end, 0.015, truncate_on_divergence=True)
    if sol.valid_until is not None and np.any(sol.valid_until < T_end):
        return np.full(len(hists), np.inf)
    start = np.linalg.norm(sol.sample(np.array([0.0]))[0], axis=-1)
    end = np.linalg.norm(sol.sample(np.array([T_end]))[0], axis=-1)
    return end / start


def test_criterion_6_delayed_feedback(capsys):
    ip = S.inverted_pendulum()
    lqr = S.FeedbackPolicy.from_lqr(ip, TAU_U, R=PENDULUM_R)
    lqr_ratios = _decay_ratios(ip, lqr, _fresh_histories(ip, seed=0))
    lqr_fails = bool(np.any(~(lqr_ratios < 1.0)))

    settings = {"alpha=1": RazumikhinConfig(0.01, 20, 1.0, 1.2), "alpha=0.01": RazumikhinConfig(0.01, 20, 0.01, 1.01)}
    results, lines = {}, []
    fresh = _fresh_histories(ip)
    for seed in range(3):
        for name, raz in settings.items():
            cfg = T.TrainConfig(iterations=1000, lr_start=0.5, lr_end=1e-5, t_stab=3.0, seed=seed,
                                policy_lr_scale=5.0)
            pol, phi, _ = T.train_feedback(ip, lqr, LrfNetwork.init(2, seed=seed),
                                           T.ControlHistoryConfig(np.pi / 2, TAU_U), cfg, raz)
            ratios = _decay_ratios(ip, pol, fresh)
            f, grid = S.closed_loop_field(ip, pol)
            rep = verify_decay(f, grid, raz, phi, fresh, 3.0, 0.015)
            results[seed, name] = (ratios, rep.max_residual)
            lines.append(f"seed {seed} {name}: max |x(3)|/|x(0)| {np.max(ratios):.3g}, mean {np.mean(ratios):.3g}, "
                         f"residual {rep.max_residual:.2e}")
    main_ok = all(np.all(results[s, "alpha=1"][0] <= 0.2) and results[s, "alpha=1"][1] <= 1e-6 for s in range(3))
    faster = sum(np.mean(results[s, "alpha=1"][0]) < np.mean(results[s, "alpha=0.01"][0]) for s in range(3))
    ok = lqr_fails and main_ok and faster >= 2
    verdict(capsys, 6, ok, f"LQR fails from some history {lqr_fails} (max ratio {np.max(lqr_ratios):.3g}); "
                           f"alpha=1 decays faster in {faster}/3 seeds; " + "; ".join(lines))


# --- 7: Razumikhin bookkeeping --------------------------------------------------------

def test_criterion_7_razumikhin_semantics(capsys):
    V = QuadraticLrf(np.eye(1))
    crafted = [([1.0, 0.5, 0.9], 1.01, 1.0), ([1.0, 1.2, 0.3], 1.01, 0.0), ([1.0, 2.0, 0.2], 4.0, 1.0),
               ([0.5, 0.5, 0.5], 1.0, 1.0), ([0.0, 1e-3], 2.0, 0.0), ([2.0, -2.0], 1.0, 1.0), ([1.0, 1.1], 1.2, 0.0), ([1.0, 1.1], 1.25, 1.0)]
    gate_ok = all(razumikhin_gate(V, np.array(seq)[None, :, None], q)[0] == want for seq, q, want in crafted)

    gamma_ok = all(gamma(RazumikhinConfig(tv, k, a, q)) == min(a, math.log(q) / (k * tv)) / 2
                   for tv, k, a, q in [(0.1, 20, 0.01, 1.01), (0.01, 20, 1.0, 1.2), (0.3, 30, 0.01, 1.01),
                                       (0.05, 5, 0.2, 2.0), (1.0, 1, 5.0, 1.5)])

    violations, checked = 0, 0
    for a, b, seed in [(2.0, 0.3, 0), (1.5, -0.2, 1), (3.0, 0.5, 2), (1.0, 0.1, 3)]:
        cfg = RazumikhinConfig(0.1, 10, 0.2, 1.3)
        f = VectorFieldSpec(lambda v, a=a, b=b: ad.add(ad.scale(ad.getitem(v, (Ellipsis, slice(0, 1))), -a),
                                                       ad.scale(ad.getitem(v, (Ellipsis, slice(1, 2))), b)), 1)
        c = np.random.default_rng(seed).standard_normal(3)
        hist = HistoryFunction(lambda t, c=c: (c[0] + c[1] * np.sin(3 * t) + c[2] * t)[..., None], 1.0)
        rep = verify_decay(f, DelayGrid(0.5, 2), cfg, V, [hist], 6.0, 0.05, slack=0.05)
        if rep.max_residual == 0.0:
            checked += 1
            violations += sum(rep.violations)
    envelope_ok = checked >= 3 and violations == 0

    base = dict(L_f=2.0, c1=0.5, c2=1.0, history_bound=0.05)
    q = 1.1
    qt = [check_discretization_margin(RazumikhinConfig(tv, 10, 0.1, q), **base).q_tilde for tv in (2e-3, 1e-3)]
    ratio = (qt[0] - q) / (qt[1] - q)
    margin_ok = abs(ratio - 4.0) <= 0.05 * 4.0

    ok = gate_ok and gamma_ok and envelope_ok and margin_ok
    verdict(capsys, 7, ok, f"gate {gate_ok}, gamma {gamma_ok}, envelope violations {violations} over {checked} "
                           f"zero-residual trajectories, margin ratio {ratio:.4f} (4 +- 5%)")


# --- 8: physics and GP oracles --------------------------------------------------------

def test_criterion_8_physics_oracles(capsys):
    dp = S.double_pendulum(b=0.0)
    P = dp.params
    Z = S.simulate(dp, np.array([1.2, -0.4, 0.3, 0.9]), 10.0, 1e-3).stacked()[0]
    E = double_pendulum_energy(Z, P["m1"], P["m2"], P["l"], P["g"])
    e_drift = float(np.max(np.abs(E - E[0])) / abs(E[0]))

    lv = S.lotka_volterra()
    Q = lv.params
    Z = S.simulate(lv, np.array([2.0, 0.5]), 20.0, 1e-3).stacked()[0]
    H = lotka_volterra_first_integral(Z, Q["alpha"], Q["beta"], Q["gamma"], Q["delta"])
    h_drift = float(np.max(np.abs(H - H[0])))

    r = np.random.default_rng(8)
    gp_err = 0.0
    for _ in range(5):
        t = np.sort(r.uniform(-3, 0, 8))
        y = r.standard_normal(8)
        l, s2, nv = r.uniform(0.3, 2.0), r.uniform(0.5, 2.0), r.uniform(1e-3, 0.1)
        gp = fit_posterior_mean(t, y, RbfKernel(l, s2), nv)
        qry = np.linspace(-3.5, 0.5, 50)
        gp_err = max(gp_err, float(np.max(np.abs(gp(qry)[:, 0] - gp_posterior_mean(t, y, l, s2, nv, qry)))))

    ok = e_drift <= 1e-5 and h_drift <= 1e-6 and gp_err <= 1e-10
    verdict(capsys, 8, ok, f"double-pendulum relative energy drift {e_drift:.2e} (<= 1e-5), Lotka-Volterra "
                           f"invariant drift {h_drift:.2e} (<= 1e-6), GP mean vs direct solve {gp_err:.2e} (<= 1e-10)")
