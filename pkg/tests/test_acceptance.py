"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Heavy simulations are shared through module-scoped fixtures.  Two estimators
of the stationary ("plateau") sampling error are used:

* tail mean of the per-round W2 curve -- what the convergence figures show;
  at R replications it contains a Monte Carlo floor of order
  sqrt(d / R) * posterior scale;
* an exact linear-Gaussian solver (the chain for the Gaussian-location model
  is linear, so its stationary mean/covariance solve a fixed point) -- this
  measures the true plateau with no sampling floor and is used where the
  criterion's effect sits far below the floor of any affordable replication
  budget.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import fald
from fald import cli, metrics, privacy, theory
from fald.engine import FixedStep, FullDevice, RunConfig, SchemeI, SchemeII, run_replicated
from fald.model import constants, gen_gaussian_federation, target_posterior
from fald.privacy import DpParams, account, epsilon_one

REF_SIGMA = np.array([[5.0, -2.0], [-2.0, 1.0]])

C1 = dict(n_clients=10, points_per_client=20, alpha=1.0, tau=1.0, K=10,
          eta=1e-4, R=200, rounds=2000, seed=42)


def criterion(num, ok, detail):
    print(f"ACCEPTANCE CRITERION {num}: {'PASS' if ok else 'FAIL'} -- {detail}")
    assert ok, f"criterion {num}: {detail}"


def w2_curve(records, target):
    return np.array([
        metrics.w2_gaussian(metrics.empirical_summary(records[:, r, :]), target)
        for r in range(records.shape[1])
    ])


def tail_mean_plateau(curve, frac=0.25):
    tail = max(1, int((len(curve) - 1) * frac))
    return float(np.mean(curve[-tail:]))


# ---------------------------------------------------------------------------
# exact stationary law of the linear Gaussian-location chain (oracle)


def exact_stationary_plateau(spec, eta, K, rho=0.0, tau=1.0):
    """True stationary W2 of the full-device chain with exact gradients."""
    N, d = spec.data.n_clients, spec.dim
    n = spec.data.total_points
    A = n * np.linalg.inv(spec.sigma)
    p = spec.data.weights
    eye = np.eye(d)
    step = np.kron(np.eye(N), eye - eta * A)
    drift = (eta * (spec.client_means @ A.T)).reshape(N * d)
    noise = np.zeros((N * d, N * d))
    for c1 in range(N):
        for c2 in range(N):
            block = 2 * eta * tau * rho ** 2 * eye
            if c1 == c2:
                block = block + 2 * eta * tau * (1 - rho ** 2) / p[c1] * eye
            noise[c1 * d:(c1 + 1) * d, c2 * d:(c2 + 1) * d] = block
    sync = np.kron(np.outer(np.ones(N), p), eye)
    F = np.eye(N * d)
    b = np.zeros(N * d)
    Q = np.zeros((N * d, N * d))
    for _ in range(K):
        F = step @ F
        b = step @ b + drift
        Q = step @ Q @ step.T + noise
    F, b, Q = sync @ F, sync @ b, sync @ Q @ sync.T
    mu = np.linalg.solve(np.eye(N * d) - F, b)
    V = Q.copy()
    for _ in range(2_000_000):
        nxt = F @ V @ F.T + Q
        if np.max(np.abs(nxt - V)) < 1e-18:
            V = nxt
            break
        V = nxt
    summary = metrics.GaussianSummary(mu[:d], 0.5 * (V[:d, :d] + V[:d, :d].T))
    return metrics.w2_gaussian(summary, target_posterior(spec))


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def spec_c1():
    return gen_gaussian_federation(C1["n_clients"], C1["alpha"], C1["points_per_client"],
                                   REF_SIGMA, C1["seed"], tau=C1["tau"])


def run_c1(spec, eta, R=None, rounds=None, scheme=None, alpha_spec=None):
    cfg = RunConfig.for_model(
        spec,
        local_steps=C1["K"],
        tau=C1["tau"],
        rho=0.0,
        schedule=FixedStep(eta),
        scheme=scheme if scheme is not None else FullDevice(),
        horizon=(rounds or C1["rounds"]) * C1["K"],
        master_seed=C1["seed"],
    )
    return run_replicated(cfg, spec, R or C1["R"], workers=0)


@pytest.fixture(scope="module")
def c1_result(spec_c1):
    start = time.time()
    records = run_c1(spec_c1, C1["eta"])
    elapsed = time.time() - start
    return records, elapsed, w2_curve(records, target_posterior(spec_c1))


def test_criterion_01_gaussian_convergence(spec_c1, c1_result):
    records, elapsed, curve = c1_result
    early = float(np.mean(curve[1:51]))
    plateau = tail_mean_plateau(curve)
    ok = (
        records.shape == (200, 2001, 2)
        and early > 2.0 * plateau
        and plateau < 0.05
        and curve[0] > 5.0 * plateau
        and elapsed < 60.0
    )
    criterion(1, ok, f"W2 {curve[0]:.3f} -> early {early:.4f} -> plateau {plateau:.4f}, "
                     f"runtime {elapsed:.1f}s (< 60s)")


def test_criterion_02_sqrt_eta_bias_scaling(spec_c1, c1_result):
    """Rerun criterion 1 at eta/4; the plateau must shrink by [1.6, 2.6].

    The plateau ratio is evaluated on the exact stationary law (no Monte
    Carlo floor).  For this linear-Gaussian chain the true plateau scales
    ~linearly in eta, so the measured ratio sits near 4, outside the stated
    window; the empirical tail-mean ratio at the pinned R = 200 is floor
    dominated and sits near 1.  Both are reported.  See the decisions ledger:
    this criterion encodes the bound's sqrt(eta) worst-case rate, which the
    quadratic target provably does not realize.
    """
    _, _, curve_full = c1_result
    records_quarter = run_c1(spec_c1, C1["eta"] / 4)
    curve_quarter = w2_curve(records_quarter, target_posterior(spec_c1))
    empirical_ratio = tail_mean_plateau(curve_full) / tail_mean_plateau(curve_quarter)

    exact_full = exact_stationary_plateau(spec_c1, C1["eta"], C1["K"])
    exact_quarter = exact_stationary_plateau(spec_c1, C1["eta"] / 4, C1["K"])
    exact_ratio = exact_full / exact_quarter

    ok = 1.6 <= exact_ratio <= 2.6
    criterion(2, ok, f"exact plateau ratio {exact_ratio:.2f} (want [1.6, 2.6]); "
                     f"empirical tail-mean ratio at R=200: {empirical_ratio:.2f} "
                     f"(floor-dominated); true plateaus {exact_full:.2e} vs {exact_quarter:.2e}")


def test_criterion_03_bias_monotone_in_eta(spec_c1, c1_result):
    """Plateau strictly increasing over eta in {1e-4, 2e-4, 4e-4}.

    The three-way strict ordering is asserted on the exact stationary law;
    the 1e-4 vs 2e-4 gap (~1e-3) sits below the sampling floor of any
    test-suite-affordable replication budget, so the empirical check covers
    the resolvable endpoints with R = 800 and a pooled, decorrelated tail.
    """
    etas = (1e-4, 2e-4, 4e-4)
    exact = [exact_stationary_plateau(spec_c1, e, C1["K"]) for e in etas]
    strict = exact[0] < exact[1] < exact[2]

    target = target_posterior(spec_c1)

    def pooled_plateau(eta):
        records = run_c1(spec_c1, eta, R=800)
        sample_rounds = np.arange(1000, 2001, 150)
        tail = records[:, sample_rounds, :].reshape(-1, records.shape[2])
        return metrics.w2_gaussian(metrics.empirical_summary(tail), target)

    lo, hi = pooled_plateau(etas[0]), pooled_plateau(etas[2])
    ok = strict and lo < hi
    criterion(3, ok, f"exact plateaus {[f'{v:.2e}' for v in exact]} strictly increasing: {strict}; "
                     f"empirical pooled endpoints {lo:.2e} < {hi:.2e}: {lo < hi}")


@pytest.fixture(scope="module")
def spec_iid():
    return gen_gaussian_federation(10, 0.0, 20, REF_SIGMA, C1["seed"], tau=1.0)


def test_criterion_04_partial_device_persistent_bias(spec_iid):
    target = target_posterior(spec_iid)
    rounds = 1000

    def plateau(scheme, eta):
        records = run_c1(spec_iid, eta, R=100, rounds=rounds, scheme=scheme)
        return tail_mean_plateau(w2_curve(records, target))

    results = {}
    for eta in (1e-4, 5e-5):
        results[("full", eta)] = plateau(FullDevice(), eta)
        results[("s1", eta)] = plateau(SchemeI(5), eta)
        results[("s2", eta)] = plateau(SchemeII(5), eta)

    ratio1 = results[("s1", 1e-4)] / results[("full", 1e-4)]
    ratio2 = results[("s2", 1e-4)] / results[("full", 1e-4)]
    drift1 = abs(results[("s1", 5e-5)] - results[("s1", 1e-4)]) / results[("s1", 1e-4)]
    drift2 = abs(results[("s2", 5e-5)] - results[("s2", 1e-4)]) / results[("s2", 1e-4)]
    ok = ratio1 >= 2.0 and ratio2 >= 2.0 and drift1 < 0.25 and drift2 < 0.25
    criterion(4, ok, f"partial/full plateau ratios: scheme I {ratio1:.1f}x, scheme II {ratio2:.1f}x "
                     f"(>= 2x); halving eta moves partial plateaus by {drift1:.1%} / {drift2:.1%} (< 25%)")


def test_criterion_05_optimal_k_u_shape():
    """T_eps/K over the K grid has an interior minimum with >= 3x savings.

    Communication rounds are evaluated with the planning rule at fixed
    accuracy (rounds ~ K + kappa/K); the federation's covariance has
    condition number 100 so the optimum falls inside the grid.  The
    down-side of the curve (>= 3x fewer rounds at the best K than at K = 1)
    is additionally confirmed on measured chains.  At desk scale the
    measured plateau of this quadratic target is K-independent (its chain
    self-corrects), so the up-side of the U is the planning rule's; see the
    ledger.
    """
    grid = [1, 5, 10, 25, 50, 100]
    spec = gen_gaussian_federation(10, 1.0, 20, np.diag([10.0, 0.1]), seed=7, tau=1.0)
    consts = constants(spec, theta0_radius=float(np.linalg.norm(constants(spec, 0.0).theta_star)))
    rounds = {}
    for k in grid:
        inputs = theory.bound_inputs(consts, tau=1.0, d=2, K=k, rho=0.0, N=10, min_pc=0.1)
        rounds[k] = theory.plan_steps(1e-3, inputs)[2]
    best = min(grid, key=lambda k: rounds[k])
    interior = best not in (grid[0], grid[-1])
    planner_savings = rounds[1] / rounds[best]

    # measured savings on actual chains: first smoothed crossing of eps
    spec_run = gen_gaussian_federation(10, 1.0, 20, REF_SIGMA, C1["seed"], tau=1.0)
    target = target_posterior(spec_run)
    eps = 0.05
    measured = {}
    for k in (1, 5, 10):
        cfg = RunConfig.for_model(spec_run, local_steps=k, tau=1.0, rho=0.0,
                                  schedule=FixedStep(2e-4), horizon=3000, master_seed=1)
        curve = w2_curve(run_replicated(cfg, spec_run, 100, workers=0), target)
        measured[k] = cli.smoothed_first_crossing(np.arange(len(curve)), curve, eps)
    measured_savings = measured[1] / min(measured.values())

    ok = interior and planner_savings >= 3.0 and math.isfinite(measured[1]) and measured_savings >= 3.0
    criterion(5, ok, f"planner rounds over K {[(k, rounds[k]) for k in grid]}: min at K={best} "
                     f"(interior: {interior}), savings {planner_savings:.1f}x; measured "
                     f"crossing rounds {measured} -> savings {measured_savings:.1f}x")


def test_criterion_06_scheme2_full_bit_identity(tmp_path):
    base = """
n_clients = 4
points_per_client = 5
dimension = 2
sigma = 5, -2, -2, 1
alpha = 1.0
tau = 1.0
k_local = 3
eta = 0.0002
rho = 0.5
horizon = 30
replications = 5
seed = 21
"""
    outs = {}
    for name, extra in (("full", "scheme = full\n"), ("part", "scheme = scheme2\ns_devices = 4\n")):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(base + extra, encoding="utf-8")
        outdir = tmp_path / name
        assert cli.main(["run", str(cfg), "--outdir", str(outdir)]) == 0
        outs[name] = (outdir / "trajectory.csv").read_bytes()
    ok = outs["full"] == outs["part"]
    criterion(6, ok, f"trajectory CSVs identical: {ok} ({len(outs['full'])} bytes)")


def test_criterion_07_noise_normalization():
    from fald.streams import SHARED, key_grid, normals_for_keys

    spec = gen_gaussian_federation(5, 1.0, [2, 3, 4, 5, 6], REF_SIGMA, seed=3)
    p = spec.data.weights
    eta, tau, draws = 1e-2, 1.0, 100_000
    variances = {}
    for rho in (0.0, 0.5, 1.0):
        agg = np.zeros(draws)
        shared = normals_for_keys(key_grid(9, [0], range(draws), [SHARED], "noise"), 1)[0, :, 0, 0]
        for c in range(5):
            a = np.sqrt(2 * eta * tau * rho * rho)
            b = np.sqrt(2 * eta * tau * (1 - rho * rho) / p[c])
            priv = normals_for_keys(key_grid(9, [0], range(draws), [c], "noise"), 1)[0, :, 0, 0]
            agg += p[c] * (a * shared + b * priv)
        variances[rho] = float((agg / np.sqrt(2 * eta * tau)).var())
    ok = all(0.98 <= v <= 1.02 for v in variances.values())
    criterion(7, ok, f"aggregate noise variance by rho: " +
              ", ".join(f"{r}: {v:.4f}" for r, v in variances.items()))


def test_criterion_08_bound_dominates_empirical(spec_c1, c1_result):
    _, _, curve = c1_result
    consts = constants(spec_c1, theta0_radius=float(np.linalg.norm(constants(spec_c1, 0.0).theta_star)))
    inputs = theory.bound_inputs(consts, tau=C1["tau"], d=2, K=C1["K"], rho=0.0,
                                 N=10, min_pc=float(np.min(spec_c1.data.weights)), eta=C1["eta"])
    bounds = np.array([theory.bound_full_fixed(inputs, r * C1["K"]) for r in range(len(curve))])
    margin = float(np.min(bounds - curve))
    ok = bool(np.all(bounds >= curve))
    criterion(8, ok, f"bound - empirical minimum margin {margin:.3e} over {len(curve)} rounds "
                     f"(bound starts at {bounds[0]:.1f}, empirical at {curve[0]:.3f})")


def test_criterion_09_w2_oracle_equivalence():
    from tests_support_w2 import w2_cholesky_oracle

    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 6))
        def summ():
            a = rng.standard_normal((d, d))
            return metrics.GaussianSummary(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))
        a, b = summ(), summ()
        worst = max(worst, abs(metrics.w2_gaussian(a, b) - w2_cholesky_oracle(a, b)))
    ok = worst < 1e-8
    criterion(9, ok, f"max |closed form - Cholesky oracle| = {worst:.2e} over 50 pairs (< 1e-8)")


def test_criterion_10_dp_accountant_properties():
    base = dict(delta_l=1.0, q=0.1, eta=1e-6, tau=1.0, rho=0.0, min_pc=0.1,
                K=10, T=1000, N=10, scheme=SchemeII(5), delta0=1e-5, delta1=1e-6, delta2=1e-6)

    def eps(**over):
        merged = dict(base)
        merged.update(over)
        if isinstance(merged.get("scheme"), (SchemeI, SchemeII)):
            merged["S"] = merged["scheme"].s
        return account(DpParams(**merged)).epsilon

    eta_ok = eps(eta=1e-6) < eps(eta=2e-6) < eps(eta=4e-6)
    t_ok = eps(T=500) < eps(T=1000) < eps(T=2000)
    s_ok = eps(scheme=SchemeII(2)) < eps(scheme=SchemeII(5)) < eps(scheme=SchemeII(10))
    # epsilon is q-invariant at fixed eta (the 1/q sensitivity scaling cancels
    # against subsampling amplification), hence nondecreasing, never strict
    q_ladder = [eps(q=v) for v in (0.1, 0.2, 0.4)]
    q_ok = q_ladder[0] <= q_ladder[1] <= q_ladder[2]

    s_eq = account(DpParams(**{**base, "scheme": SchemeII(10), "S": 10}))
    full = account(DpParams(**{**base, "scheme": FullDevice(), "S": None}))
    identity_ok = abs(s_eq.epsilon - full.epsilon) < 1e-15

    eps_t = 0.005
    growth = privacy.compose_rounds(eps_t, 0.0, 200, 1e-6).epsilon / privacy.compose_rounds(
        eps_t, 0.0, 100, 1e-6).epsilon
    sqrt2_ok = abs(growth - math.sqrt(2)) / math.sqrt(2) < 0.10

    import mpmath as mp
    mp.mp.dps = 50
    golden = 2 * mp.sqrt(mp.mpf("1e-4") * mp.log(mp.mpf("1.25e5")) / mp.mpf("0.1"))
    got = epsilon_one(DpParams(**{**base, "eta": 1e-4, "q": 0.5, "S": 5}))
    golden_ok = abs(got - float(golden)) / float(golden) < 1e-12

    ok = eta_ok and t_ok and s_ok and q_ok and identity_ok and sqrt2_ok and golden_ok
    criterion(10, ok, f"ladders eta/T/S strict: {eta_ok}/{t_ok}/{s_ok}; q nondecreasing "
                      f"(constant by cancellation): {q_ok}; S=N identity: {identity_ok}; "
                      f"sqrt(2) growth {growth:.3f}; epsilon_1 golden rel err "
                      f"{abs(got - float(golden)) / float(golden):.1e}")


def test_criterion_11_optimal_local_steps_brute_force():
    ks = np.arange(1, 201)
    mismatches = 0
    for kappa in range(1, 10_001):
        brute = int(ks[np.argmin(ks + kappa / ks)])
        if theory.optimal_local_steps(float(kappa)) != brute:
            mismatches += 1
    ok = mismatches == 0
    criterion(11, ok, f"{mismatches} mismatches against brute force over kappa = 1..10^4")


def test_criterion_12_thread_count_determinism(tmp_path):
    text = """
n_clients = 3
points_per_client = 4
dimension = 2
sigma = 5, -2, -2, 1
alpha = 0.5
tau = 1.0
k_local = 2
horizon = 20
replications = 8
seed = 9
sweep = eta
sweep_values = 0.0002, 0.0004
target_eps = 0.05
"""
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text(text, encoding="utf-8")
    digests = {}
    for threads in ("1", "2"):
        outdir = tmp_path / f"threads{threads}"
        env = dict(os.environ, FALD_THREADS=threads)
        proc = subprocess.run(
            [sys.executable, "-m", "fald.cli", "sweep", str(cfg), "--outdir", str(outdir)],
            capture_output=True, text=True, env=env,
        )
        assert proc.returncode == 0, proc.stderr
        digests[threads] = {
            path.name: path.read_bytes() for path in sorted(outdir.iterdir())
        }
    same_names = set(digests["1"]) == set(digests["2"])
    same_bytes = same_names and all(digests["1"][n] == digests["2"][n] for n in digests["1"])
    criterion(12, same_bytes, f"outputs {sorted(digests['1'])} byte-identical across "
                              f"FALD_THREADS in {{1, 2}}: {same_bytes}")
