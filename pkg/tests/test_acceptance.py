"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the pytest terminal summary.
The MNIST criteria (6, 7, 8) play 10000 rounds per run on the bundled
10000-image subset and take well over an hour on one core; they are marked slow.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from ssbandit import linalg, ssl
from ssbandit.env import from_multiclass, gen_synthetic
from ssbandit.harness import ExperimentConfig, run_experiment
from ssbandit.nn import backward, combined_loss, ssl_weight
from ssbandit.solvers import PolicyConfig, make_policy, run_policy
from test_nn import max_relative_error, numeric_grad, smooth_fd_case

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist10k"

# Desk-sized two-conv-layer network used for every MNIST run below.
MNIST_NET = "conv_filters = 16, 32\nrepr_dim = 128\n"


def mnist_config(tmp: Path, solvers: str, seeds: str, horizon: int, beta: int = 500) -> ExperimentConfig:
    text = (
        "dataset.kind = idx\n"
        f"dataset.images = {MNIST / 'images-idx3-ubyte.gz'}\n"
        f"dataset.labels = {MNIST / 'labels-idx1-ubyte.gz'}\n"
        f"solvers = {solvers}\n"
        f"seeds = {seeds}\n"
        f"horizon = {horizon}\n"
        "alpha = 1.0\nlambda = 1.0\nepochs = 10\nmu = 0.9\n"
        f"beta = {beta}\n"
        "optimizer = sgd\nlearning_rate = 0.25\nbatch_size = 64\nwarm_start = true\n"
        + MNIST_NET
        + f"output_dir = {tmp}\n"
    )
    return ExperimentConfig.from_text(text)


def test_c01_ridge_oracle_equivalence(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        dim = int(rng.integers(1, 11))
        n = int(rng.integers(0, 101))
        lam = float(rng.uniform(0.1, 5.0))
        X, R = rng.normal(size=(n, dim)), rng.normal(size=n)
        state = linalg.ridge_init(dim, lam)
        for x, r in zip(X, R):
            linalg.ridge_update(state, x, r)
        oracle = np.linalg.solve(lam * np.eye(dim) + X.T @ X, X.T @ R)
        worst = max(worst, float(np.abs(state.theta - oracle).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 5
    record(1, ok, f"100 trials, max |theta - batch| = {worst:.2e} (tol 1e-8), {elapsed:.2f}s (< 5s)")
    assert ok


def test_c02_gradient_check(record):
    start = time.perf_counter()
    errors, redraws = [], 0
    for index in range(20):
        (net, batch, mu, beta, t), redrawn = smooth_fd_case(index)
        redraws += redrawn
        analytic, _, _ = backward(net, batch, ssl_weight(mu, t, beta))
        numeric = numeric_grad(lambda: combined_loss(net, batch, mu, t, beta), net.params)
        errors.append(max_relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 30
    record(
        2,
        ok,
        f"20 random nets ({redraws} redrawn: kink within h), max relative error {max(errors):.2e} (< 1e-4), "
        f"{elapsed:.1f}s (< 30s)",
    )
    assert ok


def test_c03_rotation_group(record):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    failures = 0
    for _ in range(1000):
        s, c = int(rng.integers(1, 12)), int(rng.integers(1, 4))
        img = rng.random((s, s, c))
        k1, k2 = (int(v) for v in rng.integers(-8, 8, 2))
        comp = np.array_equal(ssl.rotate90(ssl.rotate90(img, k1), k2), ssl.rotate90(img, k1 + k2))
        ident = np.array_equal(ssl.rotate90(img, 0), img) and np.array_equal(ssl.rotate90(img, 4), img)
        cons = np.array_equal(np.sort(ssl.rotate90(img, k1), axis=None), np.sort(img, axis=None))
        failures += not (comp and ident and cons)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 5
    record(3, ok, f"1000 random images, {failures} failures, {elapsed:.2f}s (< 5s)")
    assert ok


def test_c04_decay_schedule(record):
    checks = []
    for mu in (0.5, 0.9):
        for t, expected in ((0, 1.0), (500, mu), (1500, mu**3)):
            checks.append(ssl_weight(mu, t, 500) == expected)
    checks.append(ssl_weight(0.9, 0, 500) == 1.0)
    checks.append(ssl_weight(0.5, 1500, 500) == 0.125)
    ok = all(checks)
    record(4, ok, f"{sum(checks)}/{len(checks)} exact matches")
    assert ok


def test_c05_separable_synthetic(record):
    start = time.perf_counter()
    finals = []
    for seed in range(1, 6):
        data = gen_synthetic(2, 1000, 28, 0.0, seed=seed)
        env = from_multiclass(data, seed)
        state = make_policy("lin_ucb", PolicyConfig(), 2, data.image_shape, seed)
        finals.append(run_policy(env, state, 2000)[-1].cumulative_reward)
    elapsed = time.perf_counter() - start
    ok = all(f >= 1800 for f in finals) and elapsed < 60
    record(5, ok, f"Lin-UCB finals {finals} (each >= 1800), {elapsed:.1f}s (< 60s)")
    assert ok


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    cfg = mnist_config(tmp_path_factory.mktemp("mnist"), "lin_ucb, neural_ucb, ss_neural_ucb", "1, 2, 3, 4, 5", 10000)
    start = time.perf_counter()
    summary = run_experiment(cfg)
    return summary, time.perf_counter() - start


@pytest.mark.slow
def test_c06_ordering_on_mnist(record, mnist_runs):
    summary, elapsed = mnist_runs
    m = summary.mean
    lin, neural, ss = (summary.finals[k] for k in ("lin_ucb", "neural_ucb", "ss_neural_ucb"))
    wins = sum(s >= n for s, n in zip(ss, neural))
    ok = m["ss_neural_ucb"] > m["neural_ucb"] > m["lin_ucb"] and wins >= 4
    record(
        6,
        ok,
        f"means SS {m['ss_neural_ucb']:.1f} / Neural {m['neural_ucb']:.1f} / Lin {m['lin_ucb']:.1f}; "
        f"SS >= Neural on {wins}/5 seeds; finals SS {ss} Neural {neural} Lin {lin}; {elapsed / 60:.1f} min",
    )
    assert ok


@pytest.mark.slow
def test_c07_lin_ucb_fraction(record, mnist_runs):
    summary, _ = mnist_runs
    fractions = [f / 10000 for f in summary.finals["lin_ucb"]]
    mean = float(np.mean(fractions))
    ok = 0.60 <= mean <= 0.90
    record(7, ok, f"mean fraction {mean:.4f} in [0.60, 0.90]; per seed {[round(f, 4) for f in fractions]}")
    assert ok


@pytest.mark.slow
def test_c08_full_self_supervision_hurts(record, mnist_runs, tmp_path):
    summary, _ = mnist_runs
    cfg = mnist_config(tmp_path, "ss_neural_ucb:mu=1", "1, 2, 3", 10000)
    start = time.perf_counter()
    constant = run_experiment(cfg).finals["ss_neural_ucb:mu=1"]
    decayed = summary.finals["ss_neural_ucb"][:3]
    ok = np.mean(constant) < np.mean(decayed)
    record(
        8,
        ok,
        f"mu=1 mean {np.mean(constant):.1f} {constant} vs mu=0.9 mean {np.mean(decayed):.1f} {decayed} "
        f"(seeds 1-3); {(time.perf_counter() - start) / 60:.1f} min",
    )
    assert ok


def _strip_solver(path):
    return [",".join(c for i, c in enumerate(line.split(",")) if i != 1) for line in path.read_text().splitlines()]


def test_c09_zero_mu_collapse(record, tmp_path):
    cfg = mnist_config(tmp_path, "neural_ucb, ss_neural_ucb:mu=0", "3", 1600, beta=400)
    run_experiment(cfg)
    a = _strip_solver(cfg.log_path(cfg.solvers[0], 3))
    b = _strip_solver(cfg.log_path(cfg.solvers[1], 3))
    retrains = sum(line.endswith(",1") for line in a)
    ok = a == b and retrains == 4
    record(9, ok, f"1600 MNIST rounds, {retrains} retrainings, logs identical minus solver column: {a == b}")
    assert ok


def test_c10_determinism(record, tmp_path):
    logs = []
    for run in ("a", "b"):
        cfg = mnist_config(tmp_path / run, "lin_ucb, neural_ucb, ss_neural_ucb", "11", 1000, beta=250)
        run_experiment(cfg)
        logs.append({p.name: p.read_bytes() for p in sorted(cfg.output_dir.glob("rounds_*.csv"))})
    ok = logs[0] == logs[1] and len(logs[0]) == 3
    record(10, ok, f"{len(logs[0])} round logs of 1000 MNIST rounds, byte-identical across two runs: {logs[0] == logs[1]}")
    assert ok
