"""Oracle checks runnable from the CLI: finite differences, GAE brute force, WMMSE grid search."""
from __future__ import annotations

import numpy as np

from fetrpo import mlp
from fetrpo.advantage import gae
from fetrpo.baselines import wmmse
from fetrpo.env import EnvConfig, draw_channel, place_nodes, sum_rate
from fetrpo.mlp import MlpArchitecture
from fetrpo.policy import grad_log_mixture, make_policy, mixture_log_density, mixture_weights


def _central_diff(f, theta, eps=1e-6):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_gradients(n_cases: int = 12) -> float:
    """Worst relative error of grad_params and grad_log_mixture against central differences."""
    worst = 0.0
    grid = [(i, h, o) for i in (1, 3, 5) for h in (1, 4) for o in (1, 3)][:n_cases]
    for n_in, n_hidden, n_out in grid:
        rng = np.random.default_rng(n_in * 100 + n_hidden * 10 + n_out)
        arch = MlpArchitecture((n_in, *([5] * n_hidden), n_out))
        theta = mlp.init_params(arch, rng) + 0.1 * rng.standard_normal(arch.n_params)
        x = rng.standard_normal((4, n_in))
        c = rng.standard_normal((4, n_out))
        g = mlp.grad_params(arch, theta, x, c)
        fd = _central_diff(lambda th: float(np.sum(c * mlp.forward(arch, th, x))), theta)
        worst = max(worst, _rel(g, fd))
    rng = np.random.default_rng(0)
    current = make_policy(3, 2, (5,), rng, "shared", -0.5)
    memory = [current.with_params(current.params + 0.1 * rng.standard_normal(current.params.size))
              for _ in range(3)]
    spec = mixture_weights(3, 1.0)
    s, a = rng.standard_normal(3), rng.standard_normal(2)
    g = grad_log_mixture(current, memory, spec, s, a)
    fd = _central_diff(lambda th: float(mixture_log_density(current.with_params(th), memory, spec,
                                                             s[None], a[None])[0]), current.params)
    return max(worst, _rel(g, fd))


def check_gae(n_batches: int = 100) -> float:
    worst = 0.0
    for seed in range(n_batches):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 8))
        n = T * int(rng.integers(1, 5))
        r, v, nv = rng.standard_normal((3, n))
        dones = np.zeros(n)
        dones[T - 1::T] = 1.0
        gamma, lam = rng.uniform(0.5, 1.0, 2)
        rtg, adv = gae(r, dones, v, nv, gamma, lam)
        for t in range(n):
            end = (t // T + 1) * T
            ref_r = sum(gamma ** (u - t) * r[u] for u in range(t, end))
            deltas = [r[u] + gamma * (0.0 if u == end - 1 else nv[u]) - v[u] for u in range(t, end)]
            ref_a = sum((gamma * lam) ** (u - t) * d for u, d in zip(range(t, end), deltas))
            worst = max(worst, abs(rtg[t] - ref_r), abs(adv[t] - ref_a))
    return worst


def check_wmmse_grid(n_instances: int = 50) -> float:
    """Worst WMMSE / grid-optimum ratio over K = 2 environment channel draws."""
    grid = np.linspace(0.0, 1.0, 201)
    p1, p2 = np.meshgrid(grid, grid, indexing="ij")
    worst = np.inf
    cfg = EnvConfig(K=2)
    for seed in range(n_instances):
        rng = np.random.default_rng(seed)
        h = draw_channel(place_nodes(rng, cfg), rng, cfg).gains
        nw = cfg.noise_w
        opt = (np.log1p(h[0, 0] * p1 / (nw + h[1, 0] * p2)) + np.log1p(h[1, 1] * p2 / (nw + h[0, 1] * p1))).max()
        worst = min(worst, sum_rate(h, wmmse(h, nw, 1.0)[0], nw) / opt)
    return float(worst)


def run_all(quick: bool = False) -> int:
    """Print one line per oracle; return the number of failures."""
    checks = [
        ("finite-difference gradients", lambda: check_gradients(4 if quick else 12), lambda v: v < 1e-5, "max rel err"),
        ("GAE brute force", lambda: check_gae(20 if quick else 100), lambda v: v < 1e-10, "max abs err"),
        ("WMMSE grid oracle", lambda: check_wmmse_grid(10 if quick else 50), lambda v: v >= 0.98, "worst ratio"),
    ]
    failures = 0
    for name, run, ok, label in checks:
        value = run()
        passed = ok(value)
        failures += not passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {label} {value:.3e}")
    return failures
