"""Reference power allocators: WMMSE with full CSI, random power and max power."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from fetrpo.env import sum_rate


class WmmseError(ArithmeticError):
    pass


@dataclass
class WmmseConfig:
    max_iters: int = 500
    convergence_tol: float = 1e-8
    # extra starts put one user (or all but one) at this fraction of its
    # amplitude limit and the rest at full power; 0 disables them
    corner_eps: float = 1e-3


def wmmse_single(gains: np.ndarray, noise_w: float, p_max, cfg: Optional[WmmseConfig] = None,
                 v0: Optional[np.ndarray] = None):
    """One run of the scalar WMMSE recursion from amplitudes ``v0`` (default: full power).

    ``gains[j, k]`` is the power gain from transmitter j to receiver k.
    Returns (powers, iterations_used, sum_rate_trace).
    """
    cfg = cfg or WmmseConfig()
    gains = np.asarray(gains, dtype=np.float64)
    K = gains.shape[0]
    p_cap = np.broadcast_to(np.asarray(p_max, dtype=np.float64), (K,))
    v_max = np.sqrt(p_cap)
    h_dir = np.sqrt(np.diag(gains))
    cross = gains * (1.0 - np.eye(K))
    v = v_max.copy() if v0 is None else np.clip(np.asarray(v0, dtype=np.float64), 0.0, v_max)
    trace = []
    prev = sum_rate(gains, v ** 2, noise_w)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        rx_total = noise_w + gains.T @ (v ** 2)  # sum over all j of h_jk v_j^2
        u = h_dir * v / rx_total
        # 1 / (1 - u sqrt(h_kk) v) == total / (noise + interference), without the cancellation
        w = rx_total / (noise_w + cross.T @ (v ** 2))
        denom = gains @ (w * u ** 2)  # sum_j w_j u_j^2 h_kj
        with np.errstate(divide="ignore", invalid="ignore"):
            v_new = np.where(denom < 1e-30, v_max, w * u * h_dir / denom)
        v = np.clip(v_new, 0.0, v_max)
        if not np.all(np.isfinite(v)):
            raise WmmseError(f"non-finite WMMSE iterate at iteration {it}")
        cur = sum_rate(gains, v ** 2, noise_w)
        trace.append(cur)
        if abs(cur - prev) <= cfg.convergence_tol:
            break
        prev = cur
    # squaring the clamped amplitude can overshoot p_max by an ulp
    return np.minimum(v ** 2, p_cap), it, np.array(trace)


def wmmse(gains: np.ndarray, noise_w: float, p_max, cfg: Optional[WmmseConfig] = None):
    """Best of WMMSE runs from full power, each near one-user-only point and each
    near leave-one-user-out point.

    The full-power run alone can stall on a symmetric or interference-heavy
    stationary point, and a user driven near zero power rarely recovers, so
    the extra starts seed the on/off patterns directly (2K more runs). Returns the winning
    run's (powers, iterations_used, sum_rate_trace).
    """
    cfg = cfg or WmmseConfig()
    gains = np.asarray(gains, dtype=np.float64)
    K = gains.shape[0]
    v_max = np.sqrt(np.broadcast_to(np.asarray(p_max, dtype=np.float64), (K,)))
    best = wmmse_single(gains, noise_w, p_max, cfg)
    best_rate = sum_rate(gains, best[0], noise_w)
    if cfg.corner_eps > 0 and K > 1:
        starts = []
        for k in range(K):
            one_on = cfg.corner_eps * v_max.copy()
            one_on[k] = v_max[k]
            starts.append(one_on)
            if K > 2:
                one_off = v_max.copy()
                one_off[k] *= cfg.corner_eps
                starts.append(one_off)
        for v0 in starts:
            run = wmmse_single(gains, noise_w, p_max, cfg, v0)
            rate = sum_rate(gains, run[0], noise_w)
            if rate > best_rate:
                best, best_rate = run, rate
    return best


def random_power(rng: np.random.Generator, K: int, p_max) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=K) * np.broadcast_to(p_max, (K,))


def max_power(K: int, p_max) -> np.ndarray:
    return np.array(np.broadcast_to(np.asarray(p_max, dtype=np.float64), (K,)))
