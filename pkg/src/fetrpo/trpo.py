"""TRPO and faded-experience TRPO.

The behavior policy of every iteration is the mixture of the current policy
and the M most recent pre-update policies. With M = 0 the mixture is the
current policy and every step below is plain TRPO.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from fetrpo import mlp
from fetrpo.advantage import RolloutBatch, compute_gae, normalize_advantages
from fetrpo.env import InterferenceEnv
from fetrpo.mlp import MlpArchitecture
from fetrpo.policy import (
    FisherOperator, LogStdMode, MixtureSpec, PolicySnapshot, dist_batch, distribution,
    grad_log_prob, kl_diag_gauss, log_prob, make_policy, mixture_log_density_from_components,
    mixture_weights, pick_component, sample_gaussian, score_coefficients,
)

log = logging.getLogger(__name__)


class CGError(ArithmeticError):
    pass


class ValueFitError(ArithmeticError):
    pass


@dataclass
class ValueFitConfig:
    epochs: int = 5
    minibatch: int = 64
    step_size: float = 1e-3


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.94
    delta_kl: float = 0.05
    backtrack_coeff: float = 0.8
    max_backtracks: int = 10
    memory_size: int = 0
    decay: float = 1.0
    batch_size: int = 2000
    episode_len: int = 200
    iterations: int = 50
    cg_iters: int = 10
    cg_tol: float = 1e-8
    cg_damping: float = 0.1
    value_fit: ValueFitConfig = field(default_factory=ValueFitConfig)
    normalize_adv: bool = True
    seed: int = 0
    hidden: tuple = (400, 300)
    log_std_mode: str = "shared"
    init_log_std: float = 0.0
    reward_scale: float = 0.01

    def validate(self):
        if not self.delta_kl > 0:
            raise ValueError("delta_kl must be positive")
        if not 0 < self.backtrack_coeff < 1:
            raise ValueError("backtrack_coeff must lie in (0, 1)")
        if self.max_backtracks < 1 or self.cg_iters < 1:
            raise ValueError("max_backtracks and cg_iters must be >= 1")
        if self.episode_len < 1 or self.batch_size % self.episode_len != 0:
            raise ValueError(
                f"batch_size {self.batch_size} must be a multiple of episode_len {self.episode_len}")
        if self.memory_size < 0 or not self.decay > 0:
            raise ValueError("memory_size must be >= 0 and decay > 0")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")
        if self.iterations < 0 or self.cg_damping < 0:
            raise ValueError("iterations and cg_damping must be non-negative")
        if self.value_fit.epochs < 0 or self.value_fit.minibatch < 1 or not self.value_fit.step_size > 0:
            raise ValueError("invalid value_fit settings")
        LogStdMode(self.log_std_mode)
        return self


@dataclass
class UpdateReport:
    surrogate_before: float = 0.0
    surrogate_after: float = 0.0
    kl_after: float = 0.0
    backtrack_steps_used: int = 0
    accepted: bool = False
    grad_norm: float = 0.0
    cg_residual: float = 0.0
    value_loss_before: float = 0.0
    value_loss_after: float = 0.0


# --- solver pieces --------------------------------------------------------------------

def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int = 10,
                       tol: float = 1e-8, callback: Optional[Callable[[np.ndarray], None]] = None) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A given only x -> A x.

    Stops once ||r|| / max(||b||, 1e-12) <= tol or after ``iters`` steps.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    scale = max(np.sqrt(rr), 1e-12)
    for _ in range(iters):
        if np.sqrt(rr) / scale <= tol:
            break
        Ap = apply_A(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            raise CGError(f"curvature p'Ap = {pAp} is not positive and finite")
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise CGError("non-finite residual in conjugate gradient")
        p = r + (rr_new / rr) * p
        rr = rr_new
        if callback is not None:
            callback(x)
    return x


def line_search(theta_k: np.ndarray, x_hat: np.ndarray, fvp: Callable[[np.ndarray], np.ndarray],
                surrogate: Callable[[np.ndarray], float], kl: Callable[[np.ndarray], float],
                delta_kl: float, alpha: float, n_backtracks: int):
    """Backtracking along the natural-gradient direction.

    Tries steps alpha**j * sqrt(2 delta / x'Fx) * x for j = 0..n_backtracks and
    keeps the first whose exact KL is within ``delta_kl`` and whose surrogate
    strictly improves. Returns (theta, UpdateReport); theta is ``theta_k``
    itself when nothing is accepted.
    """
    report = UpdateReport()
    f_old = float(surrogate(theta_k))
    report.surrogate_before = report.surrogate_after = f_old
    xFx = float(x_hat @ fvp(x_hat))
    if not np.isfinite(xFx) or xFx <= 0:
        return theta_k, report
    full = np.sqrt(2.0 * delta_kl / xFx)
    for j in range(n_backtracks + 1):
        cand = theta_k + alpha ** j * full * x_hat
        f_new = float(surrogate(cand))
        d = float(kl(cand))
        report.backtrack_steps_used = j
        if np.isfinite(f_new) and np.isfinite(d) and d <= delta_kl and f_new > f_old:
            report.surrogate_after = f_new
            report.kl_after = d
            report.accepted = True
            return cand, report
    report.kl_after = 0.0
    return theta_k, report


def surrogate_objective(policy: PolicySnapshot, batch: RolloutBatch, advantages: np.ndarray) -> float:
    """Importance-weighted advantage mean against the stored behavior density."""
    lp = log_prob(dist_batch(policy, batch.states), batch.raw_actions)
    return float(np.mean(np.exp(lp - batch.behavior_log_density) * advantages))


def mean_kl(theta_k: PolicySnapshot, theta: PolicySnapshot, states: np.ndarray) -> float:
    return float(np.mean(kl_diag_gauss(dist_batch(theta_k, states), dist_batch(theta, states))))


def estimate_policy_gradient(policy: PolicySnapshot, batch: RolloutBatch, advantages: np.ndarray,
                             spec: Optional[MixtureSpec] = None) -> np.ndarray:
    """(1/N) sum_t grad log pi_mix(a_t|s_t) A_t.

    With ``spec=None`` this is the plain TRPO surrogate gradient; the ratio
    pi_theta / pi_behavior is 1 up to rounding and is kept so that both paths
    run the same arithmetic.
    """
    n = batch.batch_size
    lp = log_prob(dist_batch(policy, batch.states), batch.raw_actions)
    if spec is None:
        coeffs = np.exp(lp - batch.behavior_log_density) * advantages / n
    else:
        coeffs = score_coefficients(lp, batch.behavior_log_density, spec) * advantages / n
    return grad_log_prob(policy, batch.states, batch.raw_actions, coeffs)


def shift_memory(memory: Sequence[PolicySnapshot], theta_k: PolicySnapshot) -> list[PolicySnapshot]:
    """Push ``theta_k`` into slot 1 and drop the oldest slot."""
    if not memory:
        return []
    return [theta_k, *memory[:-1]]


# --- value function -------------------------------------------------------------------

def value_mse(arch: MlpArchitecture, phi: np.ndarray, states: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((mlp.forward(arch, phi, states)[:, 0] - targets) ** 2))


def fit_value(arch: MlpArchitecture, phi: np.ndarray, states: np.ndarray, rewards_to_go: np.ndarray,
              cfg: ValueFitConfig, rng: np.random.Generator):
    """Minibatch Adam on the value MSE; returns (best phi, loss_before, loss_after)."""
    n = states.shape[0]
    best = phi.copy()
    loss_before = best_loss = value_mse(arch, phi, states, rewards_to_go)
    if not np.isfinite(loss_before):
        raise ValueFitError("non-finite value loss before fitting")
    m = np.zeros_like(phi)
    v = np.zeros_like(phi)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            out, acts = mlp.forward_cached(arch, phi, states[idx])
            resid = out[:, 0] - rewards_to_go[idx]
            g = mlp.backward(arch, phi, acts, (2.0 / len(idx)) * resid[:, None])
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            phi = phi - cfg.step_size * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        loss = value_mse(arch, phi, states, rewards_to_go)
        if not np.isfinite(loss):
            raise ValueFitError("non-finite value loss during fitting")
        if loss < best_loss:
            best, best_loss = phi.copy(), loss
    return best, loss_before, best_loss


# --- rollouts and the training loop ---------------------------------------------------

def episode_streams(seed: int, episode: int):
    """Independent (environment, policy) generators for one global episode index."""
    return np.random.default_rng([seed, 1, episode]), np.random.default_rng([seed, 2, episode])


def collect_rollouts(env: InterferenceEnv, policy: PolicySnapshot, memory: Sequence[PolicySnapshot],
                     spec: Optional[MixtureSpec], n_steps: int, seed: int, first_episode: int) -> RolloutBatch:
    """Run whole episodes under the mixture (or plain policy when ``spec`` is None).

    Each step picks a component and samples from it alone; the behavior
    densities of all components are evaluated in one batch afterwards.
    """
    T = env.cfg.episode_len
    S, B = env.obs_dim, env.action_dim
    states = np.empty((n_steps, S))
    next_states = np.empty((n_steps, S))
    raw = np.empty((n_steps, B))
    clipped = np.empty((n_steps, B))
    rewards = np.empty(n_steps)
    dones = np.zeros(n_steps)
    snaps = (policy, *memory)
    t = 0
    for ep in range(n_steps // T):
        env_rng, pol_rng = episode_streams(seed, first_episode + ep)
        obs = env.reset(env_rng).observation
        for _ in range(T):
            m = 0 if spec is None else pick_component(spec, pol_rng)
            a_raw = sample_gaussian(distribution(snaps[m], obs), pol_rng)
            a_clip = np.clip(a_raw, 0.0, env.cfg.p_max)
            nxt, r, done = env.step(a_clip)
            states[t], raw[t], clipped[t], rewards[t] = obs, a_raw, a_clip, r
            next_states[t] = nxt.observation
            dones[t] = float(done)
            obs = nxt.observation
            t += 1
    if spec is None:
        behavior = log_prob(dist_batch(policy, states), raw)
    else:
        cache: dict[int, np.ndarray] = {}
        for s in snaps:
            if id(s) not in cache:
                cache[id(s)] = log_prob(dist_batch(s, states), raw)
        comp = np.stack([cache[id(s)] for s in snaps])
        behavior = mixture_log_density_from_components(comp, spec)
    return RolloutBatch(states, raw, clipped, rewards, dones, next_states, behavior, T)


@dataclass
class TrainResult:
    policy: PolicySnapshot
    value_arch: MlpArchitecture
    phi: np.ndarray
    memory: list
    metrics: list
    episodes_run: int


def init_agent(env: InterferenceEnv, cfg: TrainConfig, seed: int):
    policy = make_policy(env.obs_dim, env.action_dim, cfg.hidden, np.random.default_rng([seed, 0, 1]),
                         cfg.log_std_mode, cfg.init_log_std)
    value_arch = MlpArchitecture((env.obs_dim, *cfg.hidden, 1))
    phi = mlp.init_params(value_arch, np.random.default_rng([seed, 0, 2]))
    return policy, value_arch, phi


def iterate_training(env: InterferenceEnv, cfg: TrainConfig, seed: int,
                     plain_trpo: bool = False) -> Iterator[tuple[dict, TrainResult]]:
    """Yield (metrics record, state so far) after every iteration."""
    cfg.validate()
    if env.cfg.episode_len != cfg.episode_len:
        raise ValueError("environment and trainer disagree on the episode length")
    if plain_trpo and cfg.memory_size != 0:
        raise ValueError("the plain TRPO path has no memory; set memory_size = 0")
    policy, value_arch, phi = init_agent(env, cfg, seed)
    spec = None if plain_trpo else mixture_weights(cfg.memory_size, cfg.decay)
    memory = [policy] * cfg.memory_size
    episodes = 0
    env_steps = 0
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        batch = collect_rollouts(env, policy, memory, spec, cfg.batch_size, seed, episodes)
        episodes += cfg.batch_size // cfg.episode_len
        env_steps += cfg.batch_size
        learn_batch = replace(batch, rewards=batch.rewards * cfg.reward_scale)
        buf = compute_gae(learn_batch, lambda s: mlp.forward(value_arch, phi, s)[:, 0], cfg.gamma, cfg.lam)
        if cfg.normalize_adv:
            buf = normalize_advantages(buf)
        adv = buf.advantages

        g = estimate_policy_gradient(policy, batch, adv, spec)
        fvp = FisherOperator(policy, batch.states, cfg.cg_damping)
        x_hat = conjugate_gradient(fvp, g, cfg.cg_iters, cfg.cg_tol)
        cg_residual = float(np.linalg.norm(fvp(x_hat) - g))
        new_params, report = line_search(
            policy.params, x_hat, fvp,
            lambda th: surrogate_objective(policy.with_params(th), batch, adv),
            lambda th: mean_kl(policy, policy.with_params(th), batch.states),
            cfg.delta_kl, cfg.backtrack_coeff, cfg.max_backtracks)
        report.grad_norm = float(np.linalg.norm(g))
        report.cg_residual = cg_residual

        fingerprint = policy.fingerprint()
        memory = shift_memory(memory, policy)
        if report.accepted:
            policy = policy.with_params(new_params)

        phi, report.value_loss_before, report.value_loss_after = fit_value(
            value_arch, phi, batch.states, buf.rewards_to_go, cfg.value_fit,
            np.random.default_rng([seed, 3, it]))

        record = {
            "iteration": it,
            "env_steps": env_steps,
            "mean_return": float(batch.episode_returns().mean()),
            **asdict(report),
            "policy_fingerprint": fingerprint,
            "wall_seconds": time.perf_counter() - start,
        }
        log.info("iter %d return %.3f kl %.4f accepted %s", it, record["mean_return"],
                 report.kl_after, report.accepted)
        yield record, TrainResult(policy, value_arch, phi, memory, None, episodes)


def train(env: InterferenceEnv, cfg: TrainConfig, seed: Optional[int] = None,
          plain_trpo: bool = False, on_iteration: Optional[Callable[[dict], None]] = None) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    metrics = []
    result = None
    for record, result in iterate_training(env, cfg, seed, plain_trpo):
        metrics.append(record)
        if on_iteration is not None:
            on_iteration(record)
    if result is None:
        policy, value_arch, phi = init_agent(env, cfg, seed)
        return TrainResult(policy, value_arch, phi, [policy] * cfg.memory_size, metrics, 0)
    result.metrics = metrics
    return result
