"""Diagonal-Gaussian policies, the faded-experience mixture and the Fisher operator.

All batch functions take ``states`` of shape (N, S) and ``actions`` of shape
(N, B). Densities and scores always use the raw (unclipped) action.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from fetrpo import mlp
from fetrpo.mlp import MlpArchitecture, ShapeError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class LogStdMode(str, Enum):
    SHARED = "shared"
    HEAD = "head"


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    params: np.ndarray
    arch: MlpArchitecture
    log_std_mode: LogStdMode = LogStdMode.SHARED

    def __post_init__(self):
        mode = LogStdMode(self.log_std_mode)
        object.__setattr__(self, "log_std_mode", mode)
        if mode is LogStdMode.SHARED:
            if self.arch.head_split is not None:
                raise ValueError("shared log-std mode takes an architecture without head split")
            expected = self.arch.n_params + self.arch.out_dim
        else:
            p, q = self.arch.head_split or (0, 0)
            if p == 0 or p != q:
                raise ValueError("head mode needs head_split = (B, B)")
            expected = self.arch.n_params
        if self.params.shape != (expected,):
            raise ShapeError(f"policy expects {expected} params, got shape {self.params.shape}")

    @property
    def action_dim(self) -> int:
        if self.log_std_mode is LogStdMode.SHARED:
            return self.arch.out_dim
        return self.arch.head_split[0]

    def with_params(self, params: np.ndarray) -> "PolicySnapshot":
        return PolicySnapshot(np.asarray(params, dtype=np.float64), self.arch, self.log_std_mode)

    def fingerprint(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.params).tobytes()).hexdigest()[:16]


def make_policy(obs_dim: int, action_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                mode: LogStdMode | str = LogStdMode.SHARED, init_log_std: float = 0.0) -> PolicySnapshot:
    mode = LogStdMode(mode)
    if mode is LogStdMode.SHARED:
        arch = MlpArchitecture((obs_dim, *hidden, action_dim))
        params = mlp.init_params(arch, rng, extra=action_dim, extra_value=init_log_std)
    else:
        arch = MlpArchitecture((obs_dim, *hidden, 2 * action_dim), head_split=(action_dim, action_dim))
        params = mlp.init_params(arch, rng)
        params[arch.slices()[-1][1].start + action_dim:arch.n_params] = init_log_std
    return PolicySnapshot(params, arch, mode)


@dataclass
class _Forward:
    """Distribution parameters for a batch plus what the backward pass needs."""
    mean: np.ndarray
    log_std: np.ndarray
    free: np.ndarray  # log-std coordinates not pinned by the clamp
    acts: list = field(repr=False)


def _forward(snap: PolicySnapshot, states: np.ndarray) -> _Forward:
    out, acts = mlp.forward_cached(snap.arch, snap.params, states)
    B = snap.action_dim
    if snap.log_std_mode is LogStdMode.SHARED:
        mean = out
        raw = np.broadcast_to(snap.params[snap.arch.n_params:], mean.shape)
    else:
        mean, raw = out[:, :B], out[:, B:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    free = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return _Forward(mean, log_std, free, acts)


def _pullback(snap: PolicySnapshot, fw: _Forward, d_mean: np.ndarray, d_log_std: np.ndarray) -> np.ndarray:
    """Parameter gradient of sum(d_mean*mean + d_log_std*log_std)."""
    d_log_std = d_log_std * fw.free
    if snap.log_std_mode is LogStdMode.SHARED:
        g = mlp.backward(snap.arch, snap.params, fw.acts, d_mean)
        return np.concatenate([g, d_log_std.sum(axis=0)])
    return mlp.backward(snap.arch, snap.params, fw.acts, np.concatenate([d_mean, d_log_std], axis=1))


def _push(snap: PolicySnapshot, fw: _Forward, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian-vector product into (mean, log_std) coordinates."""
    d_out = mlp.jvp_cached(snap.arch, snap.params, fw.acts, x)
    if snap.log_std_mode is LogStdMode.SHARED:
        d_log_std = np.broadcast_to(x[snap.arch.n_params:], fw.log_std.shape)
        return d_out, d_log_std * fw.free
    B = snap.action_dim
    return d_out[:, :B], d_out[:, B:] * fw.free


def dist_batch(snap: PolicySnapshot, states: np.ndarray) -> DiagGaussian:
    fw = _forward(snap, states)
    return DiagGaussian(fw.mean, np.array(fw.log_std))


def distribution(snap: PolicySnapshot, state: np.ndarray) -> DiagGaussian:
    d = dist_batch(snap, np.asarray(state, dtype=np.float64)[None, :])
    return DiagGaussian(d.mean[0], d.log_std[0])


def log_prob(dist: DiagGaussian, action: np.ndarray) -> np.ndarray | float:
    """Log density of a diagonal Gaussian; sums over the last axis."""
    z = (np.asarray(action) - dist.mean) * np.exp(-dist.log_std)
    lp = -dist.log_std - _HALF_LOG_2PI - 0.5 * z ** 2
    return lp.sum(axis=-1)


def kl_diag_gauss(p: DiagGaussian, q: DiagGaussian) -> np.ndarray | float:
    """KL(p || q), summed over the last axis."""
    var_ratio = np.exp(2.0 * (p.log_std - q.log_std))
    mean_term = (p.mean - q.mean) ** 2 * np.exp(-2.0 * q.log_std)
    kl = (q.log_std - p.log_std) + 0.5 * (var_ratio + mean_term) - 0.5
    return kl.sum(axis=-1)


# --- faded-experience mixture ---------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    M: int
    z: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.M + 1,):
            raise ValueError(f"expected {self.M + 1} weights, got {w.shape}")
        if abs(w.sum() - 1.0) > 1e-12 or w[0] <= 0 or np.any(w < 0) or np.any(w > 1) or np.any(w[1:] > w[0]):
            raise ValueError(f"weights {w} violate the mixture constraints")


def mixture_weights(M: int, z: float) -> MixtureSpec:
    if M < 0 or z <= 0:
        raise ValueError(f"need M >= 0 and z > 0, got M={M}, z={z}")
    raw = 1.0 / np.arange(1, M + 2, dtype=np.float64) ** z
    return MixtureSpec(int(M), float(z), raw / raw.sum())


def _component_log_probs(current: PolicySnapshot, memory: Sequence[PolicySnapshot],
                         states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """(M+1, N) matrix of per-component log densities, current policy first."""
    return np.stack([log_prob(dist_batch(s, states), actions) for s in (current, *memory)])


def mixture_log_density_from_components(comp_lp: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """log sum_m w_m exp(comp_lp[m]) with the max factored out; comp_lp is (M+1, N)."""
    with np.errstate(divide="ignore"):
        terms = comp_lp + np.log(spec.weights)[:, None]
    top = terms.max(axis=0)
    return top + np.log(np.exp(terms - top).sum(axis=0))


def mixture_log_density(current: PolicySnapshot, memory: Sequence[PolicySnapshot], spec: MixtureSpec,
                        states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    if len(memory) != spec.M:
        raise ValueError(f"memory holds {len(memory)} policies, spec expects {spec.M}")
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    return mixture_log_density_from_components(
        _component_log_probs(current, memory, states, actions), spec)


def mixture_density(current, memory, spec, state, action) -> float:
    return float(np.exp(mixture_log_density(current, memory, spec, state, action)[0]))


def mixture_sample(current: PolicySnapshot, memory: Sequence[PolicySnapshot], spec: MixtureSpec,
                   state: np.ndarray, rng: np.random.Generator, low=0.0, high=np.inf):
    """Draw (raw_action, clipped_action, component_index) from the mixture."""
    dists = [distribution(s, state) for s in (current, *memory)]
    raw, m = sample_from_components(dists, spec, rng)
    return raw, np.clip(raw, low, high), m


def pick_component(spec: MixtureSpec, rng: np.random.Generator) -> int:
    # M = 0 consumes no randomness so mixture sampling matches plain sampling
    return 0 if spec.M == 0 else int(rng.choice(spec.M + 1, p=spec.weights))


def sample_from_components(dists: Sequence[DiagGaussian], spec: MixtureSpec, rng: np.random.Generator):
    m = pick_component(spec, rng)
    return sample_gaussian(dists[m], rng), m


def sample_gaussian(dist: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    return dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)


def score_coefficients(current_lp: np.ndarray, mixture_lp: np.ndarray, spec: MixtureSpec) -> np.ndarray:
    """Per-sample factor w0 * pi_theta / pi_mix turning the plain score into the mixture score."""
    return spec.weights[0] * np.exp(current_lp - mixture_lp)


def grad_log_prob(snap: PolicySnapshot, states: np.ndarray, actions: np.ndarray,
                  coeffs: np.ndarray) -> np.ndarray:
    """sum_t coeffs[t] * grad_theta log pi_theta(a_t | s_t)."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    fw = _forward(snap, states)
    inv_var = np.exp(-2.0 * fw.log_std)
    diff = actions - fw.mean
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1, 1)
    d_mean = c * diff * inv_var
    d_log_std = c * (diff ** 2 * inv_var - 1.0)
    return _pullback(snap, fw, d_mean, d_log_std)


def grad_log_mixture(current: PolicySnapshot, memory: Sequence[PolicySnapshot], spec: MixtureSpec,
                     state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Gradient of log pi_mix(a|s) with respect to the current policy's parameters."""
    states = np.atleast_2d(state)
    actions = np.atleast_2d(action)
    comp = _component_log_probs(current, memory, states, actions)
    coeff = score_coefficients(comp[0], mixture_log_density_from_components(comp, spec), spec)
    return grad_log_prob(current, states, actions, coeff)


class FisherOperator:
    """x -> F x + damping * x for the mean-KL Fisher of ``snap`` on a fixed state batch.

    The forward pass is evaluated once; every application costs one forward-mode
    and one reverse-mode sweep. F is never formed.
    """

    def __init__(self, snap: PolicySnapshot, states: np.ndarray, damping: float = 0.0):
        self.snap = snap
        self.fw = _forward(snap, np.atleast_2d(states))
        self.n = self.fw.mean.shape[0]
        self.inv_var = np.exp(-2.0 * self.fw.log_std)
        self.damping = float(damping)
        self.dim = snap.params.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"direction of shape {x.shape}, expected ({self.dim},)")
        d_mean, d_log_std = _push(self.snap, self.fw, x)
        fx = _pullback(self.snap, self.fw, d_mean * self.inv_var, 2.0 * d_log_std) / self.n
        return fx + self.damping * x


def fisher_vector_product(current: PolicySnapshot, states: np.ndarray, x: np.ndarray,
                          damping: float = 0.0) -> np.ndarray:
    return FisherOperator(current, states, damping)(x)
