"""K-user interference channel with LOS/NLOS pathloss, shadowing and fading.

Gains are indexed ``gains[j, k]``: transmitter j to receiver k. Rates are in nats.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class EnvConfig:
    K: int = 3
    area_radius: float = 60.0
    p_max: float = 1.0
    noise_psd_dbm_hz: float = -173.0
    bandwidth_hz: float = 10e6
    mobility_max_m: float = 5.0
    perturb_lo: float = 0.9
    perturb_hi: float = 1.1
    alpha_los: float = 2.4
    alpha_nlos: float = 3.78
    d0_m: float = 18.0
    d1_m: float = 36.0
    nakagami_m: float = 10.0
    shadow_std_los_db: float = 5.0
    shadow_std_nlos_db: float = 8.6
    pair_dist_lo: float = 2.0
    pair_dist_hi: float = 20.0
    min_dist_m: float = 1.0
    episode_len: int = 200
    history_frames: int = 4
    rate_scale: float = 10.0

    def validate(self):
        positive = ["K", "area_radius", "p_max", "bandwidth_hz", "perturb_lo", "perturb_hi",
                    "alpha_los", "alpha_nlos", "d0_m", "d1_m", "nakagami_m", "shadow_std_los_db",
                    "shadow_std_nlos_db", "pair_dist_lo", "pair_dist_hi", "min_dist_m",
                    "episode_len", "history_frames", "rate_scale"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"env config: {name} must be positive, got {getattr(self, name)}")
        if self.mobility_max_m < 0:
            raise ValueError("env config: mobility_max_m must be non-negative")
        if not self.perturb_lo < self.perturb_hi:
            raise ValueError("env config: perturb_lo must be below perturb_hi")
        if not self.alpha_nlos > self.alpha_los:
            raise ValueError("env config: alpha_nlos must exceed alpha_los")
        if not self.pair_dist_lo <= self.pair_dist_hi < self.area_radius:
            raise ValueError("env config: need pair_dist_lo <= pair_dist_hi < area_radius")
        return self

    @property
    def noise_w(self) -> float:
        dbm = self.noise_psd_dbm_hz + 10.0 * np.log10(self.bandwidth_hz)
        return 10.0 ** (dbm / 10.0) * 1e-3

    @property
    def obs_dim(self) -> int:
        return self.history_frames * (self.K ** 2 + self.K)


@dataclass
class Geometry:
    tx: np.ndarray  # (K, 2)
    rx: np.ndarray  # (K, 2)
    min_dist: float = 1.0

    @property
    def distances(self) -> np.ndarray:
        d = np.linalg.norm(self.tx[:, None, :] - self.rx[None, :, :], axis=-1)
        return np.maximum(d, self.min_dist)


@dataclass
class ChannelDraw:
    los_mode: np.ndarray
    pathloss: np.ndarray
    shadow_linear: np.ndarray
    fading: np.ndarray

    @property
    def gains(self) -> np.ndarray:
        return self.pathloss * self.shadow_linear * self.fading


def _uniform_disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def _clamp_to_disk(p, radius):
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    scale = np.where(r > radius, radius / np.maximum(r, 1e-300), 1.0)
    return p * scale


def place_nodes(rng: np.random.Generator, cfg: EnvConfig) -> Geometry:
    tx = _uniform_disk(rng, cfg.K, cfg.area_radius)
    rx = np.empty_like(tx)
    for k in range(cfg.K):
        while True:
            phi = rng.uniform(0.0, 2 * np.pi)
            d = rng.uniform(cfg.pair_dist_lo, cfg.pair_dist_hi)
            cand = tx[k] + d * np.array([np.cos(phi), np.sin(phi)])
            if np.hypot(*cand) <= cfg.area_radius:
                rx[k] = cand
                break
    return Geometry(tx, rx, cfg.min_dist_m)


def los_probability(d, d0: float = 18.0, d1: float = 36.0):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("LOS probability needs positive distances")
    e = np.exp(-d / d1)
    p = np.minimum(d0 / d, 1.0) * (1.0 - e) + e
    return float(p) if p.ndim == 0 else p


def draw_large_scale(distances, rng, cfg: EnvConfig):
    """LOS modes, pathloss and linear shadowing for every link."""
    los = rng.uniform(size=distances.shape) < los_probability(distances, cfg.d0_m, cfg.d1_m)
    alpha = np.where(los, cfg.alpha_los, cfg.alpha_nlos)
    pathloss = distances ** (-alpha)
    std_db = np.where(los, cfg.shadow_std_los_db, cfg.shadow_std_nlos_db)
    shadow = 10.0 ** (rng.standard_normal(distances.shape) * std_db / 10.0)
    return los, pathloss, shadow


def draw_fading(los, rng, cfg: EnvConfig) -> np.ndarray:
    """Unit-mean power fading: Gamma(m, 1/m) on LOS links, Exp(1) on NLOS links."""
    m = cfg.nakagami_m
    gamma = rng.gamma(m, 1.0 / m, size=los.shape)
    expo = rng.exponential(1.0, size=los.shape)
    return np.where(los, gamma, expo)


def draw_channel(geometry: Geometry, rng: np.random.Generator, cfg: EnvConfig) -> ChannelDraw:
    los, pathloss, shadow = draw_large_scale(geometry.distances, rng, cfg)
    return ChannelDraw(los, pathloss, shadow, draw_fading(los, rng, cfg))


def sinr(gains: np.ndarray, powers: np.ndarray, noise_w: float) -> np.ndarray:
    gains = np.asarray(gains, dtype=np.float64)
    rx = gains * np.asarray(powers, dtype=np.float64)[:, None]  # rx[j, k] = h_jk P_j
    signal = np.diag(rx)
    # off-diagonal sum taken directly: total - signal cancels at high SINR
    interference = np.where(np.eye(len(signal), dtype=bool), 0.0, rx).sum(axis=0)
    return signal / (noise_w + interference)


def rates(gains, powers, noise_w) -> np.ndarray:
    return np.log1p(sinr(gains, powers, noise_w))


def sum_rate(gains, powers, noise_w) -> float:
    return float(rates(gains, powers, noise_w).sum())


@dataclass
class EnvState:
    observation: np.ndarray
    step_index: int
    perturb: np.ndarray
    geometry: Geometry
    channel: ChannelDraw
    last_rates: Optional[np.ndarray] = None


class InterferenceEnv:
    """Episodic power-control environment.

    Node placement is drawn once at construction; every ``reset`` moves the
    nodes, redraws LOS modes, shadowing and the distance perturbation, and
    every ``step`` draws a fresh fading realization.
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator, trace_path: Optional[str] = None):
        self.cfg = cfg.validate()
        self.noise_w = cfg.noise_w
        self.geometry = place_nodes(rng, cfg)
        self.state: Optional[EnvState] = None
        self._rng: Optional[np.random.Generator] = None
        self._trace = None
        if trace_path is not None:
            self._trace_file = open(trace_path, "w", newline="")
            self._trace = csv.writer(self._trace_file)
            K = cfg.K
            self._trace.writerow(
                ["step"] + [f"h_{j}_{k}" for j in range(K) for k in range(K)]
                + [f"p_{k}" for k in range(K)] + [f"rate_{k}" for k in range(K)])

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    @property
    def action_dim(self) -> int:
        return self.cfg.K

    def _frame(self, perturb, rate_vec) -> np.ndarray:
        d = self.geometry.distances * perturb / self.cfg.area_radius
        return np.concatenate([d.ravel(), rate_vec / self.cfg.rate_scale])

    def _move(self, pts, rng):
        step = rng.uniform(0.0, self.cfg.mobility_max_m, size=len(pts))
        phi = rng.uniform(0.0, 2 * np.pi, size=len(pts))
        moved = pts + step[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        return _clamp_to_disk(moved, self.cfg.area_radius)

    def reset(self, rng: np.random.Generator) -> EnvState:
        cfg = self.cfg
        self._rng = rng
        if cfg.mobility_max_m > 0:
            self.geometry = Geometry(self._move(self.geometry.tx, rng), self._move(self.geometry.rx, rng),
                                     cfg.min_dist_m)
        los, pathloss, shadow = draw_large_scale(self.geometry.distances, rng, cfg)
        perturb = rng.uniform(cfg.perturb_lo, cfg.perturb_hi, size=(cfg.K, cfg.K))
        frame = self._frame(perturb, np.zeros(cfg.K))
        obs = np.tile(frame, cfg.history_frames)
        channel = ChannelDraw(los, pathloss, shadow, np.ones_like(pathloss))
        self.state = EnvState(obs, 0, perturb, self.geometry, channel)
        return self.state

    def step(self, action):
        cfg = self.cfg
        st = self.state
        if st is None:
            raise RuntimeError("step() called before reset()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (cfg.K,):
            raise ValueError(f"action must have length {cfg.K}, got shape {action.shape}")
        if st.step_index >= cfg.episode_len:
            raise RuntimeError("episode is over; call reset()")
        powers = np.clip(action, 0.0, cfg.p_max)
        ch = st.channel
        channel = ChannelDraw(ch.los_mode, ch.pathloss, ch.shadow_linear,
                              draw_fading(ch.los_mode, self._rng, cfg))
        gains = channel.gains
        user_rates = rates(gains, powers, self.noise_w)
        reward = float(user_rates.sum())
        frame = self._frame(st.perturb, user_rates)
        width = frame.shape[0]
        obs = np.concatenate([frame, st.observation[:-width]])
        t = st.step_index + 1
        done = t == cfg.episode_len
        self.state = EnvState(obs, t, st.perturb, st.geometry, channel, user_rates)
        if self._trace is not None:
            vals = np.concatenate([gains.ravel(), powers, user_rates]).tolist()
            self._trace.writerow([t - 1, *map(repr, vals)])
        return self.state, reward, done

    def close(self):
        if self._trace is not None:
            self._trace_file.close()
            self._trace = None
