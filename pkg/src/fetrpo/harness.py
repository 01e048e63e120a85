"""Experiment configuration, checkpoints, multi-seed runs and held-out evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fetrpo.baselines import WmmseConfig, max_power, random_power, wmmse
from fetrpo.env import EnvConfig, InterferenceEnv, sum_rate
from fetrpo.mlp import MlpArchitecture
from fetrpo.policy import LogStdMode, PolicySnapshot, distribution, sample_gaussian
from fetrpo.trpo import TrainConfig, TrainResult, ValueFitConfig, episode_streams, iterate_training

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["iteration", "env_steps", "mean_return", "kl_after", "surrogate_improvement",
                  "backtrack_steps", "accepted", "value_loss_after", "wall_seconds"]
REFERENCE_COLUMNS = ["wmmse_ref", "random_ref", "maxpower_ref"]

LONG_RUN = {"iterations": 1300, "batch_size": 10000, "episode_len": 500}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs"
    eval_episodes: int = 10
    eval_episode_len: int = 20
    long_run: bool = False
    wmmse_max_iters: int = 500
    checkpoint: bool = True

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if self.eval_episodes < 1 or self.eval_episode_len < 1:
            raise ConfigError("eval_episodes and eval_episode_len must be positive")
        if self.env.episode_len != self.train.episode_len:
            raise ConfigError("episode_len differs between environment and trainer")
        try:
            self.env.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def eval_draws(self) -> int:
        return self.eval_episodes * self.eval_episode_len


# --- flat key = value configuration -------------------------------------------------

_ALIASES = {"lambda": "lam", "M": "memory_size", "z": "decay", "N": "batch_size", "T": "episode_len",
            "L": "iterations"}


def config_keys() -> dict[str, str]:
    """Every accepted key mapped to a one-line description of its default."""
    keys = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "value_fit":
            continue
        keys[f.name] = f"trainer, default {f.default!r}"
    for f in dataclasses.fields(ValueFitConfig):
        keys[f"value_fit.{f.name}"] = f"value fit, default {f.default!r}"
    for f in dataclasses.fields(EnvConfig):
        if f.name != "episode_len":
            keys[f.name] = f"environment, default {f.default!r}"
    for f in dataclasses.fields(ExperimentConfig):
        if f.name not in ("train", "env"):
            keys[f.name] = f"experiment, default {f.default!r}"
    return keys


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    key = _ALIASES.get(key.strip(), key.strip())
    if key == "episode_len":
        value = _coerce(raw, 0, key)
        cfg.train.episode_len = value
        cfg.env.episode_len = value
        return cfg
    if key.startswith("value_fit."):
        target, name = cfg.train.value_fit, key.split(".", 1)[1]
    elif key in {f.name for f in dataclasses.fields(TrainConfig)} - {"value_fit"}:
        target, name = cfg.train, key
    elif key in {f.name for f in dataclasses.fields(EnvConfig)}:
        target, name = cfg.env, key
    elif key in {f.name for f in dataclasses.fields(ExperimentConfig)} - {"train", "env"}:
        target, name = cfg, key
    else:
        raise ConfigError(f"unknown config key {key!r}")
    if not hasattr(target, name):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw, getattr(target, name), key))
    return cfg


def parse_config_text(text: str, cfg: Optional[ExperimentConfig] = None, source: str = "<text>"):
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        try:
            apply_setting(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def build_config(path: Optional[str] = None, overrides: Sequence[str] = (), long_run: bool = False,
                 seeds: Optional[Sequence[int]] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Defaults, then the long-run preset, then the file, then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if long_run:
        cfg.long_run = True
        for key, value in LONG_RUN.items():
            apply_setting(cfg, key, str(value))
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        parse_config_text(text, cfg, source=str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_setting(cfg, *item.split("=", 1))
    if seeds is not None:
        cfg.seeds = tuple(seeds)
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key in config_keys():
        if key.startswith("value_fit."):
            value = getattr(cfg.train.value_fit, key.split(".", 1)[1])
        elif hasattr(cfg.train, key):
            value = getattr(cfg.train, key)
        elif hasattr(cfg.env, key):
            value = getattr(cfg.env, key)
        else:
            value = getattr(cfg, key)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --- checkpoints -----------------------------------------------------------------------

CKPT_TAG = "fetrpo-ckpt"
CKPT_VERSION = 1
_MARKER = re.compile(r"^(THETA|PHI|MEM\d+|RNG|END)$")


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class CountError(CheckpointError):
    pass


class ParseError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    policy: PolicySnapshot
    value_arch: MlpArchitecture
    phi: np.ndarray
    memory: list
    iteration: int
    seed: int
    episodes: int

    @classmethod
    def from_result(cls, result: TrainResult, seed: int, iteration: int) -> "Checkpoint":
        return cls(result.policy, result.value_arch, result.phi, list(result.memory), iteration, seed,
                   result.episodes_run)


def _dims(arch: MlpArchitecture) -> str:
    return ",".join(map(str, arch.layer_dims))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    pol = ckpt.policy
    split = "none" if pol.arch.head_split is None else ",".join(map(str, pol.arch.head_split))
    out = [f"{CKPT_TAG} v{CKPT_VERSION}",
           f"policy_dims {_dims(pol.arch)}",
           f"head_split {split}",
           f"log_std_mode {pol.log_std_mode.value}",
           f"value_dims {_dims(ckpt.value_arch)}",
           f"memory {len(ckpt.memory)}",
           f"iteration {ckpt.iteration}"]

    def section(name, values):
        out.append(name)
        out.extend(repr(float(v)) for v in values)

    section("THETA", pol.params)
    section("PHI", ckpt.phi)
    for m, snap in enumerate(ckpt.memory, 1):
        section(f"MEM{m}", snap.params)
    out.append("RNG")
    out.append(f"seed {ckpt.seed}")
    out.append(f"episodes {ckpt.episodes}")
    out.append("END")
    Path(path).write_text("\n".join(out) + "\n")


def _header(lines, i, key, path):
    if i >= len(lines):
        raise CountError(f"{path}: file ends before header field {key!r}")
    parts = lines[i].split(" ", 1)
    if parts[0] != key or len(parts) != 2:
        raise ParseError(f"{path}:{i + 1}: expected header field {key!r}, got {lines[i]!r}")
    return parts[1]


def _ints(text, path, key):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ParseError(f"{path}: bad integer list for {key}: {text!r}") from None


def load_checkpoint(path) -> Checkpoint:
    path = str(path)
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if not lines or not lines[0].startswith(CKPT_TAG + " "):
        raise ParseError(f"{path}: not a checkpoint (missing {CKPT_TAG} header)")
    if lines[0] != f"{CKPT_TAG} v{CKPT_VERSION}":
        raise VersionError(f"{path}: unsupported checkpoint version {lines[0].split(' ', 1)[1]!r}, "
                           f"expected v{CKPT_VERSION}")
    pdims = _ints(_header(lines, 1, "policy_dims", path), path, "policy_dims")
    split_raw = _header(lines, 2, "head_split", path)
    split = None if split_raw == "none" else _ints(split_raw, path, "head_split")
    mode = _header(lines, 3, "log_std_mode", path)
    vdims = _ints(_header(lines, 4, "value_dims", path), path, "value_dims")
    try:
        n_mem = int(_header(lines, 5, "memory", path))
        iteration = int(_header(lines, 6, "iteration", path))
        parch = MlpArchitecture(pdims, head_split=split)
        varch = MlpArchitecture(vdims)
        mode = LogStdMode(mode)
    except ValueError as exc:
        raise ParseError(f"{path}: bad header: {exc}") from None
    n_theta = parch.n_params + (parch.out_dim if mode is LogStdMode.SHARED else 0)
    pos = 7

    def section(name, count):
        nonlocal pos
        if pos >= len(lines) or lines[pos] != name:
            found = lines[pos] if pos < len(lines) else "end of file"
            raise CountError(f"{path}: section {name} expected at line {pos + 1}, found {found!r}")
        pos += 1
        values = []
        while pos < len(lines) and not _MARKER.match(lines[pos]):
            try:
                values.append(float(lines[pos]))
            except ValueError:
                raise ParseError(f"{path}:{pos + 1}: bad number in section {name}: {lines[pos]!r}") from None
            pos += 1
        if len(values) != count:
            raise CountError(f"{path}: section {name} has {len(values)} values, expected {count}")
        return np.array(values, dtype=np.float64)

    theta = section("THETA", n_theta)
    phi = section("PHI", varch.n_params)
    memory = [PolicySnapshot(section(f"MEM{m}", n_theta), parch, mode) for m in range(1, n_mem + 1)]
    if pos >= len(lines) or lines[pos] != "RNG":
        raise CountError(f"{path}: section RNG missing")
    rng_fields = {}
    for text in lines[pos + 1:]:
        if text == "END":
            break
        key, _, value = text.partition(" ")
        rng_fields[key] = value
    else:
        raise CountError(f"{path}: section RNG is not terminated by END")
    try:
        seed, episodes = int(rng_fields["seed"]), int(rng_fields["episodes"])
    except (KeyError, ValueError):
        raise ParseError(f"{path}: RNG section needs integer seed and episodes") from None
    return Checkpoint(PolicySnapshot(theta, parch, mode), varch, phi, memory, iteration, seed, episodes)


# --- evaluation ------------------------------------------------------------------------

@dataclass
class EvalReport:
    policy: float
    wmmse: float
    random: float
    max_power: float
    draws: int
    policy_mean: float = float("nan")  # same draws, acting with the clipped mean action

    @property
    def wmmse_ratio(self) -> float:
        return self.policy / self.wmmse


def _eval_env(cfg: ExperimentConfig, seed: int, episodes: int = 0) -> InterferenceEnv:
    """Environment positioned where training left it after ``episodes`` resets."""
    env_cfg = dataclasses.replace(cfg.env, episode_len=cfg.eval_episode_len)
    env = InterferenceEnv(env_cfg, np.random.default_rng([seed, 0, 0]))
    # nodes random-walk at every reset; replaying the training resets recovers the final deployment
    for ep in range(episodes):
        env.reset(episode_streams(seed, ep)[0])
    return env


def evaluate(policy: Optional[PolicySnapshot], cfg: ExperimentConfig, seed: int, episodes: int = 0) -> EvalReport:
    """Mean per-draw sum rates on held-out channel draws.

    Evaluation starts from the deployment reached after ``episodes`` training
    episodes of this seed, so a trained policy is scored where it learned.
    The headline policy score samples actions from the stochastic policy, the
    object training optimizes; ``policy_mean`` scores the clipped mean action.
    Both run on the same draws, and every baseline sees the exact gains of
    each draw. With ``policy=None`` only the baselines are evaluated and the
    observation history follows the max-power actions.
    """
    sampled, deterministic = _eval_env(cfg, seed, episodes), _eval_env(cfg, seed, episodes)
    K, p_max, nw = cfg.env.K, cfg.env.p_max, sampled.noise_w
    wcfg = WmmseConfig(max_iters=cfg.wmmse_max_iters)
    totals = np.zeros(5)
    for ep in range(cfg.eval_episodes):
        rand_rng = np.random.default_rng([seed, 5, ep])
        act_rng = np.random.default_rng([seed, 9, ep])
        # actions never touch the environment stream, so both copies see identical gains
        obs_s = sampled.reset(np.random.default_rng([seed, 4, ep])).observation
        obs_d = deterministic.reset(np.random.default_rng([seed, 4, ep])).observation
        for _ in range(cfg.eval_episode_len):
            if policy is None:
                st, _, _ = sampled.step(max_power(K, p_max))
                r_s = r_d = np.nan
            else:
                a_s = sample_gaussian(distribution(policy, obs_s), act_rng)
                a_d = distribution(policy, obs_d).mean
                st, r_s, _ = sampled.step(np.clip(a_s, 0.0, p_max))
                st_d, r_d, _ = deterministic.step(np.clip(a_d, 0.0, p_max))
                obs_d = st_d.observation
            gains = st.channel.gains
            totals += [r_s, r_d,
                       sum_rate(gains, wmmse(gains, nw, p_max, wcfg)[0], nw),
                       sum_rate(gains, random_power(rand_rng, K, p_max), nw),
                       sum_rate(gains, max_power(K, p_max), nw)]
            obs_s = st.observation
    n = cfg.eval_draws
    mean = totals / n
    return EvalReport(float(mean[0]), float(mean[2]), float(mean[3]), float(mean[4]), n, float(mean[1]))


def baseline_sweep(cfg: ExperimentConfig, seed: int, path) -> EvalReport:
    """Per-draw sum rates of the three allocators on fresh deployments, written to CSV."""
    K, p_max, nw = cfg.env.K, cfg.env.p_max, cfg.env.noise_w
    wcfg = WmmseConfig(max_iters=cfg.wmmse_max_iters)
    rows = []
    for i in range(cfg.eval_draws):
        env = InterferenceEnv(cfg.env, np.random.default_rng([seed, 6, i]))
        env.reset(np.random.default_rng([seed, 7, i]))
        st, _, _ = env.step(np.zeros(K))
        gains = st.channel.gains
        rows.append([i, sum_rate(gains, wmmse(gains, nw, p_max, wcfg)[0], nw),
                     sum_rate(gains, random_power(np.random.default_rng([seed, 8, i]), K, p_max), nw),
                     sum_rate(gains, max_power(K, p_max), nw)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "wmmse", "random", "max_power"])
        for r in rows:
            w.writerow([r[0], *map(repr, r[1:])])
    mean = np.array(rows)[:, 1:].mean(axis=0)
    return EvalReport(float("nan"), float(mean[0]), float(mean[1]), float(mean[2]), len(rows))


# --- experiments -----------------------------------------------------------------------

def metrics_row(record: dict) -> dict:
    return {
        "iteration": record["iteration"],
        "env_steps": record["env_steps"],
        "mean_return": record["mean_return"],
        "kl_after": record["kl_after"],
        "surrogate_improvement": record["surrogate_after"] - record["surrogate_before"],
        "backtrack_steps": record["backtrack_steps_used"],
        "accepted": int(record["accepted"]),
        "value_loss_after": record["value_loss_after"],
        "wall_seconds": record["wall_seconds"],
    }


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class SeedRun:
    seed: int
    metrics: list
    evaluation: EvalReport
    csv_path: str
    checkpoint_path: Optional[str]
    records: list = field(default_factory=list)  # full training records
    final_fingerprint: Optional[str] = None


def run_seed(cfg: ExperimentConfig, seed: int, plain_trpo: bool = False) -> SeedRun:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = InterferenceEnv(cfg.env, np.random.default_rng([seed, 0, 0]))
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    rows, records, result = [], [], None
    for record, result in iterate_training(env, train_cfg, seed, plain_trpo):
        records.append(record)
        rows.append(metrics_row(record))
        log.info("seed %d iter %d return %.2f", seed, record["iteration"], record["mean_return"])
    csv_path = out / f"metrics_seed{seed}.csv"
    write_csv(csv_path, METRIC_COLUMNS, rows)
    ckpt_path = None
    if result is not None and cfg.checkpoint:
        ckpt_path = out / f"seed{seed}.ckpt"
        save_checkpoint(ckpt_path, Checkpoint.from_result(result, seed, len(rows)))
    policy = result.policy if result is not None else None
    evaluation = evaluate(policy, cfg, seed, 0 if result is None else result.episodes_run)
    return SeedRun(seed, rows, evaluation, str(csv_path), None if ckpt_path is None else str(ckpt_path),
                   records, None if policy is None else policy.fingerprint())


def _worker_count() -> int:
    raw = os.environ.get("FETRPO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FETRPO_THREADS must be an integer, got {raw!r}") from None


def run_experiment(cfg: ExperimentConfig, plain_trpo: bool = False, name: str = "averaged") -> dict:
    """Train every seed, then write the averaged plot-ready CSV.

    Returns a dict with the per-seed runs and the averaged rows. Seeds run in
    up to ``FETRPO_THREADS`` worker processes.
    """
    cfg.validate()
    workers = min(_worker_count(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds,
                                 [plain_trpo] * len(cfg.seeds)))
    else:
        runs = [run_seed(cfg, s, plain_trpo) for s in cfg.seeds]
    T = cfg.train.episode_len
    ref = {
        # per-draw sum rates scaled to one episode so they share the return axis
        "wmmse_ref": T * float(np.mean([r.evaluation.wmmse for r in runs])),
        "random_ref": T * float(np.mean([r.evaluation.random for r in runs])),
        "maxpower_ref": T * float(np.mean([r.evaluation.max_power for r in runs])),
    }
    seed_cols = [f"mean_return_seed{r.seed}" for r in runs]
    averaged = []
    for i in range(len(runs[0].metrics)):
        row = {c: float(np.mean([r.metrics[i][c] for r in runs])) for c in METRIC_COLUMNS}
        row["iteration"] = runs[0].metrics[i]["iteration"]
        row["env_steps"] = runs[0].metrics[i]["env_steps"]
        for col, r in zip(seed_cols, runs):
            row[col] = r.metrics[i]["mean_return"]
        row.update(ref)
        averaged.append(row)
    columns = METRIC_COLUMNS + seed_cols + REFERENCE_COLUMNS
    avg_path = Path(cfg.output_dir) / f"{name}.csv"
    write_csv(avg_path, columns, averaged)
    return {"runs": runs, "averaged": averaged, "path": str(avg_path), "columns": columns}

