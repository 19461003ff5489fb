"""Experiment configuration, seeded multi-run execution, and persistence.

A run is reproducible from (config, seed) alone: the config is hashed, every
output file records the hash and tool version, and all randomness flows from
the per-seed root through named streams. Per-seed outputs are a checkpoint
metrics CSV, the final Q-table, and optionally a full transition trace as
JSON lines; an aggregate CSV collects mean/std across seeds per checkpoint.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .environments import EnvBundle, env_from_config
from .exploration import ExplorationStrategy, strategy_from_config, validate_nglie
from .interruption import (
    InterruptionScheme,
    ThetaSchedule,
    test_dynamic_safe_interruptibility,
    verify_infinite_exploration,
)
from .learning import LearningRateSchedule, TrainCheckpoint, train
from .mdp import ObservationChannel, TabularMdp
from .operators import solve_fixed_point
from .qtable import QTable
from .safety import (
    SafetyThresholds,
    VirtuousSafetyReport,
    identify_unsafe_actions,
    limit_policy,
    resilience_sweep,
    safe_exploration_report,
    virtuous_safety_report,
)

OUT_ENV_VAR = "VSRL_OUT"

METRIC_COLUMNS = (
    "step",
    "sup_norm_distance",
    "psi",
    "theta_mean",
    "return_mean",
    "hazard_entries",
    "trap_steps",
    "escape_latency_median",
    "interruption_compliance",
)


class ConfigError(ValueError):
    """A config field failed validation; the message carries the field path."""


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf8")).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    doc: dict
    env_doc: dict
    algorithm: str
    strategy_doc: dict
    scheme_doc: object  # "env" | None | dict
    learning_rate: LearningRateSchedule
    episodes: int
    horizon: int
    seeds: tuple[int, ...]
    checkpoint_every: int
    trace: str
    q0: float
    out_dir: str | None

    @property
    def hash(self) -> str:
        return config_hash(self.doc)


def parse_experiment_config(doc: dict) -> ExperimentConfig:
    def require(key, path=""):
        if key not in doc:
            raise ConfigError(f"{path or key}: required field is missing")
        return doc[key]

    env_doc = require("env")
    if not isinstance(env_doc, dict):
        raise ConfigError("env: must be a mapping with an env name")
    algorithm = require("algorithm")
    if algorithm not in ("q_learning", "sarsa0", "safe_sarsa0"):
        raise ConfigError(f"algorithm: unknown value {algorithm!r}")
    strategy_doc = require("strategy")
    if not isinstance(strategy_doc, dict):
        raise ConfigError("strategy: must be a mapping")
    scheme_doc = doc.get("scheme")
    if scheme_doc not in (None, "env") and not isinstance(scheme_doc, dict):
        raise ConfigError('scheme: must be null, "env", or a mapping')
    lr_doc = doc.get("learning_rate", {})
    try:
        lr = LearningRateSchedule(
            exponent=float(lr_doc.get("exponent", 0.8)),
            scale=float(lr_doc.get("scale", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"learning_rate: {exc}") from None
    episodes = int(doc.get("episodes", 1))
    horizon = int(require("horizon"))
    if horizon < 1:
        raise ConfigError("horizon: must be at least 1")
    seeds = tuple(int(s) for s in require("seeds"))
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    checkpoint_every = int(doc.get("checkpoint_every", max(1, horizon // 10)))
    if checkpoint_every < 1:
        raise ConfigError("checkpoint_every: must be at least 1")
    trace = doc.get("trace", "none")
    if trace not in ("none", "full"):
        raise ConfigError(f'trace: expected "none" or "full", got {trace!r}')
    return ExperimentConfig(
        doc=doc,
        env_doc=env_doc,
        algorithm=algorithm,
        strategy_doc=strategy_doc,
        scheme_doc=scheme_doc,
        learning_rate=lr,
        episodes=episodes,
        horizon=horizon,
        seeds=seeds,
        checkpoint_every=checkpoint_every,
        trace=trace,
        q0=float(doc.get("q0", 0.0)),
        out_dir=doc.get("out"),
    )


def scheme_from_config(doc: dict, num_observations: int, num_actions: int) -> InterruptionScheme:
    init_doc = doc.get("initiation")
    if not isinstance(init_doc, dict):
        raise ConfigError("scheme.initiation: must be a mapping")
    initiation = np.zeros(num_observations)
    if "observations" in init_doc:
        for o in init_doc["observations"]:
            if not 0 <= int(o) < num_observations:
                raise ConfigError(f"scheme.initiation.observations: index {o} out of range")
            initiation[int(o)] = 1.0
    elif "values" in init_doc:
        vals = init_doc["values"]
        if len(vals) != num_observations:
            raise ConfigError("scheme.initiation.values: need one value per observation")
        initiation = np.asarray(vals, dtype=np.float64)
    else:
        raise ConfigError("scheme.initiation: need 'observations' or 'values'")
    theta_doc = doc.get("theta", {})
    try:
        theta = ThetaSchedule(
            family=theta_doc.get("family", "sqrt"),
            c_prime=float(theta_doc.get("c_prime", 1.0)),
            value=float(theta_doc.get("value", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"scheme.theta: {exc}") from None
    pi_doc = doc.get("pi_int")
    if not isinstance(pi_doc, dict):
        raise ConfigError("scheme.pi_int: must be a mapping")
    if "action" in pi_doc:
        a = int(pi_doc["action"])
        if not 0 <= a < num_actions:
            raise ConfigError(f"scheme.pi_int.action: index {a} out of range")
        pi = np.zeros((num_observations, num_actions))
        pi[:, a] = 1.0
    elif "rows" in pi_doc:
        pi = np.asarray(pi_doc["rows"], dtype=np.float64)
        if pi.shape != (num_observations, num_actions):
            raise ConfigError("scheme.pi_int.rows: wrong shape")
    else:
        raise ConfigError("scheme.pi_int: need 'action' or 'rows'")
    try:
        return InterruptionScheme(initiation=initiation, theta_schedule=theta,
                                  interruption_policy=pi)
    except ValueError as exc:
        raise ConfigError(f"scheme: {exc}") from None


def resolve_scheme(config: ExperimentConfig, env: EnvBundle) -> InterruptionScheme | None:
    if config.scheme_doc is None:
        return None
    if config.scheme_doc == "env":
        if env.scheme is None:
            raise ConfigError('scheme: "env" requested but the environment attaches none')
        return env.scheme
    return scheme_from_config(config.scheme_doc, env.channel.num_observations,
                              env.mdp.num_actions)


# ---------------------------------------------------------------------------
# Oracle projection and metric collection
# ---------------------------------------------------------------------------

def project_to_observations(state_values: np.ndarray, channel: ObservationChannel,
                            tol: float = 1e-7) -> np.ndarray:
    """Collapse a state-indexed Q onto observations via the susceptible map.

    States sharing an observation must agree (the twin loop states do, by
    symmetry of their rows); disagreement beyond ``tol`` is an error.
    """
    obs_map = channel.observation_of
    num_obs = channel.num_observations
    out = np.zeros((num_obs, state_values.shape[1]))
    seen = np.zeros(num_obs, dtype=bool)
    for s, o in enumerate(obs_map):
        if not seen[o]:
            out[o] = state_values[s]
            seen[o] = True
        elif np.abs(out[o] - state_values[s]).max() > tol:
            raise ValueError(
                f"states sharing observation {o} disagree by "
                f"{np.abs(out[o] - state_values[s]).max():g}"
            )
    if not seen.all():
        raise ValueError("some observations are emitted by no state")
    return out


class EnvMetricsCollector:
    """Per-transition counters: hazard entries, post-infection trap behavior,
    escape latencies, and interruption compliance."""

    def __init__(self, env: EnvBundle):
        self.hazard_states = frozenset()
        self.trap_state = None
        self.recover_states = frozenset()
        self.infection_time = env.channel.infection_time
        if env.name == "cliff":
            self.hazard_states = env.meta.cliff_states
        elif env.name == "three_state":
            self.trap_state = env.meta.state_z
            self.recover_states = frozenset(
                (env.meta.state_y_uninformed, env.meta.state_y_informed)
            )
        self.hazard_entries = 0
        self.trap_steps = 0
        self.escape_latencies: list[int] = []
        self._since_trap_entry = None
        self.rewards_since_mark = 0.0
        self.steps_since_mark = 0
        self.post_infection_reward = 0.0
        self.post_infection_steps = 0

    def __call__(self, tr) -> None:
        self.rewards_since_mark += tr.reward
        self.steps_since_mark += 1
        if tr.next_state in self.hazard_states:
            self.hazard_entries += 1
        infected = self.infection_time is not None and tr.time >= self.infection_time
        if infected:
            self.post_infection_reward += tr.reward
            self.post_infection_steps += 1
            if tr.state == self.trap_state:
                self.trap_steps += 1
            if self._since_trap_entry is None:
                if tr.next_state == self.trap_state:
                    self._since_trap_entry = 0
            else:
                self._since_trap_entry += 1
                if tr.next_state in self.recover_states:
                    self.escape_latencies.append(self._since_trap_entry)
                    self._since_trap_entry = None

    def mark(self) -> tuple[float, int]:
        out = (self.rewards_since_mark, self.steps_since_mark)
        self.rewards_since_mark = 0.0
        self.steps_since_mark = 0
        return out


def _checkpoint_row(cp: TrainCheckpoint, oracle_obs: np.ndarray,
                    strategy: ExplorationStrategy,
                    scheme: InterruptionScheme | None,
                    collector: EnvMetricsCollector,
                    interruptible: np.ndarray | None) -> dict:
    distance = float(np.abs(cp.values - oracle_obs).max())
    min_count = int(cp.obs_counts.min())
    psi = strategy.psi(max(1, min_count))
    theta_mean = ""
    if scheme is not None and interruptible is not None and interruptible.any():
        thetas = [
            scheme.theta_at(max(1, int(cp.obs_counts[o])))
            for o in np.flatnonzero(interruptible)
        ]
        theta_mean = sum(thetas) / len(thetas)
    rewards, steps = collector.mark()
    return {
        "step": cp.step,
        "sup_norm_distance": distance,
        "psi": psi,
        "theta_mean": theta_mean,
        "return_mean": rewards / steps if steps else "",
        "hazard_entries": collector.hazard_entries,
        "trap_steps": collector.trap_steps,
        "escape_latency_median": (
            statistics.median(collector.escape_latencies) if collector.escape_latencies else ""
        ),
        "interruption_compliance": "",
    }


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


# ---------------------------------------------------------------------------
# Running experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedRunOutput:
    seed: int
    metrics_rows: tuple[dict, ...]
    qtable_path: str
    metrics_path: str


def _run_seed(doc: dict, seed: int, run_dir: str) -> SeedRunOutput:
    config = parse_experiment_config(doc)
    env = env_from_config(config.env_doc)
    strategy = strategy_from_config(config.strategy_doc, env.mdp.num_actions)
    scheme = resolve_scheme(config, env)
    oracle = solve_fixed_point(env.mdp, strategy.limit_operator_spec())
    oracle_obs = project_to_observations(oracle.q.values, env.channel)

    collector = EnvMetricsCollector(env)
    interruptible = scheme.initiation > 0 if scheme is not None else None
    rows: list[dict] = []

    def hook(cp: TrainCheckpoint):
        rows.append(_checkpoint_row(cp, oracle_obs, strategy, scheme, collector, interruptible))
        return cp.values

    # Episodic runs stop at the goal; a single-episode run is a continuous
    # walk for the full horizon (the goal recycles inside the dynamics).
    end_states = None
    if env.name == "cliff" and config.episodes > 1:
        end_states = frozenset([env.meta.goal_state])
    result = train(
        env.mdp, env.channel, strategy, scheme, config.algorithm, config.learning_rate,
        episodes=config.episodes, horizon=config.horizon, seed=seed, q0=config.q0,
        episode_end_states=end_states,
        record_trace=(config.trace == "full"),
        checkpoint_every=config.checkpoint_every,
        checkpoint_hook=hook,
        on_transition=collector,
    )
    visits = result.interruptible_visits
    for row in rows:
        row["interruption_compliance"] = (
            result.interrupted_steps / visits if visits else ""
        )

    seed_dir = Path(run_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    chash = config.hash
    metrics_path = seed_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", "version", "seed", *METRIC_COLUMNS])
        for row in rows:
            writer.writerow([chash, __version__, seed] + [_fmt(row[c]) for c in METRIC_COLUMNS])
    qtable_path = seed_dir / "qtable.csv"
    result.q.to_csv(qtable_path)
    if config.trace == "full":
        with open(seed_dir / "trace.jsonl", "w") as fh:
            fh.write(json.dumps({"config_hash": chash, "version": __version__, "seed": seed}) + "\n")
            for tr in result.trace:
                fh.write(json.dumps({
                    "t": tr.time, "s": tr.state, "o": tr.observation, "a": tr.action,
                    "r": tr.reward, "s2": tr.next_state, "o2": tr.next_observation,
                    "int": tr.interrupted,
                }) + "\n")
    return SeedRunOutput(
        seed=seed,
        metrics_rows=tuple(rows),
        qtable_path=str(qtable_path),
        metrics_path=str(metrics_path),
    )


@dataclass(frozen=True)
class RunOutput:
    run_dir: str
    seed_outputs: tuple[SeedRunOutput, ...]
    aggregate_path: str
    oracle_path: str


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


def run_experiment(config: ExperimentConfig, parallelism: int = 1,
                   out_dir: str | Path | None = None) -> RunOutput:
    """One training run per seed plus the cached fixed-point oracle and the
    cross-seed aggregate; rerunning with the same config and seeds is
    byte-identical."""
    env = env_from_config(config.env_doc)
    strategy = strategy_from_config(config.strategy_doc, env.mdp.num_actions)
    resolve_scheme(config, env)  # validate early

    run_dir = Path(out_dir or config.out_dir or default_out_root() / f"run-{config.hash}")
    run_dir.mkdir(parents=True, exist_ok=True)

    oracle = solve_fixed_point(env.mdp, strategy.limit_operator_spec())
    oracle_path = run_dir / "oracle_q.csv"
    oracle.q.to_csv(oracle_path)

    if parallelism > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_seed, config.doc, s, str(run_dir)) for s in config.seeds]
            outputs = [f.result() for f in futures]
    else:
        outputs = [_run_seed(config.doc, s, str(run_dir)) for s in config.seeds]

    aggregate_path = run_dir / "aggregate.csv"
    _write_aggregate(aggregate_path, config, outputs)

    meta = {
        "config": config.doc,
        "config_hash": config.hash,
        "version": __version__,
        "seeds": list(config.seeds),
        "oracle": {
            "path": oracle_path.name,
            "iterations": oracle.iterations,
            "residual": oracle.residual,
            "error_bound": oracle.error_bound,
        },
    }
    (run_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return RunOutput(
        run_dir=str(run_dir),
        seed_outputs=tuple(outputs),
        aggregate_path=str(aggregate_path),
        oracle_path=str(oracle_path),
    )


def _write_aggregate(path: Path, config: ExperimentConfig,
                     outputs: list[SeedRunOutput]) -> None:
    by_step: dict[int, list[dict]] = {}
    for out in outputs:
        for row in out.metrics_rows:
            by_step.setdefault(row["step"], []).append(row)
    numeric = [c for c in METRIC_COLUMNS if c != "step"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["config_hash", "version", "step", "num_seeds"]
        for c in numeric:
            header += [f"{c}_mean", f"{c}_std"]
        writer.writerow(header)
        for step in sorted(by_step):
            rows = by_step[step]
            record = [config.hash, __version__, step, len(rows)]
            for c in numeric:
                vals = [r[c] for r in rows if isinstance(r[c], (int, float))]
                if vals:
                    mean = sum(vals) / len(vals)
                    std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
                    record += [_fmt(float(mean)), _fmt(float(std))]
                else:
                    record += ["", ""]
            writer.writerow(record)


# ---------------------------------------------------------------------------
# The end-to-end safety checklist
# ---------------------------------------------------------------------------

DEFAULT_OMEGA_GRID = (0.01, 1.0, 10.0, 100.0)
DEFAULT_RESHAPE_GRID = tuple(np.linspace(0.0, 1.0, 11))


def assemble_virtuous_report(
    config: ExperimentConfig,
    *,
    reward_threshold: float,
    nglie_horizon: int = 100_000,
    psi_tol: float = 0.01,
    dsi_trials: int = 10_000,
    dsi_contexts: int = 20,
    dsi_train_steps: int = 30_000,
    dsi_seed: int | None = None,
    trained_q: QTable | None = None,
) -> VirtuousSafetyReport:
    """Run every analysis the checklist needs for one configuration.

    The exploration validation gates the rest: configurations whose declared
    limiting operator fails the non-expansion check are reported immediately.
    ``trained_q`` reuses an existing training run; otherwise the first seed is
    trained here.
    """
    env = env_from_config(config.env_doc)
    strategy = strategy_from_config(config.strategy_doc, env.mdp.num_actions)
    scheme = resolve_scheme(config, env)
    declared_psi = strategy.psi_limit()

    nglie = validate_nglie(strategy, nglie_horizon, declared_psi, tol=psi_tol)
    if scheme is not None and nglie.passed:
        infinite = verify_infinite_exploration(scheme, strategy, min(nglie_horizon, 100_000))
        if not infinite.divergent:
            from .exploration import RequirementCheck

            nglie = type(nglie)(
                infinite_exploration=RequirementCheck(False, infinite.detail),
                non_expansion=nglie.non_expansion,
                psi_limit=nglie.psi_limit,
                psi_bounded=nglie.psi_bounded,
            )
    if not nglie.passed:
        return virtuous_safety_report(declared_psi_inf=declared_psi, nglie_report=nglie)

    oracle = solve_fixed_point(env.mdp, strategy.limit_operator_spec())
    oracle_obs = project_to_observations(oracle.q.values, env.channel)

    if trained_q is None:
        end_states = None
        if env.name == "cliff" and config.episodes > 1:
            end_states = frozenset([env.meta.goal_state])
        result = train(
            env.mdp, env.channel, strategy, scheme, config.algorithm, config.learning_rate,
            episodes=config.episodes, horizon=config.horizon, seed=config.seeds[0],
            q0=config.q0, episode_end_states=end_states,
        )
        trained_q = result.q
    q_distance = float(np.abs(trained_q.values - oracle_obs).max())
    gamma = env.mdp.discount
    distance_threshold = 0.05 * (env.mdp.r_max - env.mdp.r_min) / (1.0 - gamma)

    psi_at_horizon = strategy.psi(max(1, config.horizon))

    family = strategy.kind
    mu = declared_psi / (env.mdp.num_actions - 1)
    grid = DEFAULT_OMEGA_GRID if family in ("rrr_mellowmax", "mellowmax") else DEFAULT_RESHAPE_GRID
    resilience = resilience_sweep(family, mu, grid, env.mdp.num_actions)

    thresholds = SafetyThresholds.from_reward_threshold(reward_threshold)
    unsafe = identify_unsafe_actions(oracle_obs, thresholds)
    pi_limit = limit_policy(strategy, oracle_obs)
    exploration_safety = safe_exploration_report(pi_limit, unsafe, thresholds)

    if scheme is None:
        raise ConfigError("scheme: the safety checklist needs an interruption scheme")
    dsi = test_dynamic_safe_interruptibility(
        config.algorithm, env.mdp, env.channel, strategy, scheme,
        trials=dsi_trials, seed=dsi_seed if dsi_seed is not None else config.seeds[0],
        num_contexts=dsi_contexts, train_steps=dsi_train_steps, lr=config.learning_rate,
    )

    return virtuous_safety_report(
        declared_psi_inf=declared_psi,
        nglie_report=nglie,
        psi_at_horizon=psi_at_horizon,
        resilience=resilience,
        exploration_safety=exploration_safety,
        dsi_result=dsi,
        q_distance=q_distance,
        distance_threshold=distance_threshold,
        psi_tol=psi_tol,
    )
