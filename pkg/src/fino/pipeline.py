"""Offline pre-training, online fine-tuning and evaluation loops."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentConfig, FinoAgent, select_action_eval, update_temperature
from .entropy import EmConfig, estimate_policy_entropy
from .envs import Dataset, Environment, PointMaze, ReplayBuffer, generate_offline_dataset, make_env, sample_dataset
from .nn import ContractError, NonFiniteLossError

log = logging.getLogger(__name__)

EXPLORE_MODES = ("entropy", "greedy", "action-noise")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, phase: str, cause: Exception):
        super().__init__(f"{phase} training failed at step {step}: {cause}")
        self.step = step
        self.phase = phase


@dataclass
class RunConfig:
    env: str = "point-maze"
    seed: int = 0
    offline_steps: int = 20000
    online_steps: int = 20000
    eval_interval: int = 2000
    eval_episodes: int = 20
    log_interval: int = 1000
    dataset_size: int = 10000
    dataset: str = ""  # path; generated from env + seed when empty
    explore: str = "entropy"
    action_noise_std: float = 0.1
    visit_resolution: int = 4  # histogram bins per maze cell
    em_iterations: int = 100
    flow_only: bool = False  # offline phase trains only the flow model
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.offline_steps < 0 or self.online_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if min(self.eval_interval, self.eval_episodes, self.log_interval) < 1:
            raise ConfigError("eval_interval, eval_episodes and log_interval must be positive")
        if self.eval_interval % self.log_interval:
            raise ConfigError("log_interval must divide eval_interval")
        if self.explore not in EXPLORE_MODES:
            raise ConfigError(f"explore must be one of {EXPLORE_MODES}")

    def replace(self, **changes) -> "RunConfig":
        """Copy with changes; AgentConfig keys may be given at top level."""
        agent_keys = {f.name for f in dataclasses.fields(AgentConfig)}
        agent_changes = {k: changes.pop(k) for k in list(changes) if k in agent_keys}
        agent = dataclasses.replace(self.agent, **agent_changes)
        return dataclasses.replace(self, agent=agent, **changes)


def _coerce(value: str, typ, key):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.strip().lower() in ("none", ""):
            return None
        return _coerce(value, args[0], key)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple or origin is tuple:
            return tuple(int(v) for v in value.replace(",", " ").split())
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines (``#`` comments) into a RunConfig.

    Agent hyperparameters sit in the same flat namespace as run keys.
    Unknown keys are rejected.
    """
    run_types = {k: v for k, v in _field_types(RunConfig).items() if k != "agent"}
    agent_types = _field_types(AgentConfig)
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        typ = run_types.get(key, agent_types.get(key))
        if typ is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(value, typ, key)
    try:
        return (base or RunConfig()).replace(**changes)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(), base)


def format_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        if f.name != "agent":
            lines.append(f"{f.name} = {getattr(config, f.name)}")
    for f in dataclasses.fields(AgentConfig):
        v = getattr(config.agent, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


METRIC_FIELDS = ("step", "phase", "loss_q", "loss_flow", "loss_pi", "entropy", "xi", "return", "success")


@dataclass
class MetricsRecord:
    step: int
    phase: str
    loss_q: float | None = None
    loss_flow: float | None = None
    loss_pi: float | None = None
    entropy: float | None = None
    xi: float | None = None
    mean_return: float | None = None
    success: float | None = None
    wall_clock: float = 0.0

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in METRIC_FIELDS if k != "return"}
        row["return"] = self.mean_return
        return {k: row[k] for k in METRIC_FIELDS}


def write_metrics(records, path) -> None:
    """One JSON object per line; wall-clock time is left out so reruns match byte for byte."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.as_row(), sort_keys=False) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def load_dataset(config: RunConfig, env: Environment | None = None) -> Dataset:
    if config.dataset:
        p = Path(config.dataset)
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {config.dataset}")
        return Dataset.load(p)
    env = env or make_env(config.env)
    return generate_offline_dataset(env, size=config.dataset_size, seed=config.seed)


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    returns: list


def evaluate(agent, env: Environment, episodes: int, seed: int) -> EvalResult:
    """Run ``episodes`` deterministic-selection episodes; success = a positive reward was collected."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    rng = np.random.default_rng([seed, 7919])
    returns, successes = [], []
    for ep in range(episodes):
        s = env.reset(seed + ep)
        total, done, success = 0.0, False, False
        while not done:
            s, r, done = env.step(agent.act_eval(s, rng))
            total += r
            success = success or r > 0
        returns.append(total)
        successes.append(float(success))
    return EvalResult(float(np.mean(returns)), float(np.mean(successes)), returns)


class ScriptedMazeAgent:
    """Follows corridor A; the reference oracle for maze evaluation."""

    def __init__(self, env: PointMaze):
        self.env = env

    def act_eval(self, s, rng):
        return self.env.scripted_action(s)


@dataclass
class RunResult:
    agent: FinoAgent
    metrics: list
    visits: np.ndarray | None = None
    xi_trace: list = field(default_factory=list)  # (step, xi_before, entropy, xi_after)
    buffer: ReplayBuffer | None = None


def new_agent(config: RunConfig, state_dim: int, action_dim: int) -> FinoAgent:
    return FinoAgent(state_dim, action_dim, config.agent, seed=config.seed)


def pretrain_offline(config: RunConfig, dataset: Dataset | None = None,
                     agent: FinoAgent | None = None) -> RunResult:
    """Offline loop: one critic, flow and one-step policy update per step."""
    dataset = dataset if dataset is not None else load_dataset(config)
    if len(dataset) == 0:
        raise ConfigError("empty offline dataset")
    agent = agent or new_agent(config, dataset.state_dim, dataset.action_dim)
    rng = np.random.default_rng([config.seed, 1])
    metrics = []
    t0 = time.perf_counter()
    for step in range(1, config.offline_steps + 1):
        batch = sample_dataset(dataset, config.agent.batch_size, rng)
        try:
            if config.flow_only:
                losses = {"loss_flow": agent.update_flow(batch, rng)}
            else:
                losses = agent.update(batch, rng)
        except (NonFiniteLossError, FloatingPointError) as exc:
            raise TrainingError(step, "offline", exc) from exc
        if step % config.log_interval == 0 or step == config.offline_steps:
            metrics.append(MetricsRecord(step, "offline", **losses, xi=agent.sampler.xi,
                                         wall_clock=time.perf_counter() - t0))
            log.debug("offline step %d %s", step, losses)
    return RunResult(agent, metrics)


def _visit_index(env, pos, res):
    return int(np.floor(pos[0] * res)), int(np.floor(pos[1] * res))


def finetune_online(config: RunConfig, agent: FinoAgent, dataset: Dataset | None = None,
                    env: Environment | None = None) -> RunResult:
    """Online loop with candidate sampling, replay and periodic temperature updates."""
    env = env or make_env(config.env)
    dataset = dataset if dataset is not None else load_dataset(config, env)
    cfg = agent.config
    buffer = ReplayBuffer(len(dataset) + max(config.online_steps, 1), dataset.state_dim, dataset.action_dim)
    buffer.extend(dataset)
    rng = np.random.default_rng([config.seed, 2])
    em_config = EmConfig(max_iterations=config.em_iterations, seed=config.seed)
    is_maze = isinstance(env, PointMaze)
    res = config.visit_resolution
    visits = np.zeros((env.height * res, env.width * res), dtype=np.int64) if is_maze else None

    metrics, xi_trace = [], []
    t0 = time.perf_counter()
    ev = evaluate(agent, env, config.eval_episodes, config.seed + 10_000)
    metrics.append(MetricsRecord(0, "eval", xi=agent.sampler.xi, mean_return=ev.mean_return,
                                 success=ev.success_rate, wall_clock=0.0))
    s = env.reset(config.seed)
    episode = 0
    for step in range(1, config.online_steps + 1):
        if config.explore == "entropy":
            a = agent.act_explore(s, rng)
        else:
            a = select_action_eval(agent.policy, agent.critic, s, agent.sampler.n_sample, rng)
            if config.explore == "action-noise":
                a = np.clip(a + config.action_noise_std * rng.standard_normal(a.shape), -1.0, 1.0)
        s2, r, done = env.step(a)
        terminal = float(r > 0) if is_maze else float(done)
        buffer.push(s, a, r, s2, terminal)
        if visits is not None:
            ix, iy = _visit_index(env, s2, res)
            visits[iy, ix] += 1
        if done:
            episode += 1
            s = env.reset(config.seed + episode)
        else:
            s = s2

        batch = buffer.sample(cfg.batch_size, rng)
        try:
            losses = agent.update(batch, rng)
        except (NonFiniteLossError, FloatingPointError) as exc:
            raise TrainingError(step, "online", exc) from exc

        entropy = None
        if config.explore == "entropy" and step % agent.controller.interval == 0:
            entropy = estimate_policy_entropy(agent.policy, batch["s"], cfg.actions_per_state,
                                              cfg.gmm_components, em_config, rng)
            before = agent.sampler.xi
            agent.sampler.xi = update_temperature(before, entropy, agent.controller)
            xi_trace.append((step, before, entropy, agent.sampler.xi))
        if step % config.log_interval == 0 or entropy is not None:
            metrics.append(MetricsRecord(step, "online", **losses, entropy=entropy, xi=agent.sampler.xi,
                                         wall_clock=time.perf_counter() - t0))
        if step % config.eval_interval == 0:
            ev = evaluate(agent, env, config.eval_episodes, config.seed + 10_000)
            metrics.append(MetricsRecord(step, "eval", xi=agent.sampler.xi, mean_return=ev.mean_return,
                                         success=ev.success_rate, wall_clock=time.perf_counter() - t0))
            log.info("online step %d success %.2f return %.3f xi %.4f", step, ev.success_rate,
                     ev.mean_return, agent.sampler.xi)
    return RunResult(agent, metrics, visits, xi_trace, buffer)


def unique_cells_visited(visits) -> int:
    return int(np.count_nonzero(visits))


def run(config: RunConfig) -> tuple[RunResult, RunResult]:
    """Full pipeline for one seed: pre-train then fine-tune."""
    env = make_env(config.env)
    dataset = load_dataset(config, env)
    offline = pretrain_offline(config, dataset)
    online = finetune_online(config, offline.agent, dataset, env)
    return offline, online
