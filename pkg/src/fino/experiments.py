"""Toy studies: four-circles coverage, rightward-reward bandit, maze exploration.

Each study runs a noise-injected configuration against its baseline on the
same seeds, so the paired runs share initialisation and minibatch draws.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .envs import FourCircles, PointMaze, RightwardReward, generate_offline_dataset
from .pipeline import RunConfig, finetune_online, pretrain_offline, unique_cells_visited

log = logging.getLogger(__name__)

# the noise schedule / target pair for which the coverage results are stated
THEORY_VARIANT = {"schedule": "quadratic", "target_mode": "exact"}


@dataclass
class StudyResult:
    name: str
    per_seed: list = field(default_factory=list)
    seconds: float = 0.0

    def column(self, key):
        return np.array([row[key] for row in self.per_seed], dtype=float)


def four_circles_config(seed=0, steps=20000, eta=0.1, batch_size=64, **agent) -> RunConfig:
    return RunConfig(env=FourCircles.name, seed=seed, offline_steps=steps, online_steps=0,
                     flow_only=True, log_interval=1000, eval_interval=1000).replace(
        batch_size=batch_size, eta=eta, **{**THEORY_VARIANT, **agent})


def four_circles_study(seeds=range(5), steps=20000, eta=0.1, n_samples=10000, batch_size=64,
                       dataset_size=10000, keep_agents=False) -> StudyResult:
    """Train FM (eta=0) and FINO flows on the four-disk data; compare sample spread."""
    env = FourCircles()
    out = StudyResult("four-circles")
    t0 = time.perf_counter()
    for seed in seeds:
        data = generate_offline_dataset(env, size=dataset_size, seed=seed)
        row = {"seed": seed, "data_mean": data.a.mean(axis=0), "data_var": float(data.a.var(axis=0).sum())}
        for tag, e in (("fm", 0.0), ("fino", eta)):
            res = pretrain_offline(four_circles_config(seed, steps, e, batch_size), data)
            x = res.agent.flow_samples(np.zeros(1), n_samples, np.random.default_rng([seed, 99]))
            row[f"{tag}_var"] = float(x.var(axis=0).sum())
            row[f"{tag}_mean"] = x.mean(axis=0)
            row[f"{tag}_membership"] = float(np.mean(env.disk_index(x) >= 0))
            if keep_agents:
                row[f"{tag}_agent"] = res.agent
                row[f"{tag}_samples"] = x
        log.info("four-circles seed %s: FM var %.4f, FINO var %.4f", seed, row["fm_var"], row["fino_var"])
        out.per_seed.append(row)
    out.seconds = time.perf_counter() - t0
    return out


def rightward_config(seed=0, steps=3000, eta=0.1, batch_size=64, **agent) -> RunConfig:
    return RunConfig(env=RightwardReward.name, seed=seed, offline_steps=steps, online_steps=0,
                     log_interval=1000, eval_interval=1000).replace(
        batch_size=batch_size, eta=eta, **{**THEORY_VARIANT, **agent})


def rightward_study(seeds=range(5), steps=3000, eta=0.1, action_noise_std=0.1, n_samples=10000,
                    batch_size=64, dataset_size=10000, keep_agents=False) -> StudyResult:
    """One-step policies distilled from FM (plus action noise) and from FINO.

    In this single-step bandit the action value is the reward, a_x, so the
    mean Q of emitted actions is their mean first coordinate.
    """
    env = RightwardReward()
    out = StudyResult("rightward")
    t0 = time.perf_counter()
    for seed in seeds:
        data = generate_offline_dataset(env, size=dataset_size, seed=seed)
        row = {"seed": seed, "data_mean_x": float(data.a[:, 0].mean())}
        rng = np.random.default_rng([seed, 77])
        fm = pretrain_offline(rightward_config(seed, steps, 0.0, batch_size), data).agent
        noisy = fm.policy.sample(np.zeros(1), rng, n_samples)
        noisy = np.clip(noisy + action_noise_std * rng.standard_normal(noisy.shape), -1.0, 1.0)
        fino = pretrain_offline(rightward_config(seed, steps, eta, batch_size), data).agent
        acts = fino.policy.sample(np.zeros(1), rng, n_samples)
        row.update(
            fm_policy_mean_x=float(fm.policy.sample(np.zeros(1), rng, n_samples)[:, 0].mean()),
            action_noise_q=float(noisy[:, 0].mean()),
            fino_policy_mean_x=float(acts[:, 0].mean()),
            fino_q=float(acts[:, 0].mean()),
            action_noise_spread=float(noisy.var(axis=0).sum()),
            fino_spread=float(acts.var(axis=0).sum()),
        )
        if keep_agents:
            row.update(fm_agent=fm, fino_agent=fino, fino_actions=acts, noisy_actions=noisy)
        out.per_seed.append(row)
    out.seconds = time.perf_counter() - t0
    return out


def maze_config(seed=0, offline_steps=20000, online_steps=20000, fino=True, batch_size=32,
                **overrides) -> RunConfig:
    base = RunConfig(env=PointMaze.name, seed=seed, offline_steps=offline_steps,
                     online_steps=online_steps, eval_interval=max(online_steps, 1),
                     log_interval=max(online_steps, 1) if online_steps < 1000 else 1000,
                     eval_episodes=20, explore="entropy" if fino else "greedy")
    agent = dict(batch_size=batch_size, hidden=(32, 32), eta=0.1 if fino else 0.0, actions_per_state=50,
                 **THEORY_VARIANT)
    agent.update(overrides)
    return base.replace(**agent)


def maze_study(seeds=range(5), offline_steps=20000, online_steps=20000, batch_size=32,
               dataset_size=10000, **overrides) -> StudyResult:
    """Corridor-A-only data; FINO (noise + entropy sampling) vs eta=0 with greedy picks."""
    env = PointMaze()
    out = StudyResult("point-maze")
    t0 = time.perf_counter()
    for seed in seeds:
        data = generate_offline_dataset(env, size=dataset_size, seed=seed)
        row = {"seed": seed}
        for tag, is_fino in (("fino", True), ("baseline", False)):
            cfg = maze_config(seed, offline_steps, online_steps, is_fino, batch_size, **overrides)
            agent = pretrain_offline(cfg, data).agent
            online = finetune_online(cfg, agent, data, env)
            final = [m for m in online.metrics if m.phase == "eval"][-1]
            row[f"{tag}_cells"] = unique_cells_visited(online.visits)
            row[f"{tag}_success"] = final.success
            row[f"{tag}_visits"] = online.visits
            row[f"{tag}_xi_trace"] = online.xi_trace
            log.info("maze seed %s %s: cells %d success %.2f", seed, tag, row[f"{tag}_cells"], final.success)
        out.per_seed.append(row)
    out.seconds = time.perf_counter() - t0
    return out
