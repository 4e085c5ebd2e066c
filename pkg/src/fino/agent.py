"""Actor-critic around the flow policy: TD learning, one-step distillation,
Q-softmax candidate sampling and entropy-driven temperature control."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .flow import (
    FlowBatch,
    NoiseSchedule,
    ScheduleVariant,
    TargetMode,
    VectorFieldNet,
    fino_loss,
    sample_action,
)
from .nn import (
    AdamState,
    ContractError,
    DenseNet,
    GradientBundle,
    NonFiniteLossError,
    adam_step,
    from_bytes,
    polyak_update,
    to_bytes,
)


def default_n_sample(action_dim: int) -> int:
    # floor of 4 keeps the sampler meaningful for low-dimensional toys
    return max(4, math.ceil(action_dim / 2))


@dataclass
class AgentConfig:
    alpha: float = 1.0  # BC coefficient in the distillation loss
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    learning_rate: float = 3e-4
    hidden: tuple = (64, 64)
    flow_steps: int = 10
    eta: float = 0.1
    schedule: str = ScheduleVariant.SHIFTED_EXPONENTIAL.value
    target_mode: str = TargetMode.PLAIN.value
    use_min_of_two: bool = False
    n_sample: int | None = None
    xi_init: float = 1.0
    xi_lr: float = 0.01
    entropy_interval: int = 2000
    target_entropy: float | None = None
    gmm_components: int = 3
    actions_per_state: int = 200

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ContractError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.flow_steps < 1 or self.entropy_interval < 1:
            raise ContractError("batch_size, flow_steps and entropy_interval must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(eta=self.eta, variant=ScheduleVariant(self.schedule))


class Critic:
    """One or two Q-nets over [s, a] with Polyak-averaged target copies."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), use_min_of_two=False,
                 seed=0, learning_rate=3e-4, nets=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.use_min_of_two = bool(use_min_of_two)
        if nets is None:
            rng = np.random.default_rng(seed)
            n = 2 if use_min_of_two else 1
            nets = [DenseNet([state_dim + action_dim, *hidden, 1], rng=rng) for _ in range(n)]
        self.nets = list(nets)
        self.targets = [n.copy() for n in self.nets]
        self.optims = [AdamState.for_net(n, learning_rate) for n in self.nets]

    def _inputs(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if s.shape[0] == 1 and a.shape[0] > 1:
            s = np.broadcast_to(s, (a.shape[0], s.shape[1]))
        return np.concatenate([s, a], axis=1)

    def all_q(self, s, a, target=False):
        x = self._inputs(s, a)
        nets = self.targets if target else self.nets
        return np.stack([n.forward(x)[:, 0] for n in nets])

    def q(self, s, a, target=False):
        """Scalar value per row; min over the pair when use_min_of_two is set."""
        qs = self.all_q(s, a, target)
        return qs.min(axis=0) if self.use_min_of_two else qs[0]

    def action_grad(self, s, a):
        """Mean of the online Q-nets and its gradient w.r.t. the action."""
        x = self._inputs(s, a)
        qs, dq = [], np.zeros_like(x)
        for n in self.nets:
            out, cache = n.forward_cached(x)
            _, dx = n.backward(cache, np.full_like(out, 1.0 / len(self.nets)))
            qs.append(out[:, 0])
            dq += dx
        return np.mean(qs, axis=0), dq[:, self.state_dim:]

    def copy(self) -> "Critic":
        new = Critic(self.state_dim, self.action_dim, use_min_of_two=self.use_min_of_two,
                     nets=[n.copy() for n in self.nets])
        new.targets = [t.copy() for t in self.targets]
        return new


class OneStepPolicy:
    """a = tanh(net([s, z])): a direct noise-to-action map inside the unit box."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), seed=0, net=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.net = net if net is not None else DenseNet(
            [state_dim + action_dim, *hidden, action_dim], seed=seed)

    def inputs(self, s, z):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if s.shape[0] == 1 and z.shape[0] > 1:
            s = np.broadcast_to(s, (z.shape[0], s.shape[1]))
        return np.concatenate([s, z], axis=1)

    def __call__(self, s, z):
        return np.tanh(self.net.forward(self.inputs(s, z)))

    def sample(self, s, rng, n=None):
        s = np.atleast_2d(s)
        rows = s.shape[0] if n is None else n
        return self(s, rng.standard_normal((rows, self.action_dim)))


@dataclass
class SamplerState:
    xi: float = 1.0
    n_sample: int = 4

    def __post_init__(self):
        if self.n_sample < 1:
            raise ContractError("n_sample must be >= 1")


@dataclass
class EntropyController:
    target_entropy: float
    lr: float = 0.01
    interval: int = 2000

    def __post_init__(self):
        if self.interval < 1:
            raise ContractError("entropy update interval must be >= 1")


# -- losses -----------------------------------------------------------------

def td_target(critic: Critic, batch, policy: OneStepPolicy, gamma: float, next_z):
    """r + gamma * (1 - done) * Qbar(s', a'), a' from the policy with ``next_z``."""
    r = np.asarray(batch["r"], dtype=np.float64)
    done = np.asarray(batch["done"], dtype=np.float64)
    if np.all(done == 1.0) or gamma == 0.0:
        y = r.copy()
    else:
        a_next = policy(batch["s2"], next_z)
        y = r + gamma * (1.0 - done) * critic.q(batch["s2"], a_next, target=True)
    if not np.all(np.isfinite(y)):
        raise NonFiniteLossError("non-finite TD target", int(np.argmax(~np.isfinite(y))))
    return y


def td_loss(critic: Critic, batch, policy: OneStepPolicy, gamma: float, next_z) -> list[GradientBundle]:
    """Mean squared TD error for each online Q-net (one bundle per net)."""
    y = td_target(critic, batch, policy, gamma, next_z)
    x = critic._inputs(batch["s"], batch["a"])
    n = len(y)
    bundles = []
    for net in critic.nets:
        out, cache = net.forward_cached(x)
        resid = out[:, 0] - y
        loss = float(np.mean(resid * resid))
        grads, _ = net.backward(cache, (2.0 * resid / n)[:, None], need_input_grad=False)
        bundles.append(GradientBundle(grads, loss))
    return bundles


def td_update(critic: Critic, batch, policy: OneStepPolicy, config: AgentConfig, rng) -> float:
    """One critic gradient step followed by a Polyak target update."""
    a = np.asarray(batch["a"])
    if len(a) == 0:
        raise ContractError("empty batch")
    if np.any(np.abs(a) > 1.0 + 1e-9):
        raise ContractError("batch actions outside [-1, 1]")
    next_z = rng.standard_normal((len(a), critic.action_dim))
    bundles = td_loss(critic, batch, policy, config.gamma, next_z)
    for net, opt, b, tgt in zip(critic.nets, critic.optims, bundles, critic.targets):
        adam_step(net, opt, b)
        polyak_update(tgt, net, config.tau)
    return float(np.mean([b.loss for b in bundles]))


def distill_loss(policy: OneStepPolicy, flow: VectorFieldNet | None, critic: Critic, states, z,
                 alpha: float, flow_steps: int = 10, flow_actions=None) -> GradientBundle:
    """Value maximisation plus distillation towards the flow policy.

    Per sample: ``-Q(s, a_w) + alpha * ||a_w - a_theta||^2`` with the same
    ``z`` feeding the one-step policy and the Euler-integrated flow. Only the
    policy receives gradients. ``flow_actions`` overrides the flow sample.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if flow_actions is None:
        flow_actions = sample_action(flow, states, z, flow_steps)
    flow_actions = np.atleast_2d(flow_actions)
    x = policy.inputs(states, z)
    pre, cache = policy.net.forward_cached(x)
    a = np.tanh(pre)
    q, dq_da = critic.action_grad(states, a)
    diff = a - flow_actions
    n = len(a)
    per_sample = -q + alpha * np.sum(diff * diff, axis=1)
    loss = float(np.mean(per_sample))
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite distillation loss", int(np.argmax(~np.isfinite(per_sample))))
    d_a = (-dq_da + 2.0 * alpha * diff) / n
    grads, _ = policy.net.backward(cache, d_a * (1.0 - a * a), need_input_grad=False)
    return GradientBundle(grads, loss)


# -- action selection ---------------------------------------------------------

def candidate_actions(policy: OneStepPolicy, s, n: int, rng):
    if n < 1:
        raise ContractError("n must be >= 1")
    return policy(np.atleast_2d(s), rng.standard_normal((n, policy.action_dim)))


def sampling_probs(q_values, xi: float):
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ContractError("no candidate values")
    if not np.all(np.isfinite(q)):
        raise ContractError("non-finite candidate values")
    logits = xi * q
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def select_action_explore(policy, critic: Critic, s, sampler: SamplerState, rng, return_index=False):
    cands = candidate_actions(policy, s, sampler.n_sample, rng)
    if sampler.n_sample == 1:
        idx = 0
    else:
        p = sampling_probs(critic.q(s, cands), sampler.xi)
        idx = int(rng.choice(len(p), p=p))
    return (cands[idx], idx) if return_index else cands[idx]


def select_action_eval(policy, critic: Critic, s, n: int, rng, return_index=False):
    cands = candidate_actions(policy, s, n, rng)
    idx = int(np.argmax(critic.q(s, cands)))  # argmax returns the lowest index on ties
    return (cands[idx], idx) if return_index else cands[idx]


def update_temperature(xi: float, entropy: float, controller: EntropyController) -> float:
    return xi - controller.lr * (entropy - controller.target_entropy)


# -- agent bundle ---------------------------------------------------------------

class FinoAgent:
    """Flow policy, one-step policy, critic and sampler state for one run."""

    def __init__(self, state_dim, action_dim, config: AgentConfig | None = None, seed=0):
        self.config = config or AgentConfig()
        cfg = self.config
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        seeds = np.random.SeedSequence(seed).spawn(3)
        self.flow = VectorFieldNet(state_dim, action_dim, cfg.hidden,
                                   net=DenseNet([1 + state_dim + action_dim, *cfg.hidden, action_dim],
                                                rng=np.random.default_rng(seeds[0])))
        self.policy = OneStepPolicy(state_dim, action_dim, cfg.hidden,
                                    net=DenseNet([state_dim + action_dim, *cfg.hidden, action_dim],
                                                 rng=np.random.default_rng(seeds[1])))
        crng = np.random.default_rng(seeds[2])
        nets = [DenseNet([state_dim + action_dim, *cfg.hidden, 1], rng=crng)
                for _ in range(2 if cfg.use_min_of_two else 1)]
        self.critic = Critic(state_dim, action_dim, use_min_of_two=cfg.use_min_of_two,
                             learning_rate=cfg.learning_rate, nets=nets)
        self.flow_opt = AdamState.for_net(self.flow.net, cfg.learning_rate)
        self.policy_opt = AdamState.for_net(self.policy.net, cfg.learning_rate)
        n_sample = cfg.n_sample if cfg.n_sample is not None else default_n_sample(action_dim)
        self.sampler = SamplerState(xi=cfg.xi_init, n_sample=n_sample)
        target = cfg.target_entropy if cfg.target_entropy is not None else -float(action_dim)
        self.controller = EntropyController(target, cfg.xi_lr, cfg.entropy_interval)
        self.explore_calls = 0

    @property
    def schedule(self) -> NoiseSchedule:
        return self.config.noise_schedule

    def reconfigure(self, config: AgentConfig) -> None:
        """Swap in new training hyperparameters, keeping the networks.

        Architecture fields must match. Optimisers, sampler and temperature
        controller are rebuilt from the new config.
        """
        if config.hidden != self.config.hidden or config.use_min_of_two != self.config.use_min_of_two:
            raise ContractError("hidden / use_min_of_two differ from the trained networks")
        fresh = FinoAgent(self.state_dim, self.action_dim, config)
        self.config = config
        self.flow_opt = AdamState.for_net(self.flow.net, config.learning_rate)
        self.policy_opt = AdamState.for_net(self.policy.net, config.learning_rate)
        self.critic.optims = [AdamState.for_net(n, config.learning_rate) for n in self.critic.nets]
        self.sampler, self.controller = fresh.sampler, fresh.controller

    def update(self, batch, rng) -> dict:
        """Critic, then flow, then one-step policy; returns the three losses."""
        cfg = self.config
        loss_q = td_update(self.critic, batch, self.policy, cfg, rng)
        loss_flow = self.update_flow(batch, rng)
        z = rng.standard_normal((len(batch["s"]), self.action_dim))
        pi_grads = distill_loss(self.policy, self.flow, self.critic, batch["s"], z,
                                cfg.alpha, cfg.flow_steps)
        adam_step(self.policy.net, self.policy_opt, pi_grads)
        return {"loss_q": loss_q, "loss_flow": loss_flow, "loss_pi": pi_grads.loss}

    def update_flow(self, batch, rng) -> float:
        fb = FlowBatch.draw(batch["s"], batch["a"], self.schedule, rng)
        flow_grads = fino_loss(self.flow, fb, self.schedule, TargetMode(self.config.target_mode))
        adam_step(self.flow.net, self.flow_opt, flow_grads)
        return flow_grads.loss

    def act_explore(self, s, rng):
        self.explore_calls += 1
        return select_action_explore(self.policy, self.critic, s, self.sampler, rng)

    def act_eval(self, s, rng):
        return select_action_eval(self.policy, self.critic, s, self.sampler.n_sample, rng)

    def flow_samples(self, s, n, rng, clamp=True):
        z = rng.standard_normal((n, self.action_dim))
        return sample_action(self.flow, s, z, self.config.flow_steps, clamp=clamp)

    # checkpoints: one nn-format file per net plus a small json sidecar
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "flow.net").write_bytes(to_bytes(self.flow.net))
        (d / "policy.net").write_bytes(to_bytes(self.policy.net))
        for i, (n, t) in enumerate(zip(self.critic.nets, self.critic.targets)):
            (d / f"critic{i}.net").write_bytes(to_bytes(n))
            (d / f"critic{i}_target.net").write_bytes(to_bytes(t))
        meta = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "config": {**asdict(self.config), "hidden": list(self.config.hidden)},
            "xi": self.sampler.xi,
            "n_sample": self.sampler.n_sample,
        }
        (d / "agent.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "FinoAgent":
        d = Path(directory)
        meta = json.loads((d / "agent.json").read_text())
        agent = cls(meta["state_dim"], meta["action_dim"], AgentConfig(**meta["config"]))
        agent.flow.net = from_bytes((d / "flow.net").read_bytes())
        agent.policy.net = from_bytes((d / "policy.net").read_bytes())
        for i in range(len(agent.critic.nets)):
            agent.critic.nets[i] = from_bytes((d / f"critic{i}.net").read_bytes())
            agent.critic.targets[i] = from_bytes((d / f"critic{i}_target.net").read_bytes())
        # optimiser moments are not checkpointed; fine-tuning restarts Adam
        agent.flow_opt = AdamState.for_net(agent.flow.net, agent.config.learning_rate)
        agent.policy_opt = AdamState.for_net(agent.policy.net, agent.config.learning_rate)
        agent.critic.optims = [AdamState.for_net(n, agent.config.learning_rate) for n in agent.critic.nets]
        agent.sampler.xi = meta["xi"]
        agent.sampler.n_sample = meta["n_sample"]
        return agent
