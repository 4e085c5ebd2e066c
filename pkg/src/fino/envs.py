"""Toy environments, offline dataset generation, dataset files and replay."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ContractError

FIELDS = ("s", "a", "r", "s2", "done")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


class Environment:
    """Minimal env contract: reset(seed) -> state, step(action) -> (state, reward, done)."""

    name = "env"
    state_dim = 1
    action_dim = 2
    horizon = 1

    def reset(self, seed=None):
        raise NotImplementedError

    def step(self, action):
        raise NotImplementedError

    @staticmethod
    def clip_action(action):
        return np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)


class _FixedStateBandit(Environment):
    state_dim = 1
    action_dim = 2
    horizon = 1

    def reset(self, seed=None):
        return np.zeros(self.state_dim)

    def reward(self, action) -> float:
        return 0.0

    def step(self, action):
        a = self.clip_action(action)
        return np.zeros(self.state_dim), self.reward(a), True


class FourCircles(_FixedStateBandit):
    """Single-state, density-only task whose data fills four disjoint disks."""

    name = "four-circles"
    centers = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
    radius = 0.15

    def disk_index(self, actions):
        """Index of the disk containing each action, or -1 when outside all disks."""
        a = np.atleast_2d(actions)
        d2 = ((a[:, None, :] - self.centers[None]) ** 2).sum(-1)
        inside = d2 <= self.radius**2
        return np.where(inside.any(axis=1), inside.argmax(axis=1), -1)

    def sample_actions(self, n, rng):
        disk = rng.integers(len(self.centers), size=n)
        r = self.radius * np.sqrt(rng.uniform(size=n))
        ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return self.centers[disk] + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


class RightwardReward(_FixedStateBandit):
    """Single-state bandit with reward equal to the first action coordinate."""

    name = "rightward"
    data_std = 0.2

    def reward(self, action) -> float:
        return float(np.asarray(action)[0])

    def sample_actions(self, n, rng):
        return np.clip(rng.normal(0.0, self.data_std, size=(n, 2)), -1.0, 1.0)


DEFAULT_MAZE = (
    "#######",
    "#.....#",
    "#.###.#",
    "#S###G#",
    "#.###.#",
    "#.....#",
    "#######",
)
# the upper route is "corridor A", the lower one "corridor B"
CORRIDOR_A = ((1, 2), (1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (5, 2))
CORRIDOR_B = ((1, 4), (1, 5), (2, 5), (3, 5), (4, 5), (5, 5), (5, 4))


class PointMaze(Environment):
    """Continuous point mass on a wall grid with a sparse goal reward.

    Positions are in cell units (x = column, y = row); actions move the
    point by up to ``max_step`` per axis and each axis is blocked
    independently when it would enter a wall.
    """

    name = "point-maze"
    state_dim = 2
    action_dim = 2

    def __init__(self, layout=DEFAULT_MAZE, max_step=0.2, horizon=200):
        self.layout = tuple(layout)
        self.walls = np.array([[c == "#" for c in row] for row in self.layout])
        self.height, self.width = self.walls.shape
        self.max_step = max_step
        self.horizon = horizon
        self.start = self._find("S")
        self.goal = self._find("G")
        if not self.connected(self.start, self.goal):
            raise ContractError("maze layout: goal not reachable from start")
        self.pos = None
        self.t = 0

    def _find(self, ch):
        hits = [(x, y) for y, row in enumerate(self.layout) for x, c in enumerate(row) if c == ch]
        if len(hits) != 1:
            raise ContractError(f"maze layout needs exactly one {ch!r} cell")
        return hits[0]

    def is_wall(self, x, y) -> bool:
        cx, cy = int(np.floor(x)), int(np.floor(y))
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            return True
        return bool(self.walls[cy, cx])

    def cell_of(self, pos):
        return int(np.floor(pos[0])), int(np.floor(pos[1]))

    def neighbours(self, cell, blocked=()):
        x, y = cell
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (x + dx, y + dy)
            if 0 <= n[0] < self.width and 0 <= n[1] < self.height and not self.walls[n[1], n[0]] \
                    and n not in blocked:
                yield n

    def connected(self, a, b, blocked=()) -> bool:
        """Breadth-first reachability between two cells, avoiding ``blocked``."""
        seen, queue = {a}, deque([a])
        while queue:
            c = queue.popleft()
            if c == b:
                return True
            for n in self.neighbours(c, blocked):
                if n not in seen:
                    seen.add(n)
                    queue.append(n)
        return False

    def reset(self, seed=None):
        self.pos = np.array([self.start[0] + 0.5, self.start[1] + 0.5])
        self.t = 0
        return self.pos.copy()

    def step(self, action):
        if self.pos is None:
            raise ContractError("call reset() before step()")
        delta = self.clip_action(action) * self.max_step
        pos = self.pos.copy()
        for axis in (0, 1):
            trial = pos.copy()
            trial[axis] += delta[axis]
            if not self.is_wall(*trial):
                pos = trial
        self.pos = pos
        self.t += 1
        at_goal = self.cell_of(pos) == self.goal
        done = at_goal or self.t >= self.horizon
        return pos.copy(), float(at_goal), bool(done)

    def scripted_action(self, pos, route=CORRIDOR_A, gain=5.0):
        """Steer through the centres of ``route`` cells and on to the goal."""
        waypoints = [np.array([c[0] + 0.5, c[1] + 0.5]) for c in (*route, self.goal)]
        cell = self.cell_of(pos)
        cells = [*route, self.goal]
        k = cells.index(cell) + 1 if cell in cells else 0
        target = waypoints[min(k, len(waypoints) - 1)]
        return np.clip(gain * (target - pos), -1.0, 1.0)


ENVIRONMENTS = {
    FourCircles.name: FourCircles,
    RightwardReward.name: RightwardReward,
    PointMaze.name: PointMaze,
}


def four_circles_env() -> FourCircles:
    return FourCircles()


def rightward_reward_env() -> RightwardReward:
    return RightwardReward()


def point_maze_env(layout=DEFAULT_MAZE) -> PointMaze:
    return PointMaze(layout)


def make_env(name: str) -> Environment:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ContractError(f"unknown environment {name!r}") from None


# -- datasets -------------------------------------------------------------------

class Dataset:
    """Column-stored transitions plus a provenance header."""

    MAGIC = "FINODATA"

    def __init__(self, s, a, r, s2, done, env: str, seed: int):
        self.s = np.asarray(s, dtype=np.float64).reshape(len(r), -1)
        self.a = np.asarray(a, dtype=np.float64).reshape(len(r), -1)
        self.r = np.asarray(r, dtype=np.float64)
        self.s2 = np.asarray(s2, dtype=np.float64).reshape(len(r), -1)
        self.done = np.asarray(done, dtype=np.float64)
        self.env = env
        self.seed = int(seed)

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s2[i], bool(self.done[i]))

    @property
    def state_dim(self):
        return self.s.shape[1]

    @property
    def action_dim(self):
        return self.a.shape[1]

    def as_batch(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}

    def header(self) -> str:
        return (f"{self.MAGIC} v1 env={self.env} seed={self.seed} size={len(self)} "
                f"state_dim={self.state_dim} action_dim={self.action_dim}\n")

    def save(self, path) -> None:
        rows = np.concatenate([self.s, self.a, self.r[:, None], self.s2, self.done[:, None]], axis=1)
        Path(path).write_bytes(self.header().encode() + rows.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        end = raw.index(b"\n")
        parts = raw[:end].decode().split()
        if not parts or parts[0] != cls.MAGIC:
            raise ContractError(f"{path}: not a dataset file")
        meta = dict(p.split("=", 1) for p in parts[2:])
        n, ds, da = int(meta["size"]), int(meta["state_dim"]), int(meta["action_dim"])
        width = 2 * ds + da + 2
        rows = np.frombuffer(raw, dtype="<f8", offset=end + 1)
        if rows.size != n * width:
            raise ContractError(f"{path}: header size does not match contents")
        rows = rows.reshape(n, width).astype(np.float64)
        return cls(rows[:, :ds], rows[:, ds:ds + da], rows[:, ds + da], rows[:, ds + da + 1:-1],
                   rows[:, -1], meta["env"], int(meta["seed"]))

    def export_csv(self, path) -> None:
        cols = ([f"s{i}" for i in range(self.state_dim)] + [f"a{i}" for i in range(self.action_dim)]
                + ["r"] + [f"s2_{i}" for i in range(self.state_dim)] + ["done"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in
                            (*self.s[i], *self.a[i], self.r[i], *self.s2[i], self.done[i])])


BEHAVIORS = {
    FourCircles.name: "uniform-in-region",
    RightwardReward.name: "gaussian",
    PointMaze.name: "scripted-corridor",
}


def generate_offline_dataset(env: Environment, behavior: str | None = None, size: int = 10000,
                             seed: int = 0, noise_fraction: float = 0.1) -> Dataset:
    if size < 1:
        raise ContractError("dataset size must be >= 1")
    behavior = behavior or BEHAVIORS.get(env.name)
    if BEHAVIORS.get(env.name) != behavior:
        raise ContractError(f"behavior {behavior!r} not supported for {env.name}")
    rng = np.random.default_rng(seed)
    if isinstance(env, _FixedStateBandit):
        a = env.sample_actions(size, rng)
        r = np.array([env.reward(x) for x in a])
        zeros = np.zeros((size, env.state_dim))
        return Dataset(zeros, a, r, zeros, np.ones(size), env.name, seed)
    return _maze_dataset(env, size, rng, seed, noise_fraction)


def _maze_dataset(env: PointMaze, size, rng, seed, noise_fraction, action_noise=0.3):
    """Scripted corridor-A episodes with a share of uniformly random actions.

    Random-action steps that would put the point inside a corridor-B cell
    are re-drawn, so the data never touches corridor B.
    """
    forbidden = set(CORRIDOR_B)
    rows = []
    while len(rows) < size:
        s = env.reset()
        done = False
        while not done and len(rows) < size:
            if rng.uniform() < noise_fraction:
                a = rng.uniform(-1.0, 1.0, size=2)
            else:
                a = np.clip(env.scripted_action(s) + action_noise * rng.standard_normal(2), -1.0, 1.0)
            saved_pos, saved_t = env.pos.copy(), env.t
            s2, r, done = env.step(a)
            if env.cell_of(s2) in forbidden:
                env.pos, env.t = saved_pos, saved_t
                done = False
                continue
            rows.append((s, a, r, s2, float(r > 0)))
            s = s2
    s, a, r, s2, d = (np.array(c) for c in zip(*rows))
    return Dataset(s, a, r, s2, d, env.name, seed)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, s, a, r, s2, done) -> None:
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.inserted += 1

    def extend(self, data: Dataset) -> None:
        for i in range(len(data)):
            self.push(data.s[i], data.a[i], data.r[i], data.s2[i], data.done[i])

    def contents(self) -> dict:
        """Current transitions in insertion order (oldest first)."""
        n = len(self)
        start = self.inserted % self.capacity if self.inserted > self.capacity else 0
        order = (start + np.arange(n)) % self.capacity
        return {k: getattr(self, k)[order] for k in FIELDS}

    def sample(self, batch_size: int, rng) -> dict:
        n = len(self)
        if n == 0:
            raise ContractError("cannot sample from an empty buffer")
        idx = rng.integers(n, size=batch_size)
        return {k: getattr(self, k)[idx] for k in FIELDS}


def buffer_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t.s, t.a, t.r, t.s2, t.done)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng) -> dict:
    return buffer.sample(batch_size, rng)


def sample_dataset(data: Dataset, batch_size: int, rng) -> dict:
    idx = rng.integers(len(data), size=batch_size)
    return {k: getattr(data, k)[idx] for k in FIELDS}
