"""Stochastic gridworld with absorbing terminals and two start distributions.

Cells are indexed row-major, ``cell = y * width + x``, with ``y = 0`` the top
row. Demonstrations start from ``demo_init`` while imitation agents train
(and are evaluated under shift) from ``train_init``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import yaml

from .errors import ConfigurationError, ContractError, UsageError

ACTIONS = ("up", "right", "down", "left", "stay")
UP, RIGHT, DOWN, LEFT, STAY = range(5)
N_ACTIONS = len(ACTIONS)
_MOVES = {UP: (0, -1), RIGHT: (1, 0), DOWN: (0, 1), LEFT: (-1, 0), STAY: (0, 0)}
# perpendicular deviations for each move, as (left-of, right-of) heading
_SLIPS = {UP: (LEFT, RIGHT), RIGHT: (UP, DOWN), DOWN: (RIGHT, LEFT), LEFT: (DOWN, UP)}

PRESETS = ("shifted-start", "matched-start")


@dataclass(frozen=True)
class InitDist:
    """Initial-state distribution as ``(cell, probability)`` pairs."""

    support: tuple[tuple[int, float], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "support", tuple((int(c), float(p)) for c, p in self.support)
        )
        if not self.support:
            raise ConfigurationError("initial-state distribution has empty support")
        probs = [p for _, p in self.support]
        if any(p < 0 for p in probs):
            raise ConfigurationError("initial-state probabilities must be nonnegative")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise ConfigurationError(
                f"initial-state probabilities sum to {math.fsum(probs)!r}, not 1"
            )

    @property
    def cells(self) -> list[int]:
        return [c for c, _ in self.support]

    def sample(self, rng: np.random.Generator) -> int:
        cells = self.cells
        if len(cells) == 1:
            return cells[0]
        cdf = np.cumsum([p for _, p in self.support])
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return cells[min(i, len(cells) - 1)]


@dataclass(frozen=True)
class GridNavConfig:
    width: int
    height: int
    goal_cells: frozenset[int]
    demo_init: InitDist
    train_init: InitDist
    hazard_cells: frozenset[int] = frozenset()
    walls: frozenset[int] = frozenset()
    slip_prob: float = 0.0
    step_limit: int = 20
    goal_reward: float = 10.0
    step_reward: float = -1.0
    hazard_reward: float = -10.0
    name: str = "custom"

    def __post_init__(self):
        for attr in ("goal_cells", "hazard_cells", "walls"):
            object.__setattr__(self, attr, frozenset(int(c) for c in getattr(self, attr)))


@dataclass(frozen=True)
class State:
    cell: int
    steps_elapsed: int = 0


class Transition(NamedTuple):
    """One ``(s, a, s')`` step; ``obs`` arrays are the observation features."""

    obs: np.ndarray
    action: int
    next_obs: np.ndarray
    absorbing: bool
    state_id: int
    next_state_id: int


@dataclass
class Rollout:
    transitions: list[Transition]
    terminated_by: str
    true_return: float = 0.0

    def __len__(self):
        return len(self.transitions)

    @property
    def start_cell(self) -> int:
        return self.transitions[0].state_id


ActionDistributionFn = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class GridNav:
    """An immutable gridworld MDP with an exact transition oracle.

    ``transitions[s, a, s']`` holds the next-cell probabilities and
    ``rewards[s, a]`` the expected true reward for entering the next cell.
    Rows for walls and absorbing cells are self-loops that are never stepped.
    """

    config: GridNavConfig
    transitions: np.ndarray = field(repr=False)
    rewards: np.ndarray = field(repr=False)
    absorbing: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)
    _cdf: np.ndarray = field(repr=False)
    _cell_reward: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return self.config.width * self.config.height

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def obs_dim(self) -> int:
        return self.features.shape[1]

    @property
    def open_cells(self) -> list[int]:
        return [c for c in range(self.n_states) if c not in self.config.walls]

    def xy(self, cell: int) -> tuple[int, int]:
        return cell % self.config.width, cell // self.config.width

    def cell(self, x: int, y: int) -> int:
        return y * self.config.width + x

    def is_absorbing_cell(self, cell: int) -> bool:
        return bool(self.absorbing[cell])

    def cell_reward(self, cell: int) -> float:
        """True reward for entering ``cell``."""
        return float(self._cell_reward[cell])


def _coerce_cell(value, width: int, height: int) -> int:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ConfigurationError(f"cell {value!r} must be an index or [x, y]")
        x, y = int(value[0]), int(value[1])
        if not (0 <= x < width and 0 <= y < height):
            raise ConfigurationError(f"cell {value!r} is outside the {width}x{height} grid")
        return y * width + x
    return int(value)


def _validate(config: GridNavConfig) -> None:
    if config.width < 1 or config.height < 1:
        raise ConfigurationError("grid dimensions must be positive")
    if config.step_limit < 1:
        raise ConfigurationError("step_limit must be positive")
    if not 0.0 <= config.slip_prob <= 1.0:
        raise ConfigurationError(f"slip_prob {config.slip_prob} outside [0, 1]")
    n = config.width * config.height
    sets = {"goal_cells": config.goal_cells, "hazard_cells": config.hazard_cells,
            "walls": config.walls}
    for name, cells in sets.items():
        bad = [c for c in cells if not 0 <= c < n]
        if bad:
            raise ConfigurationError(f"{name} contains out-of-bounds cells {sorted(bad)}")
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            overlap = sets[a] & sets[b]
            if overlap:
                raise ConfigurationError(f"{a} and {b} overlap at cells {sorted(overlap)}")
    blocked = config.walls | config.goal_cells | config.hazard_cells
    for label, dist in (("demo_init", config.demo_init), ("train_init", config.train_init)):
        for c in dist.cells:
            if not 0 <= c < n:
                raise ConfigurationError(f"{label} cell {c} is out of bounds")
            if c in blocked:
                raise ConfigurationError(f"{label} cell {c} is a wall or absorbing cell")


def make_gridnav(config: GridNavConfig) -> GridNav:
    _validate(config)
    w, h = config.width, config.height
    n = w * h
    absorbing = np.zeros(n, dtype=bool)
    absorbing[list(config.goal_cells | config.hazard_cells)] = True

    def target(cell: int, action: int) -> int:
        x, y = cell % w, cell // w
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < w and 0 <= ny < h):
            return cell
        nxt = ny * w + nx
        return cell if nxt in config.walls else nxt

    P = np.zeros((n, N_ACTIONS, n))
    for s in range(n):
        if absorbing[s] or s in config.walls:
            P[s, :, s] = 1.0
            continue
        for a in range(N_ACTIONS):
            if a == STAY:
                P[s, a, s] = 1.0
                continue
            P[s, a, target(s, a)] += 1.0 - config.slip_prob
            for dev in _SLIPS[a]:
                P[s, a, target(s, dev)] += config.slip_prob / 2.0

    cell_reward = np.full(n, float(config.step_reward))
    cell_reward[list(config.goal_cells)] = config.goal_reward
    cell_reward[list(config.hazard_cells)] = config.hazard_reward
    R = P @ cell_reward
    # entering nothing from an absorbing or wall cell
    dead = absorbing | np.isin(np.arange(n), list(config.walls))
    R[dead] = 0.0

    xs = np.arange(n) % w
    ys = np.arange(n) // w
    coords = np.stack([xs / max(w - 1, 1), ys / max(h - 1, 1)], axis=1)
    features = np.concatenate([np.eye(n), coords], axis=1)

    return GridNav(
        config=config,
        transitions=P,
        rewards=R,
        absorbing=absorbing,
        features=features,
        _cdf=np.cumsum(P, axis=2),
        _cell_reward=cell_reward,
    )


def observe(env: GridNav, s: State | int) -> np.ndarray:
    """Feature vector: one-hot cell followed by normalized ``(x, y)``."""
    cell = s.cell if isinstance(s, State) else int(s)
    return env.features[cell]


def step(env: GridNav, s: State, a: int, rng: np.random.Generator) -> tuple[State, bool]:
    if env.absorbing[s.cell]:
        raise UsageError(f"cannot step from absorbing cell {s.cell}")
    if s.steps_elapsed >= env.config.step_limit:
        raise UsageError(f"step limit {env.config.step_limit} already reached")
    if s.cell in env.config.walls:
        raise UsageError(f"cell {s.cell} is a wall")
    if not 0 <= a < N_ACTIONS:
        raise ContractError(f"action {a} outside [0, {N_ACTIONS})")
    cdf = env._cdf[s.cell, a]
    nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    nxt = min(nxt, env.n_states - 1)
    ns = State(nxt, s.steps_elapsed + 1)
    done = bool(env.absorbing[nxt]) or ns.steps_elapsed >= env.config.step_limit
    return ns, done


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(probs) - 1)


def _check_distribution(probs: np.ndarray, n_actions: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (n_actions,):
        raise ContractError(f"policy returned shape {probs.shape}, expected ({n_actions},)")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ContractError(f"policy returned a non-normalized distribution {probs}")
    return probs


def rollout(env: GridNav, policy: ActionDistributionFn, init: InitDist,
            rng: np.random.Generator) -> Rollout:
    """Run one episode; the final transition is the only absorbing one."""
    s = State(init.sample(rng), 0)
    transitions = []
    ret = 0.0
    while True:
        obs = env.features[s.cell]
        probs = _check_distribution(policy(s.cell, obs), env.n_actions)
        a = sample_action(probs, rng)
        ns, done = step(env, s, a, rng)
        ret += env.cell_reward(ns.cell)
        transitions.append(
            Transition(obs, a, env.features[ns.cell], done, s.cell, ns.cell)
        )
        if done:
            break
        s = ns
    if ns.cell in env.config.goal_cells:
        why = "goal"
    elif ns.cell in env.config.hazard_cells:
        why = "hazard"
    else:
        why = "step_limit"
    return Rollout(transitions, why, ret)


def uniform_policy(cell: int, obs: np.ndarray) -> np.ndarray:
    return np.full(N_ACTIONS, 1.0 / N_ACTIONS)


# -- scenario files -------------------------------------------------------------

def _init_from_data(items, width: int, height: int) -> InitDist:
    if not items:
        raise ConfigurationError("initial-state distribution has empty support")
    return InitDist(tuple(
        (_coerce_cell(it["cell"], width, height), float(it.get("prob", 1.0)))
        for it in items
    ))


def config_from_dict(data: dict) -> GridNavConfig:
    try:
        width, height = int(data["width"]), int(data["height"])
    except KeyError as exc:
        raise ConfigurationError(f"scenario is missing required key {exc}") from None
    known = {"name", "width", "height", "goal_cells", "hazard_cells", "walls", "slip_prob",
             "step_limit", "goal_reward", "step_reward", "hazard_reward",
             "demo_init", "train_init"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown scenario keys {sorted(unknown)}")
    if "goal_cells" not in data or "demo_init" not in data:
        raise ConfigurationError("scenario needs goal_cells and demo_init")

    def cells(key):
        return frozenset(_coerce_cell(c, width, height) for c in data.get(key) or ())

    demo_init = _init_from_data(data["demo_init"], width, height)
    train_init = (_init_from_data(data["train_init"], width, height)
                  if data.get("train_init") else demo_init)
    return GridNavConfig(
        width=width,
        height=height,
        goal_cells=cells("goal_cells"),
        hazard_cells=cells("hazard_cells"),
        walls=cells("walls"),
        slip_prob=float(data.get("slip_prob", 0.0)),
        step_limit=int(data.get("step_limit", 20)),
        goal_reward=float(data.get("goal_reward", 10.0)),
        step_reward=float(data.get("step_reward", -1.0)),
        hazard_reward=float(data.get("hazard_reward", -10.0)),
        demo_init=demo_init,
        train_init=train_init,
        name=str(data.get("name", "custom")),
    )


def config_to_dict(config: GridNavConfig) -> dict:
    w = config.width

    def xy(c):
        return [c % w, c // w]

    return {
        "name": config.name,
        "width": config.width,
        "height": config.height,
        "goal_cells": [xy(c) for c in sorted(config.goal_cells)],
        "hazard_cells": [xy(c) for c in sorted(config.hazard_cells)],
        "walls": [xy(c) for c in sorted(config.walls)],
        "slip_prob": config.slip_prob,
        "step_limit": config.step_limit,
        "goal_reward": config.goal_reward,
        "step_reward": config.step_reward,
        "hazard_reward": config.hazard_reward,
        "demo_init": [{"cell": xy(c), "prob": p} for c, p in config.demo_init.support],
        "train_init": [{"cell": xy(c), "prob": p} for c, p in config.train_init.support],
    }


def load_scenario(path: str | Path) -> GridNavConfig:
    """Load a scenario file, or a built-in preset when ``path`` names one."""
    if str(path) in PRESETS:
        return preset(str(path))
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    with path.open() as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"scenario file {path} must hold a mapping")
    return config_from_dict(data)


def save_scenario(config: GridNavConfig, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=False)


def preset(name: str) -> GridNavConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("sqilab").joinpath("scenarios", f"{name}.yaml").read_text()
    return config_from_dict(yaml.safe_load(text))


def visited_cells(rollouts: Sequence[Rollout]) -> set[int]:
    cells = set()
    for ro in rollouts:
        for t in ro.transitions:
            cells.add(t.state_id)
    return cells
