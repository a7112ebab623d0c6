"""Replay buffer with pinned demonstrations and balanced sampling.

Demonstration file format (version 1) is tab-separated text. The first line
is the header ``#sqilab-demos<TAB>v1``, the second names the columns::

    rollout  step  state  action  next_state  absorbing  end  obs  next_obs

``absorbing`` is ``0`` or ``1``; ``end`` is ``-`` except on the final
transition of a rollout, where it is ``goal``, ``hazard`` or ``step_limit``.
``obs`` and ``next_obs`` are comma-separated floats written with ``repr``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import Rollout, Transition
from .errors import ConfigurationError, ContractError

DEMO_HEADER = "#sqilab-demos\tv1"
DEMO_COLUMNS = ("rollout", "step", "state", "action", "next_state", "absorbing", "end",
                "obs", "next_obs")
DEFAULT_CAPACITY = 50_000


class ReplayBuffer:
    """Immutable demonstration partition plus a FIFO ring of agent samples."""

    def __init__(self, demo: Sequence[Transition], capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self._demo = tuple(demo)
        self.capacity = int(capacity)
        self._ring: list[Transition] = []
        self._head = 0  # index of the oldest entry once the ring is full

    @classmethod
    def init_with_demos(cls, demos: Sequence[Rollout], capacity: int = DEFAULT_CAPACITY):
        flat = [t for ro in demos for t in ro.transitions]
        if not flat:
            raise ConfigurationError("cannot build a replay buffer without demonstrations")
        return cls(flat, capacity)

    @property
    def demo(self) -> tuple[Transition, ...]:
        return self._demo

    @property
    def samp(self) -> list[Transition]:
        """Agent samples, oldest first."""
        return self._ring[self._head:] + self._ring[:self._head]

    def __len__(self):
        return len(self._demo) + len(self._ring)

    @property
    def n_samp(self) -> int:
        return len(self._ring)

    def append(self, t: Transition) -> None:
        if len(self._ring) < self.capacity:
            self._ring.append(t)
        else:
            self._ring[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def sample_demo(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self._demo), size=n)
        return [self._demo[i] for i in idx]

    def sample_balanced(self, batch_size: int, rng: np.random.Generator
                        ) -> tuple[list[Transition], list[Transition]]:
        """Half the batch from demonstrations, half from agent samples.

        Draws are uniform with replacement. With no agent samples yet the
        second list is empty.
        """
        if batch_size < 2 or batch_size % 2:
            raise ConfigurationError(f"batch_size must be even and >= 2, got {batch_size}")
        half = batch_size // 2
        demo = self.sample_demo(half, rng)
        if not self._ring:
            return demo, []
        idx = rng.integers(len(self._ring), size=half)
        return demo, [self._ring[i] for i in idx]


def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in v)


def write_demos(rollouts: Sequence[Rollout], path: str | Path) -> None:
    lines = [DEMO_HEADER, "\t".join(DEMO_COLUMNS)]
    for i, ro in enumerate(rollouts):
        last = len(ro.transitions) - 1
        for k, t in enumerate(ro.transitions):
            end = ro.terminated_by if k == last else "-"
            lines.append("\t".join([
                str(i), str(k), str(t.state_id), str(t.action), str(t.next_state_id),
                "1" if t.absorbing else "0", end, _fmt_vec(t.obs), _fmt_vec(t.next_obs),
            ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_demos(path: str | Path) -> list[Rollout]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"demonstration file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != DEMO_HEADER:
        raise ContractError(f"{path}: missing header {DEMO_HEADER!r}")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != DEMO_COLUMNS:
        raise ContractError(f"{path}: unexpected column line")
    rollouts: list[Rollout] = []
    current: list[Transition] = []
    expect = 0
    for n, line in enumerate(lines[2:], start=3):
        f = line.split("\t")
        if len(f) != len(DEMO_COLUMNS):
            raise ContractError(f"{path}:{n}: expected {len(DEMO_COLUMNS)} fields")
        if int(f[0]) != expect or int(f[1]) != len(current):
            raise ContractError(f"{path}:{n}: rollout/step indices out of order")
        t = Transition(
            np.array([float(x) for x in f[7].split(",")]),
            int(f[3]),
            np.array([float(x) for x in f[8].split(",")]),
            f[5] == "1",
            int(f[2]),
            int(f[4]),
        )
        current.append(t)
        if f[6] != "-":
            rollouts.append(Rollout(current, f[6]))
            current = []
            expect += 1
    if current:
        raise ContractError(f"{path}: last rollout has no end marker")
    return rollouts
