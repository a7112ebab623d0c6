"""Maximum-entropy value functions, policies and Bellman errors."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import approx
from .errors import ContractError, NumericalError


def soft_value(q_row) -> float:
    """log-sum-exp of a vector of action values, max-shifted."""
    q = np.asarray(q_row, dtype=float)
    if q.size == 0:
        raise ContractError("soft_value of an empty vector")
    m = q.max()
    return float(m + np.log(np.exp(q - m).sum()))


def soft_values(q: np.ndarray) -> np.ndarray:
    """Row-wise :func:`soft_value` for a ``(batch, actions)`` array."""
    m = q.max(axis=1)
    return m + np.log(np.exp(q - m[:, None]).sum(axis=1))


def boltzmann_policy(q_row) -> np.ndarray:
    q = np.asarray(q_row, dtype=float)
    p = np.exp(q - q.max())
    return p / p.sum()


def boltzmann_rows(q: np.ndarray) -> np.ndarray:
    p = np.exp(q - q.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


class SoftQFunction:
    """Per-action soft Q values, either a lookup table or a network.

    Tabular functions are indexed by state id, network functions by
    observation features. Both expose the same batch interface
    (``forward`` / ``backward``) and a flat parameter vector so the
    trainers and optimizer can treat them uniformly.
    """

    def __init__(self, kind: str, action_count: int, table: np.ndarray | None = None,
                 net: approx.Network | None = None):
        if kind not in ("tabular", "approx"):
            raise ContractError(f"unknown Q-function kind {kind!r}")
        if kind == "tabular" and (table is None or table.shape[1] != action_count):
            raise ContractError("tabular Q needs a (states, actions) table")
        if kind == "approx" and (net is None or net.output_size != action_count):
            raise ContractError("approx Q needs a network with one output per action")
        self.kind = kind
        self.action_count = action_count
        self.table = table
        self.net = net

    @classmethod
    def tabular(cls, n_states: int, n_actions: int, table: np.ndarray | None = None):
        if table is None:
            table = np.zeros((n_states, n_actions))
        return cls("tabular", n_actions, table=np.array(table, dtype=float))

    @classmethod
    def approx(cls, net: approx.Network):
        return cls("approx", net.output_size, net=net)

    def copy(self) -> "SoftQFunction":
        if self.kind == "tabular":
            return SoftQFunction("tabular", self.action_count, table=self.table.copy())
        return SoftQFunction("approx", self.action_count, net=self.net.copy())

    def inputs(self, state_ids, obs) -> np.ndarray:
        if self.kind == "tabular":
            return np.asarray(state_ids, dtype=int)
        return np.asarray(obs, dtype=float)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "tabular":
            return self.table[x]
        return approx.forward(self.net, x)

    def backward(self, x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
        if self.kind == "tabular":
            grad = np.zeros_like(self.table)
            np.add.at(grad, x, d_out)
            return grad.ravel()
        return approx.backprop(self.net, x, d_out)

    def values(self, state_id: int, obs: np.ndarray) -> np.ndarray:
        if self.kind == "tabular":
            return self.table[state_id]
        return approx.forward(self.net, obs)

    def all_values(self, features: np.ndarray) -> np.ndarray:
        """Q for every state; ``features`` rows are the per-state observations."""
        if self.kind == "tabular":
            return self.table
        return approx.forward(self.net, features)

    def get_params(self) -> np.ndarray:
        if self.kind == "tabular":
            return self.table.ravel().copy()
        return approx.flatten(self.net)

    def set_params(self, flat: np.ndarray) -> None:
        if self.kind == "tabular":
            self.table[...] = np.asarray(flat).reshape(self.table.shape)
        else:
            approx.set_flat(self.net, np.asarray(flat, dtype=float))

    @property
    def n_params(self) -> int:
        return self.table.size if self.kind == "tabular" else self.net.n_params


@dataclass
class TransitionBatch:
    """Column-oriented view of a list of transitions."""

    state_ids: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    next_state_ids: np.ndarray
    next_obs: np.ndarray
    absorbing: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: Sequence) -> "TransitionBatch":
        if len(transitions) == 0:
            raise ContractError("empty transition batch")
        return cls(
            np.fromiter((t.state_id for t in transitions), int, len(transitions)),
            np.stack([t.obs for t in transitions]),
            np.fromiter((t.action for t in transitions), int, len(transitions)),
            np.fromiter((t.next_state_id for t in transitions), int, len(transitions)),
            np.stack([t.next_obs for t in transitions]),
            np.fromiter((t.absorbing for t in transitions), bool, len(transitions)),
        )

    def __len__(self):
        return len(self.actions)


def as_batch(batch) -> TransitionBatch:
    if isinstance(batch, TransitionBatch):
        if len(batch) == 0:
            raise ContractError("empty transition batch")
        return batch
    return TransitionBatch.from_transitions(batch)


def bellman_error_parts(q_s: np.ndarray, q_next: np.ndarray, actions: np.ndarray,
                        absorbing: np.ndarray, r, gamma: float, full_gradient: bool = False):
    """Sum of squared soft Bellman residuals and its output gradients.

    Returns ``(sum_sq, d_q_s, d_q_next)``. With ``full_gradient=False`` the
    bootstrap target is held constant and ``d_q_next`` is zero.
    """
    n = len(actions)
    idx = np.arange(n)
    v_next = np.where(absorbing, 0.0, soft_values(q_next))
    resid = q_s[idx, actions] - (r + gamma * v_next)
    d_q_s = np.zeros_like(q_s)
    d_q_s[idx, actions] = 2.0 * resid
    d_q_next = np.zeros_like(q_next)
    if full_gradient and gamma != 0.0:
        coef = np.where(absorbing, 0.0, -2.0 * gamma * resid)
        d_q_next = coef[:, None] * boltzmann_rows(q_next)
    return float(resid @ resid), d_q_s, d_q_next


def squared_soft_bellman_error(Q: SoftQFunction, batch, r, gamma: float,
                               reduction: str = "mean") -> float:
    """Mean (or summed) squared soft Bellman error with constant reward ``r``.

    ``r`` may also be a per-transition array, e.g. a true reward.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma {gamma} outside [0, 1]")
    b = as_batch(batch)
    q_s = Q.forward(Q.inputs(b.state_ids, b.obs))
    q_next = Q.forward(Q.inputs(b.next_state_ids, b.next_obs))
    total, _, _ = bellman_error_parts(q_s, q_next, b.actions, b.absorbing, r, gamma)
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ContractError(f"unknown reduction {reduction!r}")
    return total / len(b)


def implied_reward(Q: SoftQFunction, transition, gamma: float) -> float:
    """Reward implied by ``Q`` at one sampled transition (diagnostic)."""
    q = Q.values(transition.state_id, transition.obs)[transition.action]
    if transition.absorbing:
        return float(q)
    return float(q - gamma * soft_value(Q.values(transition.next_state_id, transition.next_obs)))


@dataclass
class TabularMDP:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    absorbing: np.ndarray  # (S,) bool


def soft_value_iteration_trace(mdp, gamma: float, tol: float = 1e-10,
                               max_sweeps: int = 100_000
                               ) -> tuple[SoftQFunction, list[float]]:
    """Soft value iteration returning the solution and per-sweep residuals.

    ``mdp`` is anything with ``transitions``, ``rewards`` and ``absorbing``
    arrays (a :class:`TabularMDP` or an environment).
    """
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"gamma {gamma} outside [0, 1)")
    P = np.asarray(mdp.transitions, dtype=float)
    R = np.asarray(mdp.rewards, dtype=float)
    absorbing = np.asarray(mdp.absorbing, dtype=bool)
    Q = np.zeros_like(R)
    Q[absorbing] = R[absorbing]
    residuals = []
    for _ in range(max_sweeps):
        V = np.where(absorbing, 0.0, soft_values(Q))
        Q_new = R + gamma * (P @ V)
        Q_new[absorbing] = R[absorbing]
        res = float(np.max(np.abs(Q_new - Q)))
        residuals.append(res)
        Q = Q_new
        if not np.isfinite(res):
            raise NumericalError("soft value iteration produced non-finite values")
        if res <= tol:
            return SoftQFunction.tabular(*Q.shape, table=Q), residuals
    raise NumericalError(
        f"soft value iteration did not reach tol={tol} in {max_sweeps} sweeps "
        f"(last residual {residuals[-1]:.3e})"
    )


def soft_value_iteration(mdp, gamma: float, tol: float = 1e-10,
                         max_sweeps: int = 100_000) -> SoftQFunction:
    return soft_value_iteration_trace(mdp, gamma, tol, max_sweeps)[0]


def bellman_residual(mdp, Q: np.ndarray, gamma: float) -> float:
    """Sup-norm distance between ``Q`` and one soft Bellman backup of it."""
    absorbing = np.asarray(mdp.absorbing, dtype=bool)
    V = np.where(absorbing, 0.0, soft_values(Q))
    backed = mdp.rewards + gamma * (mdp.transitions @ V)
    backed[absorbing] = mdp.rewards[absorbing]
    return float(np.max(np.abs(backed - Q)))


def export_q_csv(table: np.ndarray, path: str | Path,
                 action_names: Sequence[str] | None = None) -> None:
    """Write ``state,<action names...>`` header then one row per state."""
    table = np.asarray(table, dtype=float)
    names = list(action_names) if action_names else [f"a{i}" for i in range(table.shape[1])]
    if len(names) != table.shape[1]:
        raise ContractError("one action name per column required")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", *names])
        for s, row in enumerate(table):
            w.writerow([s, *(repr(float(v)) for v in row)])


def load_q_csv(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "state":
        raise ContractError(f"{path} is missing the 'state,...' header")
    body = rows[1:]
    table = np.array([[float(v) for v in r[1:]] for r in body])
    if [int(r[0]) for r in body] != list(range(len(body))):
        raise ContractError(f"{path} state column must be 0..n-1 in order")
    return table
