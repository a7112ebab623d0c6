"""SQIL, behavioral cloning and regularized BC on a shared substrate.

Training losses use mean-normalized terms so that weights do not depend on
batch size. The summed form is available through ``reduction="sum"`` and is
what the gradient-identity check works with.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import approx
from .envs import GridNav, Rollout, State, Transition, sample_action, step
from .errors import ConfigurationError, ContractError, NumericalError, TrainingError
from .replay import DEFAULT_CAPACITY, ReplayBuffer
from .softq import (SoftQFunction, TransitionBatch, as_batch, bellman_error_parts,
                    boltzmann_policy, boltzmann_rows, soft_values)

ALGORITHMS = ("sqil", "bc", "rbc")
SAMPLING_POLICIES = ("imitation", "uniform")
Q_MODELS = ("mlp", "tabular")
ABLATIONS = ("lambda0", "gamma0", "uniform", "rbc")


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "sqil"
    gamma: float = 0.9
    lambda_samp: float = 1.0
    lambda_demo: float = 0.5
    demo_reward: float = 1.0
    samp_reward: float = 0.0
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_gradient_steps: int = 3000
    env_steps_per_gradient_step: int = 1
    sampling_policy: str = "imitation"
    eval_every: int = 100
    convergence_window: int = 200
    convergence_tolerance: float = 1e-3
    seed: int = 0
    q_model: str = "mlp"
    hidden_sizes: tuple[int, ...] = (64, 64)
    target_update_every: int = 0
    buffer_capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.sampling_policy not in SAMPLING_POLICIES:
            raise ConfigurationError(f"sampling_policy must be one of {SAMPLING_POLICIES}")
        if self.q_model not in Q_MODELS:
            raise ConfigurationError(f"q_model must be one of {Q_MODELS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma {self.gamma} outside [0, 1]")
        if self.lambda_samp < 0 or self.lambda_demo < 0:
            raise ConfigurationError("lambda_samp and lambda_demo must be nonnegative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigurationError("batch_size must be even and >= 2")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        for name in ("max_gradient_steps", "env_steps_per_gradient_step", "eval_every",
                     "convergence_window", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.target_update_every < 0:
            raise ConfigurationError("target_update_every must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def make_ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant == "lambda0":
        return replace(base, lambda_samp=0.0)
    if variant == "gamma0":
        return replace(base, gamma=0.0)
    if variant == "uniform":
        return replace(base, sampling_policy="uniform")
    if variant == "rbc":
        # 1/(2 lambda_demo) equals the demonstration reward (1/2 for r = +1)
        lam = 0.5 / base.demo_reward if base.demo_reward > 0 else base.lambda_demo
        return replace(base, algorithm="rbc", lambda_demo=lam)
    raise ConfigurationError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")


# -- losses ----------------------------------------------------------------------

@dataclass
class LossTerm:
    """One weighted piece of an objective.

    ``kind`` is ``"bellman"`` (squared soft Bellman error with constant
    ``reward``), ``"bc"`` (negative log-likelihood of the batch actions) or
    ``"value"`` (soft value of the batch states).
    """

    kind: str
    batch: TransitionBatch
    weight: float = 1.0
    reward: float = 0.0
    gamma: float = 0.0
    reduction: str = "mean"

    def scale(self) -> float:
        if self.reduction == "sum":
            return self.weight
        if self.reduction == "mean":
            return self.weight / len(self.batch)
        raise ContractError(f"unknown reduction {self.reduction!r}")

    def reduce(self, value: float) -> float:
        # divide rather than multiply by scale() so mean values match exactly
        if self.reduction == "mean":
            return self.weight * value / len(self.batch)
        return self.weight * value


def objective(Q: SoftQFunction, terms: Sequence[LossTerm], full_gradient: bool = False,
              target: SoftQFunction | None = None, need_grad: bool = True):
    """Evaluate a sum of loss terms with one forward and one backward pass.

    Returns ``(value, flat_gradient)``; the gradient is ``None`` when
    ``need_grad`` is false. Bootstrap targets are constants unless
    ``full_gradient`` is set. ``target`` supplies frozen bootstrap values.
    """
    if full_gradient and target is not None:
        raise ContractError("a frozen target network implies semi-gradients")
    chunks, slots = [], []
    n = 0
    for t in terms:
        b = t.batch
        chunks.append(Q.inputs(b.state_ids, b.obs))
        s_slot = (n, n + len(b))
        n += len(b)
        nx_slot = None
        if t.kind == "bellman" and target is None:
            chunks.append(Q.inputs(b.next_state_ids, b.next_obs))
            nx_slot = (n, n + len(b))
            n += len(b)
        slots.append((s_slot, nx_slot))
    if not chunks:
        raise ContractError("objective needs at least one term")
    x = np.concatenate(chunks)
    out = Q.forward(x)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Q values")
    d_out = np.zeros_like(out)
    total = 0.0
    for t, (s_slot, nx_slot) in zip(terms, slots):
        b = t.batch
        c = t.scale()
        q_s = out[s_slot[0]:s_slot[1]]
        if t.kind == "bellman":
            if nx_slot is None:
                q_next = target.forward(target.inputs(b.next_state_ids, b.next_obs))
            else:
                q_next = out[nx_slot[0]:nx_slot[1]]
            val, d_s, d_nx = bellman_error_parts(q_s, q_next, b.actions, b.absorbing,
                                                 t.reward, t.gamma, full_gradient)
            total += t.reduce(val)
            d_out[s_slot[0]:s_slot[1]] += c * d_s
            if nx_slot is not None:
                d_out[nx_slot[0]:nx_slot[1]] += c * d_nx
        elif t.kind == "bc":
            idx = np.arange(len(b))
            total += t.reduce(float(np.sum(soft_values(q_s) - q_s[idx, b.actions])))
            d = boltzmann_rows(q_s)
            d[idx, b.actions] -= 1.0
            d_out[s_slot[0]:s_slot[1]] += c * d
        elif t.kind == "value":
            total += t.reduce(float(np.sum(soft_values(q_s))))
            d_out[s_slot[0]:s_slot[1]] += c * boltzmann_rows(q_s)
        else:
            raise ContractError(f"unknown loss term {t.kind!r}")
    if not need_grad:
        return total, None
    return total, Q.backward(x, d_out)


def sqil_terms(demo_batch, samp_batch, cfg: TrainConfig, reduction: str = "mean"):
    terms = [LossTerm("bellman", as_batch(demo_batch), 1.0, cfg.demo_reward, cfg.gamma,
                      reduction)]
    if samp_batch is not None and len(samp_batch):
        terms.append(LossTerm("bellman", as_batch(samp_batch), cfg.lambda_samp,
                              cfg.samp_reward, cfg.gamma, reduction))
    return terms


def bc_terms(demo_batch, reduction: str = "mean"):
    return [LossTerm("bc", as_batch(demo_batch), 1.0, reduction=reduction)]


def rbc_terms(demo_batch, samp_batch, cfg: TrainConfig, reduction: str = "mean"):
    demo = as_batch(demo_batch)
    terms = [LossTerm("bc", demo, 1.0, reduction=reduction),
             LossTerm("bellman", demo, cfg.lambda_demo, 0.0, cfg.gamma, reduction)]
    if samp_batch is not None and len(samp_batch):
        terms.append(LossTerm("bellman", as_batch(samp_batch), cfg.lambda_samp, 0.0,
                              cfg.gamma, reduction))
    return terms


def sqil_loss(Q, demo_batch, samp_batch, cfg: TrainConfig, reduction: str = "mean") -> float:
    """delta^2(demo, r_demo) + lambda_samp * delta^2(samp, r_samp)."""
    return objective(Q, sqil_terms(demo_batch, samp_batch, cfg, reduction),
                     need_grad=False)[0]


def bc_loss(Q, demo_batch, reduction: str = "sum") -> float:
    """Negative log-likelihood of the demonstrated actions under softmax(Q)."""
    return objective(Q, bc_terms(demo_batch, reduction), need_grad=False)[0]


def rbc_loss(Q, demo_batch, samp_batch, cfg: TrainConfig, reduction: str = "mean") -> float:
    """BC plus separately weighted zero-reward Bellman penalties."""
    return objective(Q, rbc_terms(demo_batch, samp_batch, cfg, reduction),
                     need_grad=False)[0]


def training_terms(cfg: TrainConfig, demo_batch, samp_batch):
    if cfg.algorithm == "sqil":
        return sqil_terms(demo_batch, samp_batch, cfg)
    if cfg.algorithm == "rbc":
        return rbc_terms(demo_batch, samp_batch, cfg)
    return bc_terms(demo_batch)


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainReport:
    losses: list[float]
    eval_steps: list[int]
    eval_metrics: list[dict]
    q: SoftQFunction = field(repr=False)
    halt_reason: str
    config: TrainConfig

    @property
    def steps(self) -> int:
        return len(self.losses)

    def best(self, key: str) -> float:
        vals = [m[key] for m in self.eval_metrics if key in m]
        return max(vals) if vals else float("nan")

    def write_curve(self, path: str | Path) -> None:
        """CSV of ``step,loss`` plus any evaluation columns (blank when absent)."""
        keys = sorted({k for m in self.eval_metrics for k in m})
        at = dict(zip(self.eval_steps, self.eval_metrics))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", *keys])
            for i, loss in enumerate(self.losses, start=1):
                m = at.get(i, {})
                w.writerow([i, repr(loss), *(repr(m[k]) if k in m else "" for k in keys)])

    def summary(self) -> dict:
        keys = sorted({k for m in self.eval_metrics for k in m})
        return {
            "algorithm": self.config.algorithm,
            "seed": self.config.seed,
            "steps": self.steps,
            "halt_reason": self.halt_reason,
            "final_loss": self.losses[-1] if self.losses else None,
            "best": {k: self.best(k) for k in keys},
        }

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def make_q(env: GridNav, cfg: TrainConfig, rng: np.random.Generator) -> SoftQFunction:
    if cfg.q_model == "tabular":
        return SoftQFunction.tabular(env.n_states, env.n_actions)
    sizes = (env.obs_dim, *cfg.hidden_sizes, env.n_actions)
    return SoftQFunction.approx(approx.Network.init(sizes, rng))


def converged(losses: Sequence[float], window: int, tolerance: float) -> bool:
    if len(losses) < window:
        return False
    tail = losses[-window:]
    return max(tail) - min(tail) <= tolerance * (1.0 + abs(math.fsum(tail) / window))


Evaluator = Callable[[SoftQFunction, int], dict]


def train(env: GridNav, demos: Sequence[Rollout], cfg: TrainConfig,
          rng: np.random.Generator | None = None,
          evaluator: Evaluator | None = None) -> TrainReport:
    """Run SQIL, BC or RBC; ``evaluator(q, step)`` is called every ``eval_every`` steps.

    The agent interacts from the environment's ``train_init`` distribution,
    restarting after every absorbing transition. BC never interacts.
    """
    if not demos:
        raise ConfigurationError("train needs at least one demonstration rollout")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    q = make_q(env, cfg, rng)
    buf = ReplayBuffer.init_with_demos(demos, cfg.buffer_capacity)
    adam = approx.AdamState.zeros(q.n_params, cfg.learning_rate)
    params = q.get_params()
    target = q.copy() if cfg.target_update_every else None
    interacts = cfg.algorithm != "bc"
    state = State(env.config.train_init.sample(rng), 0)

    losses: list[float] = []
    eval_steps: list[int] = []
    eval_metrics: list[dict] = []
    halt = "step-cap"
    for k in range(1, cfg.max_gradient_steps + 1):
        if interacts:
            demo_b, samp_b = buf.sample_balanced(cfg.batch_size, rng)
        else:
            demo_b, samp_b = buf.sample_demo(cfg.batch_size, rng), []
        terms = training_terms(cfg, demo_b, samp_b)
        try:
            loss, grad = objective(q, terms, target=target)
        except NumericalError as exc:
            raise TrainingError(f"training diverged at step {k}: {exc}", step=k) from exc
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {k}", step=k)
        params, adam = approx.adam_step(adam, params, grad)
        q.set_params(params)
        losses.append(loss)
        if target is not None and k % cfg.target_update_every == 0:
            target = q.copy()

        if interacts:
            for _ in range(cfg.env_steps_per_gradient_step):
                obs = env.features[state.cell]
                if cfg.sampling_policy == "uniform":
                    a = int(rng.integers(env.n_actions))
                else:
                    a = sample_action(boltzmann_policy(q.values(state.cell, obs)), rng)
                nxt, done = step(env, state, a, rng)
                buf.append(Transition(obs, a, env.features[nxt.cell], done,
                                      state.cell, nxt.cell))
                state = State(env.config.train_init.sample(rng), 0) if done else nxt

        if evaluator is not None and k % cfg.eval_every == 0:
            eval_steps.append(k)
            eval_metrics.append(evaluator(q, k))
        if converged(losses, cfg.convergence_window, cfg.convergence_tolerance):
            halt = "converged"
            break
    if evaluator is not None and (not eval_steps or eval_steps[-1] != len(losses)):
        eval_steps.append(len(losses))
        eval_metrics.append(evaluator(q, len(losses)))
    return TrainReport(losses, eval_steps, eval_metrics, q, halt, cfg)


def desk_config(**overrides) -> TrainConfig:
    """The bundled training profile for the built-in gridworld presets."""
    text = resources.files("sqilab").joinpath("scenarios", "desk-train.yaml").read_text()
    data = yaml.safe_load(text)
    data.update(overrides)
    return TrainConfig.from_dict(data)
