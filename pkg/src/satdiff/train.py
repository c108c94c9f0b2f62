"""Training: batch construction, posterior-KL loss, AdaBelief, and the loop."""

from __future__ import annotations

import json
import math
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from satdiff import autodiff as ad
from satdiff.diffusion import K, NoiseSchedule, make_schedule, one_hot, posterior, q_sample
from satdiff.formula import CnfFormula, FactorGraph, evaluate, merge_graphs
from satdiff.model import (
    DenoiserModel,
    GraphIndex,
    ModelConfig,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainExample:
    formula: CnfFormula
    solution: np.ndarray

    def __post_init__(self):
        sol = np.asarray(self.solution, dtype=bool)
        object.__setattr__(self, "solution", sol)
        if not evaluate(self.formula, sol)[0]:
            raise ValueError("training solution does not satisfy its formula")


@dataclass
class Batch:
    graph: FactorGraph
    t: np.ndarray            # per instance
    alpha_bar: np.ndarray    # per instance
    var_t: np.ndarray        # per variable
    var_alpha_bar: np.ndarray
    x0: np.ndarray
    xt: np.ndarray
    num_instances: int

    @property
    def bounds(self) -> np.ndarray:
        return self.graph.var_offsets


def make_batch(examples: Sequence[TrainExample], schedule: NoiseSchedule,
               rng: np.random.Generator, max_vars: int = 2000,
               t: Sequence[int] | None = None) -> Batch:
    """Pack examples (in order) until the next one would exceed ``max_vars``.

    ``t`` optionally fixes the per-instance steps instead of drawing them
    uniformly from 1..T.
    """
    if not examples:
        raise ValueError("no examples to batch")
    chosen: list[TrainExample] = []
    total = 0
    for ex in examples:
        n = ex.formula.num_vars
        if n > max_vars:
            raise ValueError(f"instance with {n} variables exceeds max_vars={max_vars}")
        if total + n > max_vars:
            break
        chosen.append(ex)
        total += n
    k = len(chosen)
    steps = (np.asarray(t[:k], dtype=np.int64) if t is not None
             else rng.integers(1, schedule.T + 1, size=k))
    sizes = np.array([ex.formula.num_vars for ex in chosen])
    var_t = np.repeat(steps, sizes)
    var_ab = schedule.alpha_bar[var_t]
    x0 = one_hot(np.concatenate([ex.solution for ex in chosen]))
    xt = q_sample(x0, var_ab, rng)
    return Batch(
        graph=merge_graphs([ex.formula.graph for ex in chosen]),
        t=steps,
        alpha_bar=schedule.alpha_bar[steps],
        var_t=var_t,
        var_alpha_bar=var_ab,
        x0=x0,
        xt=xt,
        num_instances=k,
    )


def posterior_tensor(x_t: np.ndarray, x0_hat: ad.Tensor, t: np.ndarray, s: NoiseSchedule) -> ad.Tensor:
    """theta_post(x_t, x0_hat) as a differentiable function of x0_hat."""
    dtype = x0_hat.dtype
    alpha_t = s.alpha[t][:, None]
    ab_prev = s.alpha_bar[t - 1][:, None]
    likelihood = alpha_t * x_t + (1.0 - alpha_t) / K
    shape = x0_hat.shape
    prior = ad.add(ad.mul(x0_hat, ad.constant(np.broadcast_to(ab_prev, shape), dtype)),
                   ad.constant(np.broadcast_to((1.0 - ab_prev) / K, shape), dtype))
    return ad.normalize_rows(ad.mul(prior, ad.constant(likelihood, dtype)))


def batch_loss(batch: Batch, model: DenoiserModel, schedule: NoiseSchedule,
               x0_hat: ad.Tensor | None = None, graph_index: GraphIndex | None = None) -> ad.Tensor:
    """Mean over variables of KL(posterior(x_t, x_0) || posterior(x_t, x0_hat))."""
    if x0_hat is None:
        x0_hat = forward(model, graph_index or batch.graph, batch.xt, batch.var_alpha_bar)
    if x0_hat.shape != batch.x0.shape:
        raise ValueError(f"prediction shape {x0_hat.shape} != target shape {batch.x0.shape}")
    target = posterior(batch.xt, batch.x0, batch.var_t, schedule)
    predicted = posterior_tensor(batch.xt, x0_hat, batch.var_t, schedule)
    return ad.scale(ad.kl_div(target, predicted), 1.0 / batch.x0.shape[0])


# alias matching the operation name
loss = batch_loss


# ------------------------------------------------------------------ AdaBelief


@dataclass
class OptState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)


def adabelief_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptState) -> None:
    """One in-place AdaBelief update of ``params`` and ``state``."""
    for name in params:
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {grads[name].shape}, "
                             f"parameter has {params[name].shape}")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        s = state.s.get(name)
        if m is None:
            m = np.zeros(p.shape)
            s = np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * (g - m) ** 2 + eps
        state.m[name], state.s[name] = m, s
        update = state.lr * (m / bc1) / (np.sqrt(s / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# ---------------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    steps: int = 20_000
    max_vars: int = 2000
    T: int = 128
    seed: int = 0
    lr: float = 3e-3
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over ``steps``
    clip: float | None = None
    log_every: int = 100
    checkpoint_every: int = 1000
    checkpoint_path: str | None = None
    log_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Learning rate for the update that takes the counter from ``step`` to ``step + 1``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.steps))
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def _opt_records(state: OptState) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out[f"opt.m.{k}"] = state.m[k]
        out[f"opt.s.{k}"] = state.s[k]
    return out


def _opt_from_records(extra: dict[str, np.ndarray], step: int, cfg: TrainConfig) -> OptState:
    state = OptState(lr=cfg.lr, step=step)
    for k, v in extra.items():
        if k.startswith("opt.m."):
            state.m[k[6:]] = v.astype(np.float64)
        elif k.startswith("opt.s."):
            state.s[k[6:]] = v.astype(np.float64)
    return state


def _checkpoint(model: DenoiserModel, state: OptState, path: str) -> None:
    tmp = path + ".tmp"
    save_checkpoint(model, tmp, extra=_opt_records(state))
    os.replace(tmp, path)


def train_loop(dataset: Sequence[TrainExample], cfg: TrainConfig, resume: bool = False) -> DenoiserModel:
    """Train with AdaBelief; logs one JSON line per ``log_every`` steps.

    Deterministic given ``cfg.seed``. With ``resume`` and an existing
    checkpoint, continues from its step counter and optimizer moments; the
    data stream is re-derived from (seed, step) so a resumed run sees the same
    batches as an uninterrupted one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for path in (cfg.checkpoint_path, cfg.log_path):
        if path:
            parent = os.path.dirname(os.path.abspath(path))
            if not os.access(parent, os.W_OK):
                raise OSError(f"cannot write to {parent}")
    schedule = make_schedule(cfg.T)

    if resume and cfg.checkpoint_path and os.path.exists(cfg.checkpoint_path):
        model = load_checkpoint(cfg.checkpoint_path, cfg.model)
        state = _opt_from_records(model.extra, model.step, cfg)
        model.extra = {}
    else:
        model = init_model(cfg.model)
        state = OptState(lr=cfg.lr)
    model.T = cfg.T

    log_fh = open(cfg.log_path, "a" if resume else "w") if cfg.log_path else None
    order_cache: dict[int, np.ndarray] = {}
    per_batch = max(1, int(cfg.max_vars // max(1.0, np.mean([ex.formula.num_vars for ex in dataset]))))
    losses: list[float] = []
    start = time.perf_counter()
    try:
        while state.step < cfg.steps:
            step = state.step
            rng = np.random.default_rng([cfg.seed, step])
            examples = _examples_for_step(dataset, cfg.seed, step, per_batch, order_cache)
            batch = make_batch(examples, schedule, rng, cfg.max_vars)
            ad.zero_grad(model.params.values())
            value = batch_loss(batch, model, schedule)
            grads = ad.backward(value, model.params)
            if cfg.clip:
                clip_gradients(grads, cfg.clip)
            state.lr = learning_rate(cfg, step)
            adabelief_step(model.params, grads, state)
            model.step = state.step
            losses.append(value.item())
            if state.step % cfg.log_every == 0 or state.step == cfg.steps:
                record = {
                    "step": state.step,
                    "loss": float(np.mean(losses)),
                    "seconds": round(time.perf_counter() - start, 3),
                }
                losses = []
                log.info("step %d loss %.5f", record["step"], record["loss"])
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
            if cfg.checkpoint_path and state.step % cfg.checkpoint_every == 0:
                _checkpoint(model, state, cfg.checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    if cfg.checkpoint_path:
        _checkpoint(model, state, cfg.checkpoint_path)
    ad.zero_grad(model.params.values())
    return model


def _examples_for_step(dataset, seed: int, step: int, per_batch: int,
                       order_cache: dict) -> list[TrainExample]:
    """Candidates for one step: a window into a per-epoch shuffle.

    ``make_batch`` takes a prefix of the window up to ``max_vars``. The window
    is a pure function of (seed, step) given the dataset, so resumption
    replays the same stream.
    """
    span = per_batch * 2  # enough candidates to fill max_vars
    epoch, offset = divmod(step * per_batch, len(dataset))
    out: list[TrainExample] = []
    while len(out) < span:
        if epoch not in order_cache:
            order_cache.clear()
            order_cache[epoch] = np.random.default_rng([seed, 1 << 32, epoch]).permutation(len(dataset))
        take = order_cache[epoch][offset:offset + span - len(out)]
        out.extend(dataset[i] for i in take)
        epoch, offset = epoch + 1, 0
    return out
