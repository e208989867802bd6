"""MLM loss, AdamW with decoupled decay, warmup-cosine schedule, train loop.

The loop is deterministic given (seed, start step): batches come from a
counter-keyed stream, the optimizer is state-plus-arithmetic, and gradient
accumulation order is fixed. Run logs are newline-delimited JSON records
{step, loss, lr, grad_norm, tokens_per_s}; tokens_per_s is wall clock and is
the one field excluded from bit-exactness claims.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .data import MaskedBatch
from .errors import NumericError, TrainingError
from .model import Model
from .tensor import Tape, Tensor


@dataclass
class OptimConfig:
    peak_lr: float = 8e-3
    min_lr: float = 8e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0


class OptimState:
    """Per-parameter Adam moments plus the step counter."""

    def __init__(self, model: Model):
        self.m = {name: np.zeros_like(t.data) for name, t in model.params()}
        self.v = {name: np.zeros_like(t.data) for name, t in model.params()}
        self.t = 0


def lr_schedule(t: int, oc: OptimConfig) -> float:
    """Linear 0 -> peak over warmup, cosine peak -> min_lr over the rest."""
    if t <= 0:
        return 0.0
    if oc.warmup_steps > 0 and t <= oc.warmup_steps:
        return oc.peak_lr * t / oc.warmup_steps
    span = max(1, oc.total_steps - oc.warmup_steps)
    progress = min(1.0, (t - oc.warmup_steps) / span)
    return oc.min_lr + 0.5 * (oc.peak_lr - oc.min_lr) * (1.0 + math.cos(math.pi * progress))


def mlm_loss(logits: Tensor, batch: MaskedBatch) -> Tensor:
    return T.masked_cross_entropy(logits, batch.target_ids, batch.loss_mask)


def global_grad_norm(named_params) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale all grads so the global norm is <= max_norm; returns the pre-clip norm."""
    params = list(named_params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def adamw_step(named_params, state: OptimState, lr_t: float, oc: OptimConfig,
               no_decay: set) -> None:
    """theta <- theta - lr*(mhat/(sqrt(vhat)+eps)) - lr*wd*theta (decay decoupled)."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - oc.beta1 ** t
    bc2 = 1.0 - oc.beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= oc.beta1
        m += (1.0 - oc.beta1) * g
        v *= oc.beta2
        v += (1.0 - oc.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + oc.eps)
        # both terms read the pre-update theta (single-assignment form)
        step_vec = lr_t * update
        if oc.weight_decay > 0 and name not in no_decay:
            step_vec += lr_t * oc.weight_decay * p.data
        p.data -= step_vec


def train(model: Model, batches: Iterator[MaskedBatch], oc: OptimConfig,
          start_step: int = 0, state: OptimState | None = None,
          log_fh=None, ckpt_path: str | None = None, ckpt_every: int = 0,
          run_cfg: dict | None = None, on_step=None) -> list:
    """Run optimizer steps start_step..total_steps-1; returns the log records.

    A batch with an empty loss mask is skipped (logged, no update), keeping
    the batch index aligned with the step counter. Non-finite loss aborts
    without touching the last periodic checkpoint.
    """
    from .checkpoint import save_training_state

    if state is None:
        state = OptimState(model)
        state.t = start_step
    no_decay = model.no_decay_names()
    params = list(model.params())
    records = []
    last = start_step

    for step0 in range(start_step, oc.total_steps):
        batch = next(batches)
        t0 = time.perf_counter()
        try:
            with Tape() as tape:
                logits = model.forward(batch.input_ids, batch.valid_mask)
                loss = mlm_loss(logits, batch)
                tape.backward(loss)
        except TrainingError:
            rec = {"step": step0 + 1, "skipped": "empty_loss_mask"}
            last = step0 + 1
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            continue
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step0 + 1}; last checkpoint preserved")
        grad_norm = clip_gradients(params, oc.grad_clip)
        if not math.isfinite(grad_norm):
            raise NumericError(f"non-finite gradient norm at step {step0 + 1}")
        step = step0 + 1
        lr_t = lr_schedule(step, oc)
        adamw_step(params, state, lr_t, oc, no_decay)
        model.zero_grads()
        last = step
        elapsed = time.perf_counter() - t0
        tokens = batch.input_ids.size
        rec = {
            "step": step,
            "loss": loss_val,
            "lr": lr_t,
            "grad_norm": grad_norm,
            "tokens_per_s": tokens / elapsed if elapsed > 0 else 0.0,
        }
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if on_step is not None and on_step(rec):
            break
        if ckpt_path and ckpt_every > 0 and step % ckpt_every == 0:
            save_training_state(ckpt_path, model, state.m, state.v, step, run_cfg)
    if ckpt_path:
        save_training_state(ckpt_path, model, state.m, state.v, last, run_cfg)
    return records
