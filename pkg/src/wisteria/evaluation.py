"""Evaluation harness: masked perplexity across lengths, the linear probe on
pooled embeddings, and embedding export.

Perplexity is exp(mean masked cross-entropy), scored at masked positions
only, with masking drawn from a fixed eval seed keyed by (seed, length,
batch index) so tables are reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import apply_mlm_mask, chunk_records, PAD_ID
from .errors import ConfigError, DataError
from .model import Model
from .training import OptimConfig, OptimState, adamw_step


def _eval_rng(seed: int, length: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, length, index])))


def eval_perplexity(model: Model, records, lengths, seed: int = 0,
                    batch_size: int = 8, p_select: float = 0.15) -> dict:
    """{length: {"ppl": float, "n_scored": int}} for strictly increasing lengths."""
    lengths = list(lengths)
    if any(l < 2 for l in lengths):
        bad = next(l for l in lengths if l < 2)
        raise ConfigError(f"eval length must be >= 2, got {bad}")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigError(f"eval lengths must be strictly increasing, got {lengths}")
    out = {}
    for length in lengths:
        chunks = chunk_records(records, length)
        ce_sum = 0.0
        n_scored = 0
        for bi, start in enumerate(range(0, len(chunks), batch_size)):
            rows = chunks[start:start + batch_size]
            batch = apply_mlm_mask(rows, _eval_rng(seed, length, bi), p_select=p_select)
            if not batch.loss_mask.any():
                continue
            with T.no_grad():
                logits = model.forward(batch.input_ids, batch.valid_mask)
                loss = T.masked_cross_entropy(logits, batch.target_ids, batch.loss_mask)
            count = int(batch.loss_mask.sum())
            ce_sum += float(loss.data) * count
            n_scored += count
        if n_scored == 0:
            raise DataError(f"no positions scored at length {length}")
        out[length] = {"ppl": math.exp(ce_sum / n_scored), "n_scored": n_scored}
    return out


# ---------------------------------------------------------------------------
# pooled embeddings


def embed_records(model: Model, records, batch_size: int = 16,
                  max_len: int | None = None) -> np.ndarray:
    """[n, D] pooled embeddings in corpus order."""
    from .data import tokenize

    token_rows = [tokenize(r.sequence) for r in records]
    if max_len is not None:
        token_rows = [t[:max_len] for t in token_rows]
    out = np.empty((len(token_rows), model.cfg.dim))
    for start in range(0, len(token_rows), batch_size):
        group = token_rows[start:start + batch_size]
        width = max(len(t) for t in group)
        ids = np.full((len(group), width), PAD_ID, dtype=np.int64)
        for j, toks in enumerate(group):
            ids[j, :len(toks)] = toks
        out[start:start + len(group)] = model.extract_embeddings(ids)
    return out


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    mean_accuracy: float
    std_accuracy: float
    per_seed: list


def _train_softmax_probe(x_tr, y_tr, x_te, n_classes: int, steps: int, lr: float) -> np.ndarray:
    """Full-batch softmax regression with the shared optimizer; returns test predictions."""
    from .tensor import Tape, Tensor

    w = Tensor(np.zeros((x_tr.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    params = [("probe_w", w), ("probe_b", b)]
    oc = OptimConfig(peak_lr=lr, min_lr=lr, warmup_steps=0, total_steps=steps,
                     weight_decay=0.0, grad_clip=0.0)

    class _S:
        pass

    state = _S()
    state.m = {n: np.zeros_like(p.data) for n, p in params}
    state.v = {n: np.zeros_like(p.data) for n, p in params}
    state.t = 0
    xt = Tensor(x_tr)
    mask = np.ones(len(y_tr), dtype=bool)
    for _ in range(steps):
        with Tape() as tape:
            logits = T.add(T.matmul(xt, w), b)
            loss = T.masked_cross_entropy(logits, y_tr, mask)
            tape.backward(loss)
        adamw_step(params, state, lr, oc, no_decay=set())
        w.grad = None
        b.grad = None
    scores = x_te @ w.data + b.data
    return scores.argmax(axis=1)


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, folds: int = 5,
                 seeds: int = 5, steps: int = 200, lr: float = 0.1) -> ProbeResult:
    """Cross-validated softmax probe on frozen embeddings; mean/std over seeds."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    if n < 40:
        raise DataError(f"linear_probe needs n >= 40, got {n}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError(f"linear_probe needs >= 2 classes, got {len(classes)}")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[v] for v in y], dtype=np.int64)
    n_classes = len(classes)

    per_seed = []
    for s in range(seeds):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([0x9B0B, s])))
        order = rng.permutation(n)
        fold_sizes = np.full(folds, n // folds)
        fold_sizes[: n % folds] += 1
        correct = 0
        start = 0
        for f in range(folds):
            te = order[start:start + fold_sizes[f]]
            tr = np.setdiff1d(order, te, assume_unique=True)
            start += fold_sizes[f]
            mu = x[tr].mean(axis=0)
            sd = x[tr].std(axis=0) + 1e-8
            preds = _train_softmax_probe((x[tr] - mu) / sd, y[tr], (x[te] - mu) / sd,
                                         n_classes, steps, lr)
            correct += int((preds == y[te]).sum())
        per_seed.append(correct / n)
    arr = np.array(per_seed)
    return ProbeResult(float(arr.mean()), float(arr.std()), per_seed)


# ---------------------------------------------------------------------------
# export


def export_embeddings(model: Model, records, labels, path: str,
                      batch_size: int = 16) -> int:
    """CSV rows: id, label, D pooled floats (f32 print precision); returns row count."""
    emb = embed_records(model, records, batch_size)
    if labels is None:
        labels = np.zeros(len(records), dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for rec, lab, row in zip(records, labels, emb):
            writer.writerow([rec.id, int(lab)] + [f"{v:.7g}" for v in row])
    return len(records)
