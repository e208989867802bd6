"""Throughput and peak-memory benchmark.

Forward-only inference timing over a grid of sequence lengths for the full
model and the attention-free variant, plus a scan-kernel backend comparison.
Wall-clock numbers are machine-bound and excluded from determinism claims;
peak bytes come from the tensor library's allocation accounting.
"""

from __future__ import annotations

import platform
import statistics
import time

import numpy as np

from . import kernels
from . import tensor as T
from .model import ModelConfig, build_variant

WARMUP_REPS = 1


def machine_descriptor() -> dict:
    import os

    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu": platform.processor() or platform.machine(),
        "threads": os.environ.get("WISTERIA_THREADS", ""),
        "kernel_backend": kernels.backend_name(),
    }


def analytic_logit_bytes(heads: int, length: int) -> int:
    """f64 bytes in one [heads, L, L] attention logit buffer."""
    return heads * length * length * 8


def bench_forward(model, length: int, reps: int = 3, seed: int = 0) -> dict:
    """One result row; OOM is recorded, not raised."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, length])))
    ids = rng.integers(0, 4, size=(1, length), dtype=np.int64)
    try:
        base = T.meter.current
        T.meter.reset_peak()
        with T.no_grad():
            model.forward(ids)
        peak = T.meter.peak
        times = []
        for _ in range(max(reps, 1)):
            t0 = time.perf_counter()
            with T.no_grad():
                model.forward(ids)
            times.append(time.perf_counter() - t0)
    except MemoryError:
        return {"tokens_per_s": None, "peak_bytes": None, "base_bytes": None, "oom": True}
    med = statistics.median(times)
    return {
        "tokens_per_s": length / med,
        "peak_bytes": int(peak),
        "base_bytes": int(base),
        "oom": False,
    }


def run_bench(cfg: ModelConfig, lengths, reps: int = 3,
              variants=("full", "no_fourier"), seed: int = 0) -> dict:
    """Bench table over variants x lengths with a machine descriptor."""
    rows = []
    for variant in variants:
        model = build_variant(cfg, variant)
        for length in lengths:
            row = {"variant": variant, "length": int(length)}
            row.update(bench_forward(model, length, reps=reps, seed=seed))
            rows.append(row)
        del model
    return {"machine": machine_descriptor(), "rows": rows}


def kernel_bench(batch: int = 4, length: int = 256, dim: int = 64,
                 state: int = 16, reps: int = 3, seed: int = 0) -> list:
    """Times every available scan backend on one shape and cross-checks outputs.

    max_abs_diff is measured against the first backend's forward output.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xBE7C])))
    x = rng.standard_normal((batch, length, dim))
    dt = rng.uniform(0.01, 0.1, size=(batch, length, dim))
    a = -rng.uniform(0.5, 4.0, size=(dim, state))
    b = rng.standard_normal((batch, length, state))
    c = rng.standard_normal((batch, length, state))
    dskip = rng.standard_normal(dim)
    gy = rng.standard_normal((batch, length, dim))

    rows = []
    ref_y = None
    prev = kernels.backend_name()
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            y, hck = kernels.scan_forward(x, dt, a, b, c, dskip)
            if ref_y is None:
                ref_y = y
            fwd_times, bwd_times = [], []
            for _ in range(WARMUP_REPS + reps):
                t0 = time.perf_counter()
                kernels.scan_forward(x, dt, a, b, c, dskip)
                t1 = time.perf_counter()
                kernels.scan_backward(x, dt, a, b, c, dskip, hck, gy)
                t2 = time.perf_counter()
                fwd_times.append(t1 - t0)
                bwd_times.append(t2 - t1)
            rows.append({
                "backend": name,
                "forward_s": statistics.median(fwd_times[WARMUP_REPS:]),
                "backward_s": statistics.median(bwd_times[WARMUP_REPS:]),
                "max_abs_diff": float(np.max(np.abs(y - ref_y))),
            })
    finally:
        kernels.set_backend(prev)
    return rows
