"""Command-line interface.

Subcommands: synth, pretrain, eval-ppl, probe, ablate, bench,
export-embeddings, inspect-ckpt. Every run resolves a flat key=value config
(file + --set overrides + --seed), writes its artifacts under --out, and
records a manifest with the full resolved config so runs are reproducible.

Exit codes: 0 success, 1 usage, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    # must run before numpy loads its BLAS; WISTERIA_THREADS caps workers
    n = os.environ.get("WISTERIA_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n


_cap_threads()

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .bench import kernel_bench, run_bench
from .checkpoint import (inspect_checkpoint, load_model, load_training_state,
                         save_model)
from .config import DEFAULTS, apply_overrides, load_config, model_config
from .data import budget_batches, parse_fasta, synth_corpus, write_fasta
from .errors import ConfigError, DataError, WisteriaError
from .evaluation import embed_records, eval_perplexity, export_embeddings, linear_probe
from .model import build_model, build_variant
from .training import OptimConfig, OptimState, train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; the contract wants 1."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the seed key")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty output directory")


def _build_parser() -> _Parser:
    top = _Parser(prog="wisteria", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"wisteria {__version__}")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic FASTA corpus")
    _common_flags(p)

    p = sub.add_parser("pretrain", help="masked-LM pretraining run")
    _common_flags(p)
    p.add_argument("--resume", default=None, metavar="STATE.wstr",
                   help="continue from a training-state checkpoint")

    p = sub.add_parser("eval-ppl", help="perplexity across lengths")
    _common_flags(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--data", default=None, help="FASTA file (default: config corpus)")

    p = sub.add_parser("probe", help="linear probe on pooled embeddings")
    _common_flags(p)
    p.add_argument("--ckpt", default=None, help="model checkpoint")
    p.add_argument("--untrained", action="store_true",
                   help="probe a freshly initialized model instead of --ckpt")
    p.add_argument("--data", default=None, help="FASTA file (default: config corpus)")
    p.add_argument("--labels", default=None, help="id,label CSV (default: synth labels)")

    p = sub.add_parser("ablate", help="short training runs over reduced variants")
    _common_flags(p)
    p.add_argument("--variants", default=None,
                   help="comma list from: full,no_fourier,no_gcmb,no_gcmb_no_gmlp")
    p.add_argument("--nblocks", default=None,
                   help="comma list of GCMB block counts, e.g. 0,2,5,8")

    p = sub.add_parser("bench", help="throughput / peak-memory curves")
    _common_flags(p)

    p = sub.add_parser("export-embeddings", help="pooled embeddings as CSV")
    _common_flags(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--data", default=None, help="FASTA file (default: config corpus)")
    p.add_argument("--labels", default=None, help="id,label CSV (default: synth labels)")

    p = sub.add_parser("inspect-ckpt", help="print checkpoint config + tensor table")
    p.add_argument("path", help="checkpoint file")

    return top


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_config(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _prepare_outdir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"--out {path!r} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError(f"output directory {path!r} is not empty (use --force)")
    else:
        out.mkdir(parents=True)
    return out


def _write_manifest(out: Path, command: str, argv: list, cfg: dict, outputs: list) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.get("seed"),
        "config": {k: cfg[k] for k in sorted(cfg)},
        "outputs": sorted(outputs),
        "version": __version__,
        "kernel_backend": kernels.backend_name(),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_corpus(cfg: dict, data_path: str | None = None):
    """(records, labels_or_None) from an explicit FASTA, cfg corpus_path, or synth."""
    path = data_path or cfg["corpus_path"]
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            return list(parse_fasta(fh)), None
    sc = synth_corpus(cfg["corpus"], cfg["seed"], cfg["num_records"], cfg["record_length"],
                      cfg["period"], cfg["pattern"], cfg["noise"], cfg["motif"])
    return sc.records, sc.labels


def _read_labels(path: str, records) -> np.ndarray:
    table = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["id"]] = int(row["label"])
    missing = [r.id for r in records if r.id not in table]
    if missing:
        raise DataError(f"labels file {path} is missing ids: {missing[:4]}")
    return np.array([table[r.id] for r in records], dtype=np.int64)


def _optim_config(cfg: dict) -> OptimConfig:
    return OptimConfig(
        peak_lr=cfg["peak_lr"], min_lr=cfg["min_lr"], warmup_steps=cfg["warmup_steps"],
        total_steps=cfg["total_steps"], weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], grad_clip=cfg["grad_clip"],
    )


def _int_list(text: str, flag: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _batch_stream(cfg: dict, records, start: int = 0):
    return budget_batches(records, cfg["train_len"], cfg["token_budget"], cfg["seed"],
                          cfg["p_select"], cfg["p_mask"], cfg["p_random"], cfg["p_keep"],
                          start=start)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    sc = synth_corpus(cfg["corpus"], cfg["seed"], cfg["num_records"], cfg["record_length"],
                      cfg["period"], cfg["pattern"], cfg["noise"], cfg["motif"])
    write_fasta(sc.records, str(out / "corpus.fa"))
    outputs = ["corpus.fa", "manifest.json"]
    if sc.labels is not None:
        with open(out / "labels.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label"])
            for rec, lab in zip(sc.records, sc.labels):
                writer.writerow([rec.id, int(lab)])
        outputs.append("labels.csv")
    _write_manifest(out, "synth", argv, cfg, outputs)
    print(f"wrote {len(sc.records)} records to {out / 'corpus.fa'}")
    return 0


def _cmd_pretrain(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force or args.resume is not None)

    if args.resume:
        model, mm, mv, step, stored = load_training_state(args.resume)
        # stored config is authoritative on resume; CLI --set/--seed still win
        cfg = dict(DEFAULTS)
        cfg.update({k: v for k, v in stored.items() if k in DEFAULTS})
        apply_overrides(cfg, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        state = OptimState(model)
        state.m, state.v, state.t = mm, mv, step
        start = step
        mode = "a"
    else:
        model = build_model(model_config(cfg))
        state = None
        start = 0
        mode = "w"

    records, _ = _load_corpus(cfg)
    oc = _optim_config(cfg)
    state_path = out / "state.wstr"
    with open(out / "run_log.ndjson", mode, encoding="utf-8") as log_fh:
        train(model, _batch_stream(cfg, records, start=start), oc,
              start_step=start, state=state, log_fh=log_fh,
              ckpt_path=str(state_path), ckpt_every=cfg["ckpt_every"], run_cfg=cfg)
    save_model(model, str(out / "model.wstr"))
    _write_manifest(out, "pretrain", argv, cfg,
                    ["run_log.ndjson", "state.wstr", "model.wstr", "manifest.json"])
    print(f"trained to step {oc.total_steps}; model at {out / 'model.wstr'}")
    return 0


def _default_eval_lengths(train_len: int) -> list:
    return [train_len, 2 * train_len, 4 * train_len, 8 * train_len]


def _cmd_eval_ppl(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    model = load_model(args.ckpt)
    records, _ = _load_corpus(cfg, args.data)
    lengths = (_int_list(cfg["eval_lengths"], "eval_lengths") if cfg["eval_lengths"]
               else _default_eval_lengths(model.cfg.train_len))
    table = eval_perplexity(model, records, lengths, seed=cfg["seed"],
                            batch_size=cfg["eval_batch"], p_select=cfg["p_select"])
    with open(out / "ppl.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length", "ppl", "n_scored"])
        for length in lengths:
            row = table[length]
            writer.writerow([length, f"{row['ppl']:.6f}", row["n_scored"]])
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        for length in lengths:
            line = f"L={length}: ppl={table[length]['ppl']:.4f} ({table[length]['n_scored']} scored)"
            fh.write(line + "\n")
            print(line)
    _write_manifest(out, "eval-ppl", argv, cfg, ["ppl.csv", "summary.txt", "manifest.json"])
    return 0


def _cmd_probe(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    if args.untrained:
        model = build_model(model_config(cfg))
    elif args.ckpt:
        model = load_model(args.ckpt)
    else:
        raise ConfigError("probe needs --ckpt or --untrained")
    records, corpus_labels = _load_corpus(cfg, args.data)
    if args.labels:
        labels = _read_labels(args.labels, records)
    elif args.data is None and corpus_labels is not None:
        labels = corpus_labels
    else:
        raise DataError("no labels available: pass --labels or use a motif corpus")
    emb = embed_records(model, records)
    result = linear_probe(emb, labels, folds=cfg["probe_folds"], seeds=cfg["probe_seeds"])
    payload = {
        "mean_accuracy": result.mean_accuracy,
        "std_accuracy": result.std_accuracy,
        "per_seed": result.per_seed,
        "untrained": bool(args.untrained),
    }
    with open(out / "probe.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "probe", argv, cfg, ["probe.json", "manifest.json"])
    print(f"probe accuracy {result.mean_accuracy:.4f} +/- {result.std_accuracy:.4f}")
    return 0


def _cmd_ablate(args, argv) -> int:
    from .model import VARIANTS

    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    runs = []
    if args.variants:
        for v in args.variants.split(","):
            v = v.strip()
            if v not in VARIANTS:
                raise ConfigError(f"--variants: unknown variant {v!r} (choose from {VARIANTS})")
            runs.append(("variant", v))
    if args.nblocks:
        for k in _int_list(args.nblocks, "--nblocks"):
            runs.append(("nblocks", k))
    if not runs:
        runs = [("variant", v) for v in VARIANTS]

    records, _ = _load_corpus(cfg)
    oc = replace(_optim_config(cfg), total_steps=cfg["ablate_steps"],
                 warmup_steps=min(cfg["warmup_steps"], cfg["ablate_steps"] // 4))
    mc = model_config(cfg)
    rows = []
    for kind, value in runs:
        if kind == "variant":
            model = build_variant(mc, value)
            name = value
        else:
            model = build_model(replace(mc, num_gcmb=int(value)).validate())
            name = f"nblocks={value}"
        recs = train(model, _batch_stream(cfg, records), oc)
        losses = [r["loss"] for r in recs if "loss" in r]
        tail = losses[-min(5, len(losses)):]
        rows.append({
            "kind": kind,
            "name": name,
            "num_params": model.num_params(),
            "final_loss": sum(tail) / len(tail),
        })
        print(f"{name}: params={rows[-1]['num_params']} final_loss={rows[-1]['final_loss']:.4f}")
    with open(out / "ablate.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["kind", "name", "num_params", "final_loss"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    _write_manifest(out, "ablate", argv, cfg, ["ablate.csv", "manifest.json"])
    return 0


def _cmd_bench(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    lengths = _int_list(cfg["bench_lengths"], "bench_lengths")
    report = run_bench(model_config(cfg), lengths, reps=cfg["bench_reps"], seed=cfg["seed"])
    with open(out / "bench.csv", "w", encoding="utf-8", newline="") as fh:
        names = ["variant", "length", "tokens_per_s", "peak_bytes", "base_bytes", "oom"]
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in report["rows"]:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in names})
    krows = kernel_bench(reps=cfg["bench_reps"], seed=cfg["seed"])
    with open(out / "kernel_bench.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["backend", "forward_s", "backward_s", "max_abs_diff"])
        writer.writeheader()
        for row in krows:
            writer.writerow(row)
    with open(out / "machine.json", "w", encoding="utf-8") as fh:
        json.dump(report["machine"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in report["rows"]:
        if row["oom"]:
            print(f"{row['variant']} L={row['length']}: OOM")
        else:
            print(f"{row['variant']} L={row['length']}: {row['tokens_per_s']:.1f} tok/s, "
                  f"peak {row['peak_bytes']} B")
    _write_manifest(out, "bench", argv, cfg,
                    ["bench.csv", "kernel_bench.csv", "machine.json", "manifest.json"])
    return 0


def _cmd_export_embeddings(args, argv) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(args.out, args.force)
    model = load_model(args.ckpt)
    records, corpus_labels = _load_corpus(cfg, args.data)
    if args.labels:
        labels = _read_labels(args.labels, records)
    elif args.data is None and corpus_labels is not None:
        labels = corpus_labels
    else:
        labels = None
    n = export_embeddings(model, records, labels, str(out / "embeddings.csv"))
    _write_manifest(out, "export-embeddings", argv, cfg, ["embeddings.csv", "manifest.json"])
    print(f"wrote {n} embedding rows to {out / 'embeddings.csv'}")
    return 0


def _cmd_inspect_ckpt(args, argv) -> int:
    inspect_checkpoint(args.path)
    return 0


_DISPATCH = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "eval-ppl": _cmd_eval_ppl,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
    "export-embeddings": _cmd_export_embeddings,
    "inspect-ckpt": _cmd_inspect_ckpt,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WisteriaError, OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
