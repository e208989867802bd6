"""FASTA ingestion, character tokenization, MLM masking, budget batching,
and synthetic corpora.

Vocabulary is fixed: A=0 C=1 G=2 T=3 N=4 MASK=5 PAD=6. Masking uses a
counter-based RNG keyed by (seed, batch_index), so batch i is reproducible
without consuming batches 0..i-1 (resume just restarts the counter).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import count
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError, FastaParseError

VOCAB = {"A": 0, "C": 1, "G": 2, "T": 3, "N": 4, "MASK": 5, "PAD": 6}
VOCAB_SIZE = 7
A_ID, C_ID, G_ID, T_ID, N_ID, MASK_ID, PAD_ID = range(7)
ALPHABET = "ACGTN"
_ID_TO_CHAR = np.array(list("ACGTN#-"))  # MASK prints '#', PAD prints '-'

# byte-level normalization: lowercase folds up, anything outside {A,C,G,T,N}
# becomes N
_NORM = bytearray(b"N" * 256)
for _ch in b"ACGTN":
    _NORM[_ch] = _ch
for _lo, _up in zip(b"acgtn", b"ACGTN"):
    _NORM[_lo] = _up
_NORM = bytes(_NORM)

_TOK = np.full(256, N_ID, dtype=np.int64)
for _ch, _tid in zip(b"ACGTN", range(5)):
    _TOK[_ch] = _tid


@dataclass
class FastaRecord:
    id: str
    sequence: str


def normalize_sequence(chunk: str) -> str:
    return chunk.encode("ascii", errors="replace").translate(_NORM).decode("ascii")


def parse_fasta(lines: Iterable[str]) -> Iterator[FastaRecord]:
    """Stream records from FASTA text; one record's sequence in memory at a time."""
    ident: str | None = None
    header_line = 0
    parts: list = []
    lineno = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            if ident is not None:
                if not parts:
                    raise FastaParseError(f"empty sequence for record at line {header_line}")
                yield FastaRecord(ident, "".join(parts))
            fields = line[1:].split()
            ident = fields[0] if fields else ""
            header_line = lineno
            parts = []
        else:
            if ident is None:
                raise FastaParseError(f"sequence data before first header at line {lineno}")
            parts.append(normalize_sequence(line))
    if ident is not None:
        if not parts:
            raise FastaParseError(f"empty sequence for record at line {header_line}")
        yield FastaRecord(ident, "".join(parts))


def tokenize(seq: str) -> np.ndarray:
    if not seq:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(normalize_sequence(seq).encode("ascii"), dtype=np.uint8)
    return _TOK[raw]


def detokenize(ids: np.ndarray) -> str:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise DataError(f"detokenize id out of range: {int(ids.min())}..{int(ids.max())}")
    return "".join(_ID_TO_CHAR[ids])


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskedBatch:
    input_ids: np.ndarray   # [B,L] int64, post-corruption
    target_ids: np.ndarray  # [B,L] int64, originals
    loss_mask: np.ndarray   # [B,L] bool, true exactly at selected positions
    valid_mask: np.ndarray  # [B,L] bool, false at PAD


def apply_mlm_mask(ids: np.ndarray, rng: np.random.Generator, p_select: float = 0.15,
                   p_mask: float = 0.8, p_random: float = 0.1, p_keep: float = 0.1) -> MaskedBatch:
    """BERT-style corruption. PAD positions are never selected.

    Draw order is fixed and shape-wide (selection draw, branch draw,
    replacement draw), so the masking pattern depends only on the rng state
    and the PAD layout, never on token identities.
    """
    if abs(p_mask + p_random + p_keep - 1.0) > 1e-12:
        raise ConfigError(
            f"mask split must sum to 1: p_mask={p_mask} p_random={p_random} p_keep={p_keep}"
        )
    if not 0.0 <= p_select <= 1.0:
        raise ConfigError(f"p_select must be in [0,1], got {p_select}")
    ids = np.asarray(ids, dtype=np.int64)
    valid = ids != PAD_ID
    sel_draw = rng.random(ids.shape)
    branch_draw = rng.random(ids.shape)
    replacements = rng.integers(0, 4, size=ids.shape, dtype=np.int64)

    selected = (sel_draw < p_select) & valid
    to_mask = selected & (branch_draw < p_mask)
    to_random = selected & (branch_draw >= p_mask) & (branch_draw < p_mask + p_random)
    input_ids = ids.copy()
    input_ids[to_mask] = MASK_ID
    input_ids[to_random] = replacements[to_random]
    return MaskedBatch(input_ids=input_ids, target_ids=ids, loss_mask=selected, valid_mask=valid)


# ---------------------------------------------------------------------------
# batching


def chunk_records(records: Iterable[FastaRecord], seq_len: int) -> np.ndarray:
    """Tokenize and cut into fixed-length rows; last chunk of each record padded."""
    if seq_len < 1:
        raise ConfigError(f"seq_len must be >= 1, got {seq_len}")
    rows = []
    for rec in records:
        toks = tokenize(rec.sequence)
        for start in range(0, len(toks), seq_len):
            piece = toks[start:start + seq_len]
            if len(piece) < seq_len:
                piece = np.concatenate([piece, np.full(seq_len - len(piece), PAD_ID, dtype=np.int64)])
            rows.append(piece)
    if not rows:
        raise DataError("corpus produced no chunks")
    return np.stack(rows)


def batch_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def budget_batches(records, seq_len: int, token_budget: int, seed: int,
                   p_select: float = 0.15, p_mask: float = 0.8, p_random: float = 0.1,
                   p_keep: float = 0.1, start: int = 0) -> Iterator[MaskedBatch]:
    """Endless deterministic stream of masked batches with B*L == token_budget.

    Chunks cycle in corpus order; batch i is fully determined by (seed, i),
    so resuming from step k just means start=k.
    """
    if token_budget % seq_len != 0:
        raise ConfigError(f"token_budget {token_budget} not divisible by seq_len {seq_len}")
    bsz = token_budget // seq_len
    chunks = chunk_records(records, seq_len)
    n = len(chunks)
    for i in count(start):
        rows = chunks[(i * bsz + np.arange(bsz)) % n]
        yield apply_mlm_mask(rows, batch_rng(seed, i), p_select, p_mask, p_random, p_keep)


def batch_shape(token_budget: int, seq_len: int) -> tuple:
    """(B, L) for a budget; pure arithmetic, no allocation."""
    if token_budget % seq_len != 0:
        raise ConfigError(f"token_budget {token_budget} not divisible by seq_len {seq_len}")
    return token_budget // seq_len, seq_len


def prefetch(it: Iterator, capacity: int = 2) -> Iterator:
    """Producer thread running at most `capacity` items ahead."""
    import queue
    import threading

    q: "queue.Queue" = queue.Queue(maxsize=capacity)
    stop = object()

    def producer():
        try:
            for item in it:
                q.put(item)
        finally:
            q.put(stop)

    threading.Thread(target=producer, daemon=True).start()
    while True:
        item = q.get()
        if item is stop:
            return
        yield item


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthCorpus:
    records: list
    labels: np.ndarray | None  # per-record class labels (motif kind only)


_BASES = np.array(list("ACGT"))


def synth_corpus(kind: str, seed: int, num_records: int = 64, length: int = 1024,
                 period: int = 8, pattern: str = "", noise: float = 0.0,
                 motif: str = "TATAAA") -> SynthCorpus:
    if num_records < 1 or length < 1:
        raise ConfigError(f"num_records and length must be positive, got {num_records}, {length}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xDA7A])))

    if kind == "uniform":
        seqs = ["".join(_BASES[rng.integers(0, 4, size=length)]) for _ in range(num_records)]
        labels = None
    elif kind == "periodic":
        if pattern:
            pat = normalize_sequence(pattern)
        else:
            if period < 2:
                raise ConfigError(f"periodic corpus needs period >= 2, got {period}")
            pat = "".join(_BASES[rng.integers(0, 4, size=period)])
        if not 0.0 <= noise <= 1.0:
            raise ConfigError(f"noise must be in [0,1], got {noise}")
        reps = -(-length // len(pat))
        base = (pat * reps)[:length]
        seqs = []
        for _ in range(num_records):
            arr = np.array(list(base))
            if noise > 0:
                flips = rng.random(length) < noise
                arr[flips] = _BASES[rng.integers(0, 4, size=int(flips.sum()))]
            seqs.append("".join(arr))
        labels = None
    elif kind == "motif":
        mot = normalize_sequence(motif)
        if len(mot) > length:
            raise ConfigError(f"motif length {len(mot)} exceeds sequence length {length}")
        if not mot:
            raise ConfigError("motif must be non-empty")
        seqs = []
        labels = np.zeros(num_records, dtype=np.int64)
        for i in range(num_records):
            arr = _BASES[rng.integers(0, 4, size=length)]
            label = i % 2
            if label == 1:
                pos = int(rng.integers(0, length - len(mot) + 1))
                arr[pos:pos + len(mot)] = list(mot)
            seqs.append("".join(arr))
            labels[i] = label
    else:
        raise ConfigError(f"unknown corpus kind {kind!r} (uniform, periodic, motif)")

    records = [FastaRecord(id=f"{kind}{i:05d}", sequence=s) for i, s in enumerate(seqs)]
    return SynthCorpus(records=records, labels=labels)


def write_fasta(records: Iterable[FastaRecord], path: str, width: int = 80) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f">{rec.id}\n")
            for start in range(0, len(rec.sequence), width):
                fh.write(rec.sequence[start:start + width] + "\n")
