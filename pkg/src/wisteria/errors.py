"""Exception taxonomy shared across the package.

CLI exit-code mapping: argparse usage errors exit 1, ConfigError exits 2,
everything else below exits 3.
"""


class WisteriaError(Exception):
    """Base class for package errors."""


class ShapeError(WisteriaError, ValueError):
    """Dimension mismatch; message names both offending shapes."""


class ConfigError(WisteriaError, ValueError):
    """Invalid configuration; message names the offending field."""


class NumericError(WisteriaError, ArithmeticError):
    """Non-finite value produced; message names where it appeared."""


class OracleError(WisteriaError, RuntimeError):
    """A self-check (e.g. grad_check double evaluation) was violated."""


class FastaParseError(WisteriaError, ValueError):
    """Malformed FASTA input; message carries a 1-based line number."""


class DataError(WisteriaError, ValueError):
    """Invalid data-pipeline request (bad ids, impossible batch shape, ...)."""


class CheckpointError(WisteriaError, ValueError):
    """Malformed checkpoint; message carries a byte offset where known."""


class TrainingError(WisteriaError, RuntimeError):
    """Training-step invariant violated (empty loss mask, budget mismatch, ...)."""
