"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy reference is
the fallback. WISTERIA_KERNEL=reference|compiled|auto overrides (compiled
raises if the extension is missing, so CI can insist on it).
"""

import os

from ..errors import ConfigError
from . import reference

try:
    from . import _scan as compiled
except ImportError:  # extension not built; pure-Python install
    compiled = None

_BACKENDS = {"reference": reference}
if compiled is not None:
    _BACKENDS["compiled"] = compiled


def _pick(mode: str):
    if mode == "auto":
        return _BACKENDS.get("compiled", reference)
    if mode not in _BACKENDS:
        have = ", ".join(sorted(_BACKENDS)) + ", auto"
        raise ConfigError(f"WISTERIA_KERNEL={mode!r} unavailable; choose one of: {have}")
    return _BACKENDS[mode]


_active = _pick(os.environ.get("WISTERIA_KERNEL", "auto").lower())


def available_backends() -> list:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return _active.NAME


def set_backend(name: str) -> str:
    """Switch the process-wide scan backend; returns the previous name."""
    global _active
    prev = _active.NAME
    _active = _pick(name)
    return prev


def scan_forward(x, dt, a, b, c, dskip, ckpt: int = 64):
    return _active.scan_forward(x, dt, a, b, c, dskip, ckpt)


def scan_backward(x, dt, a, b, c, dskip, hck, gy, ckpt: int = 64):
    return _active.scan_backward(x, dt, a, b, c, dskip, hck, gy, ckpt)
