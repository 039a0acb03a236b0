"""Global float precision switch.

Everything runs in float64 by default; float32 can be selected for training
speed, either programmatically via :func:`set_precision` or through the
``ATTNAS_PRECISION`` environment variable (``f32`` or ``f64``). The numeric
tolerances quoted in the test suite assume float64.
"""

import os

import numpy as np

from .errors import ConfigError

_MODES = {"f32": np.float32, "f64": np.float64}

_dtype = np.float64


def set_precision(mode: str) -> None:
    """Select the global float width for newly created tensors."""
    global _dtype
    if mode not in _MODES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _dtype = _MODES[mode]


def dtype():
    """Return the current numpy float dtype."""
    return _dtype


def precision_name() -> str:
    return "f32" if _dtype is np.float32 else "f64"


_env = os.environ.get("ATTNAS_PRECISION")
if _env:
    set_precision(_env)
