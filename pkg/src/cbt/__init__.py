"""Contrastive bidirectional transformer pretraining at desk scale.

Submodules load lazily so the CLI can pin BLAS thread counts before numpy
comes in.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensorkit",
    "encoders",
    "transformer",
    "losses",
    "crossmodal",
    "synthdata",
    "trainer",
    "probes",
    "config",
    "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
