"""Progressive distillation laboratory.

Submodules are imported on first attribute access so that the command
line can pin BLAS thread counts before numpy loads.
"""
from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("boolean_tasks", "grammar", "engine", "models", "distill", "probes", "harness")


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = ["__version__", *_SUBMODULES]
