"""Octave-feature detection stack on a pure NumPy autodiff core.

Submodules load lazily so the command line can pin BLAS thread counts
before the numeric stack comes up.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "fdt", "nn", "blocks", "backbone", "neck",
               "detection", "degrade", "experiment", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
