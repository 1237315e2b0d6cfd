"""Top-K objective-driven graph attention recommender.

Submodules are imported lazily so the CLI can configure thread environment
variables before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = ("data", "graph", "model", "objective", "trainer", "eval", "analysis", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
