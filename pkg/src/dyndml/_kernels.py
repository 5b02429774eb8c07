"""Kernel backend selection.

The compiled Cython kernel is preferred; set ``DYNDML_PURE_PYTHON=1`` to
force the pure-Python implementation (used by the backend benchmark and the
parity tests).
"""
import os

from . import _cd_py

BACKEND = "python"
cd_gram = _cd_py.cd_gram
cd_path = _cd_py.cd_path

if not os.environ.get("DYNDML_PURE_PYTHON"):
    try:
        from . import _cd  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build environment
        pass
    else:
        BACKEND = "cython"
        cd_gram = _cd.cd_gram
        cd_path = _cd.cd_path


def backends():
    """Return ``{name: (cd_gram, cd_path)}`` for every importable backend."""
    out = {"python": (_cd_py.cd_gram, _cd_py.cd_path)}
    try:
        from . import _cd  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover
        return out
    out["cython"] = (_cd.cd_gram, _cd.cd_path)
    return out
