"""Build the optional compiled coordinate-descent kernel.

If Cython or a C compiler is unavailable the package still installs and
``dyndml`` falls back to the pure-Python kernel at import time.
"""
import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            sys.stderr.write(f"warning: compiled kernel not built ({exc}); using pure-Python fallback\n")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            sys.stderr.write(f"warning: failed to build {ext.name} ({exc})\n")


def _compile_args():
    # DYNDML_PORTABLE=1 builds without host-specific instructions
    if os.environ.get("DYNDML_PORTABLE"):
        return ["-O3"]
    return ["-O3", "-march=native"]


def _extensions():
    if os.environ.get("DYNDML_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "dyndml._cd",
        ["src/dyndml/_cd.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=_compile_args(),
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
