"""Build script: compiles the optional accelerator extension.

The package is fully functional without the extension (a numpy fallback with
identical semantics is selected at import time), so a failed compile only
costs speed. Set POLYEMB_SKIP_EXT=1 to skip the build entirely.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.errors import CCompilerError, ExecError, PlatformError


class optional_build_ext(build_ext):
    """Build the extension if possible; fall back to pure Python otherwise."""

    def run(self):
        try:
            build_ext.run(self)
        except (CCompilerError, ExecError, PlatformError, OSError) as exc:
            print(f"warning: extension build failed ({exc}); "
                  "installing with the pure-python backend only")

    def build_extension(self, ext):
        try:
            build_ext.build_extension(self, ext)
        except (CCompilerError, ExecError, PlatformError, OSError) as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  "installing with the pure-python backend only")


if os.environ.get("POLYEMB_SKIP_EXT"):
    setup()
else:
    from Cython.Build import cythonize
    from setuptools import Extension

    # -ffp-contract=off keeps C arithmetic bit-identical to the numpy
    # fallback: no fused multiply-adds, same left-to-right reductions.
    ext = Extension(
        "polyemb._kernels._core",
        ["src/polyemb/_kernels/_core.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    setup(
        ext_modules=cythonize([ext], language_level=3),
        cmdclass={"build_ext": optional_build_ext},
    )
