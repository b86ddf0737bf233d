"""Build script: compiles the optional fast-path extension.

The package works without the extension (pure-Python kernels are selected
at import time); building it just makes the Monte Carlo hot loops much
faster.  Set GROWFRAG_NO_EXT=1 to skip the build entirely.
"""

import os
import sys

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("GROWFRAG_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "growfrag._kernels",
                    ["src/growfrag/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError as exc:
        sys.stderr.write(f"growfrag: skipping compiled kernels ({exc})\n")

setup(ext_modules=ext_modules)
