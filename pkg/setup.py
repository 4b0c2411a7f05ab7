"""Build script for the optional compiled kernels.

The Cython extension is optional: when Cython or a compiler is missing the
package installs without it and ``memhomog.kernels`` falls back to the
pure-Python implementation.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("MEMHOMOG_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "memhomog._core",
                    ["src/memhomog/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
