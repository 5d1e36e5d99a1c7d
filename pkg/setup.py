import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure-Python kernel
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SCALELAB_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "scalelab._search_kernel",
                ["src/scalelab/_search_kernel.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: results must match the NumPy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
