"""Build script: compiles the fused MLP kernel extension when Cython and a C
compiler are available, otherwise installs the pure-numpy package unchanged.
The package selects between the two at import time."""

import numpy
from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/lightfield/kernels/_fastkernels.pyx"],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    for ext in ext_modules:
        ext.extra_compile_args = ["-O3"]
        ext.include_dirs = [numpy.get_include()]
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
