"""Build script for the compiled kernel extension.

The extension is optional at runtime: `levelwise.kernels` falls back to the
NumPy reference implementations when the compiled module is missing, so a
failed build degrades performance but not functionality.
"""

import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "levelwise.kernels._fastk",
        ["src/levelwise/kernels/_fastk.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
