from setuptools import Extension, setup

import numpy as np

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "circleseg._kernels._native",
        ["src/circleseg/_kernels/_native.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    # The package works without the compiled core (a numpy fallback is
    # selected at import time), so a missing Cython only skips the extension.
    ext_modules=cythonize(extensions, language_level="3") if cythonize else [],
)
