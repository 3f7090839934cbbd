import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "pge._kernels",
                ["src/pge/_kernels.pyx"],
                include_dirs=[np.get_include()],
                optional=True,
            )
        ],
        language_level=3,
    )
else:
    # No Cython available: the pure NumPy backend is used at runtime.
    ext_modules = []

setup(ext_modules=ext_modules)
