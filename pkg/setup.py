"""Build script for the optional compiled scan kernel.

The package is pure Python plus one Cython extension for the selective-scan
recurrence. If Cython or a C compiler is unavailable the install still
succeeds and the numpy fallback kernel is used at import time.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "magnet.kernels._scan",
                ["src/magnet/kernels/_scan.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": 3,
        },
    )
else:
    extensions = []

setup(ext_modules=extensions)
