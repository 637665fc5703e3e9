"""Build script: compiles the recurrent-scan extension when a toolchain is
available, otherwise installs with the pure-numpy fallback only."""

import sys

from setuptools import setup


def _extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        print(f"scenediff: skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    ext = Extension(
        "scenediff.kernels._gru_cy",
        ["src/scenediff/kernels/_gru_cy.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
