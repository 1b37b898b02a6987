"""Build the optional Cython kernels.

The package works without them; ``demf.kernels`` falls back to numpy.
Use in the current directory: ``pip install -e . --no-build-isolation``
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "demf.kernels._bilinear_cy",
                sources=["src/demf/kernels/_bilinear_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
