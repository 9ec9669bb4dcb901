import os

import numpy as np
from setuptools import Extension, setup

# PREDBN_NO_EXT=1 skips the compiled kernels; the package then runs on the
# numpy fallback.
ext_modules = []
if not os.environ.get("PREDBN_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "predbn._ckernels",
                ["src/predbn/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: kernels must match naive loops bit-for-bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
