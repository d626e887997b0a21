import os

from setuptools import setup

ext_modules = []
if os.environ.get("MCNB_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mcnb.core._kernels",
                    ["src/mcnb/core/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython available: the package falls back to the numpy kernels
        ext_modules = []

setup(ext_modules=ext_modules)
