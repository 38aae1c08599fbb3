"""Build the optional Cython kernels.

The compiled extension is optional: if Cython or a C compiler is missing the
package installs without it and ``sincvae.kernels`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
# the kernels are written as fixed-size tiles for the SLP vectorizer; the loop
# vectorizer would otherwise vectorize across row pointers with gathers
compile_args = ["-O3", "-fno-tree-loop-vectorize"]
if not os.environ.get("SINCVAE_PORTABLE"):
    compile_args.append("-march=native")
if not os.environ.get("SINCVAE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "sincvae._ckernels",
                    ["src/sincvae/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=compile_args,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
