"""Build the optional Cython flow kernel.

The package works without it: ``vctransfer.motion`` falls back to the numpy
implementation when the compiled module is missing.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("VCTRANSFER_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "vctransfer._flowkernel",
                    ["src/vctransfer/_flowkernel.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
