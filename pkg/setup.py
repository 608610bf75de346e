"""Builds the optional compiled MMU kernels; the package works without them."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "duvisor_sim.mmu._kernels",
                ["src/duvisor_sim/mmu/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
