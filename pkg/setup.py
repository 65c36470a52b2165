import numpy
from setuptools import Extension, setup

# -ffp-contract=off: the compiled kernels must round every multiply and add
# separately, or they stop agreeing bit-for-bit with the pure-python lane.
ext = Extension(
    "moelab.kernels._core",
    ["src/moelab/kernels/_core.pyx"],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    include_dirs=[numpy.get_include()],
    optional=True,
)

try:
    from Cython.Build import cythonize

    extensions = cythonize([ext], language_level=3)
except ImportError:
    # No Cython: install the pure-python lane only.
    extensions = []

setup(ext_modules=extensions)
