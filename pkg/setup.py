import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# No FMA contraction and no sin/cos -> sincos fusion, so the compiled core
# rounds exactly like the pure-Python fallback.
ext = Extension(
    "branchbsde._core",
    ["src/branchbsde/_core.pyx"],
    include_dirs=[numpy.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos"],
)

setup(ext_modules=cythonize([ext], language_level=3))
