from setuptools import Extension, setup
from Cython.Build import cythonize

# optional: when the compiler is missing the package falls back to the
# pure-Python kernels at import time
ext = Extension(
    "chronomg._ckernels",
    ["src/chronomg/_ckernels.pyx"],
    extra_compile_args=["-O3"],
    optional=True,
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": 3}))
