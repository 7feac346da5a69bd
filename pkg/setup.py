import os

import numpy
from setuptools import Extension, setup

extensions = [
    Extension(
        "bnopt._ckernel",
        ["src/bnopt/_ckernel.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

if os.environ.get("BNOPT_NO_EXTENSION"):
    extensions = []
else:
    from Cython.Build import cythonize

    extensions = cythonize(extensions, language_level=3)

setup(ext_modules=extensions)
