import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    ext_modules = cythonize(
        [Extension("cafield._ckernels", ["src/cafield/_ckernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3", "-ffp-contract=off"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
