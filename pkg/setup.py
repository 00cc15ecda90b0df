import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; dcadmm falls back at import time
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("dcadmm._ckernels", ["src/dcadmm/_ckernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"], optional=True)],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
