"""Build the optional compiled kernels; the package works without them."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("CLOUDQ_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        print("Cython or numpy unavailable; installing the pure-Python kernels only")
    else:
        ext_modules = cythonize(
            [Extension("cloudq._ckernels", ["src/cloudq/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
