"""Build the optional compiled wkv core.

``pip install -e . --no-build-isolation`` compiles ``linvid._wkv_ext``. If
Cython or a C compiler is unavailable the package installs without it and
``linvid.kernels`` falls back to the numpy implementation at import.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("LINVID_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "linvid._wkv_ext",
                    ["src/linvid/_wkv_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
