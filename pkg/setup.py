"""Build script for the compiled kernel extension.

The extension is optional: when Cython or a C toolchain is unavailable the
package installs anyway and falls back to the NumPy kernel backend at import.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "ecgscreen.nn.kernels._convkernels",
        ["src/ecgscreen/nn/kernels/_convkernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
except ImportError as exc:  # pragma: no cover - build-env dependent
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
