"""Build script for the compiled scan kernel.

The selective-scan recurrence is the only part of the model that cannot be
expressed as a handful of large numpy ops, so it gets a Cython extension.
Everything else stays pure Python; if the extension fails to build the
package still installs and falls back to the numpy reference kernel.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

FAST_FLAGS = ["-O3", "-ffast-math", "-march=native", "-fno-math-errno"]
SAFE_FLAGS = ["-O2"]


class build_ext_with_fallback(build_ext):
    """Retry with conservative flags on toolchains that reject the fast set."""

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception:
            ext.extra_compile_args = SAFE_FLAGS
            ext.libraries = ["m"]
            super().build_extension(ext)


extensions = [
    Extension(
        "wisteria.kernels._scan",
        ["src/wisteria/kernels/_scan.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=FAST_FLAGS,
        # -ffast-math lets gcc emit calls into libmvec's vectorized exp
        libraries=["mvec", "m"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, language_level=3),
    cmdclass={"build_ext": build_ext_with_fallback},
)
