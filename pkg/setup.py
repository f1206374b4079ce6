"""Build script. The Cython kernel extension is optional: if it fails to
compile, the package installs anyway and falls back to the numpy kernels."""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the native kernels if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            "WARNING: native kernel build failed (%s); "
            "bodygraph will use the pure-numpy fallback kernels." % exc,
            file=sys.stderr,
        )


def make_extensions():
    import os

    if not os.path.exists("src/bodygraph/kernels/_native.pyx"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        print("WARNING: %s; skipping native kernels." % exc, file=sys.stderr)
        return []
    ext = Extension(
        "bodygraph.kernels._native",
        ["src/bodygraph/kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
