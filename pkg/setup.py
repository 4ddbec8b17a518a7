import os

from setuptools import Extension, setup

# TRIFRAME_PORTABLE=1 drops -march=native for binaries that must run elsewhere.
compile_args = ["-O3"]
if not os.environ.get("TRIFRAME_PORTABLE"):
    compile_args.append("-march=native")

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; triframe.backend falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "triframe._ckernels",
                ["src/triframe/_ckernels.pyx"],
                extra_compile_args=compile_args,
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
