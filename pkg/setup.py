"""Build the optional compiled kernels; the package still installs without them."""
import os

from setuptools import setup

ext_modules = []
# -march=native lets the axpy loops use the host's vector width; MOTE_PORTABLE=1
# builds a binary that runs on any x86-64. FMA contraction stays off either way.
flags = ["-O3", "-ffp-contract=off"]
if os.environ.get("MOTE_PORTABLE", "") != "1":
    flags.append("-march=native")
if os.environ.get("MOTE_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mote._kernels",
                    ["src/mote/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math: reduction order must stay as written
                    extra_compile_args=flags,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
