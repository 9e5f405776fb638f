import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dtrlab._hinge_cd",
                ["src/dtrlab/_hinge_cd.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    # The package falls back to the pure-Python solver when the compiled
    # kernel is unavailable.
    ext_modules = []

setup(ext_modules=ext_modules)
