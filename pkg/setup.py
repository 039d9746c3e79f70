import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "headfit.raster._kernel",
                ["src/headfit/raster/_kernel.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: the kernel must round exactly like the numpy fallback
                extra_compile_args=["-O2", "-ffp-contract=off", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
