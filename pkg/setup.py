import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -O3 but no -ffast-math and no fp contraction: the compiled kernels must stay
# bit-identical to the numpy fallback, so neither reassociation of float sums
# nor fusing a*b + c*d into FMA is allowed.
extensions = [
    Extension(
        "dtp._kernels._core",
        ["src/dtp/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
