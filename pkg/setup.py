import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "timegrit.kernels._ext",
        ["src/timegrit/kernels/_ext.pyx"],
        include_dirs=[np.get_include()],
        # -ffp-contract=off: keep float operation order identical to the pure
        # Python kernels (no FMA contraction), so both paths agree bitwise.
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
