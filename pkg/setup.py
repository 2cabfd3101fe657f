import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext_modules = [
    Extension(
        "galamm.sparse._ldl_core",
        sources=["src/galamm/sparse/_ldl_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(ext_modules, language_level=3),
)
