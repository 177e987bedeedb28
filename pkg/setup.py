import os

from setuptools import setup

ext_modules = []
if not os.environ.get("OTOP_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "otop._core",
                    ["src/otop/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    # fp-contract=off keeps results bitwise equal to the numpy fallback
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
