"""CMake-driving build shim.

The extension is defined in CMakeLists.txt (PATHFLOW_BUILD_PYTHON gate).
This setup script exists because the package index available here does not
carry scikit-build-core; it configures and builds the `_pathflow` target and
drops the resulting module next to the pure-python package.
"""

import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        out_dir = Path(self.get_ext_fullpath(ext.name)).resolve().parent
        build_dir = ROOT / "build" / "python"
        build_dir.mkdir(parents=True, exist_ok=True)
        subprocess.check_call(
            [
                "cmake",
                "-S", str(ROOT),
                "-B", str(build_dir),
                "-DPATHFLOW_BUILD_PYTHON=ON",
                "-DCMAKE_BUILD_TYPE=Release",
                f"-DPython3_EXECUTABLE={sys.executable}",
            ]
        )
        subprocess.check_call(
            ["cmake", "--build", str(build_dir), "--target", "_pathflow", "-j"]
        )
        built = sorted(build_dir.glob("_pathflow*.so"))
        if not built:
            raise RuntimeError("cmake did not produce the _pathflow module")
        out_dir.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built[-1], out_dir / built[-1].name)
        # keep the editable install importable from the source tree
        shutil.copy2(built[-1], ROOT / "python" / "pathflow" / built[-1].name)


setup(
    ext_modules=[CMakeExtension("pathflow._pathflow")],
    cmdclass={"build_ext": CMakeBuild},
)
