"""Builds the icx_py extension module by delegating to cargo.

The module itself lives in crates/icx-py; this file only teaches setuptools
to run `cargo build` and collect the resulting cdylib, so
`pip install -e . --no-build-isolation` works without a Rust-specific
build backend.
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

REPO_ROOT = Path(__file__).resolve().parent

CDYLIB_NAMES = ("libicx_py.so", "libicx_py.dylib", "icx_py.dll")


class CargoExtension(Extension):
    def __init__(self, name: str, package: str) -> None:
        super().__init__(name, sources=[])
        self.package = package


class CargoBuildExt(build_ext):
    def build_extension(self, ext: CargoExtension) -> None:
        subprocess.run(
            ["cargo", "build", "--release", "--package", ext.package],
            cwd=REPO_ROOT,
            check=True,
        )
        release_dir = REPO_ROOT / "target" / "release"
        built = next(
            (release_dir / name for name in CDYLIB_NAMES if (release_dir / name).exists()),
            None,
        )
        if built is None:
            raise FileNotFoundError(f"cargo succeeded but no cdylib found under {release_dir}")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)


setup(
    packages=[],
    py_modules=[],
    ext_modules=[CargoExtension("icx_py", package="icx-py")],
    cmdclass={"build_ext": CargoBuildExt},
)
