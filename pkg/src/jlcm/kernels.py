"""Backend selection for the hot kernels.

The compiled extension ``jlcm._kernels`` is used when it imports cleanly;
otherwise (or when ``JLCM_PURE_PYTHON`` is set) the numpy fallback is used.
Both backends return identical results.
"""
from __future__ import annotations

import importlib
import os
from types import ModuleType

KERNEL_NAMES = (
    "pack_bits",
    "unpack_bits",
    "nearest_codeword",
    "kmeans1d_dp",
    "ward_1d",
    "ward_general",
    "proximal_matrix",
)


def load_backend(name: str) -> ModuleType:
    """Import a backend by name: ``"cython"`` or ``"python"``."""
    if name == "cython":
        return importlib.import_module("jlcm._kernels")
    if name == "python":
        return importlib.import_module("jlcm._fallback")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def _select() -> tuple[str, ModuleType]:
    if os.environ.get("JLCM_PURE_PYTHON"):
        return "python", load_backend("python")
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()

pack_bits = _impl.pack_bits
unpack_bits = _impl.unpack_bits
nearest_codeword = _impl.nearest_codeword
kmeans1d_dp = _impl.kmeans1d_dp
ward_1d = _impl.ward_1d
ward_general = _impl.ward_general
proximal_matrix = _impl.proximal_matrix
