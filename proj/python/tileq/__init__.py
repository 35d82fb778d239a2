"""Tiled low-rank quantization for MoE expert weights.

Thin re-export of the compiled extension module. Build the extension either
via the main CMake project (target ``_tileq``, put its directory plus this
package's parent on ``PYTHONPATH``) or via ``pip install .`` using the
scikit-build-core configuration in ``pyproject.toml``.
"""

from _tileq import (  # noqa: F401
    TileqError,
    forward_from_artifact,
    quantize_moe,
    route,
    sketch_lowrank,
)

__all__ = [
    "TileqError",
    "forward_from_artifact",
    "quantize_moe",
    "route",
    "sketch_lowrank",
]
