"""VGG-19 checkpoint to .dtpw converter."""

from .export import (
    ExportError,
    VGG19_CONVS,
    export,
    main,
    write_synthetic_checkpoint,
)

__version__ = "1.0.0"

__all__ = [
    "ExportError",
    "VGG19_CONVS",
    "export",
    "main",
    "write_synthetic_checkpoint",
]
