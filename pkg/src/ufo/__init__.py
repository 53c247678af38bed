"""Lazily materialized, larger-than-memory numpy arrays backed by population functions."""

from .api import (Core, CoreParams, ReadOnlyWriteWarning, UfoHandle, core_init, core_shutdown,
                  current_core, ufo_free, ufo_new, ufo_read, ufo_write)
from .backends import (CsvIndex, FileSpec, FillSpec, SeqSpec, csv_config, csv_scan, file_config,
                       fill_config, seq_config)
from .errors import CoreError, NestedUfoAccess, UfoError, UfoFreed, UfoPoisoned
from .layout import UfoConfig, UfoLayout, compute_layout
from .store import WaterMarks

__all__ = [
    "Core", "CoreParams", "ReadOnlyWriteWarning", "UfoHandle", "core_init", "core_shutdown",
    "current_core", "ufo_free", "ufo_new", "ufo_read", "ufo_write",
    "CsvIndex", "FileSpec", "FillSpec", "SeqSpec", "csv_config", "csv_scan", "file_config",
    "fill_config", "seq_config",
    "CoreError", "NestedUfoAccess", "UfoError", "UfoFreed", "UfoPoisoned",
    "UfoConfig", "UfoLayout", "compute_layout", "WaterMarks",
]
