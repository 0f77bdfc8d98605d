from .windows import (DatasetSpec, Recording, SensorWindow, WindowSet, expected_window_count,
                      fill_missing, window_offsets, window_series, window_stride)
from .splits import FoldSplit, make_fold_splits, partition_and_balance
from .loaders import prepare_dataset, cache_path

__all__ = [
    "DatasetSpec", "Recording", "SensorWindow", "WindowSet", "expected_window_count", "fill_missing",
    "window_offsets", "window_series", "window_stride", "FoldSplit", "make_fold_splits",
    "partition_and_balance", "prepare_dataset", "cache_path",
]
