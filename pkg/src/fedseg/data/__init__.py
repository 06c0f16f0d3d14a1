"""Synthetic dataset generation, splitting, preprocessing and file I/O."""
from .generate import GenConfig, Sample, generate_dataset, generate_sample, sample_rng
from .io import export_dataset, import_dataset, read_pbm, read_pgm, write_pbm, write_pgm
from .preprocess import preprocess, preprocess_image, preprocess_mask, to_arrays
from .splits import (
    CLIENT_VAL_FRACTION,
    POOLED_VAL_FRACTION,
    PartitionPlan,
    Split,
    SplitPlan,
    client_splits,
    iid_partition,
    pooled_split,
    split_test,
    split_train_val,
)

__all__ = [
    "GenConfig", "Sample", "generate_dataset", "generate_sample", "sample_rng",
    "export_dataset", "import_dataset", "read_pbm", "read_pgm", "write_pbm", "write_pgm",
    "preprocess", "preprocess_image", "preprocess_mask", "to_arrays",
    "CLIENT_VAL_FRACTION", "POOLED_VAL_FRACTION", "PartitionPlan", "Split", "SplitPlan",
    "client_splits", "iid_partition", "pooled_split", "split_test", "split_train_val",
]
