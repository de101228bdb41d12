"""
Synthetic morph data: generation, storage and batching.
"""

from data.dataset import (  # noqa: F401
    SPLITS,
    Dataset,
    DatasetParams,
    gen_dataset,
    load_dataset,
    save_dataset,
)
