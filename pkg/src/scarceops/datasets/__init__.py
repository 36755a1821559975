from .container import SPLITS, UNLABELED, ImageContainer, export_npz, import_npz
from .npy import NpyFormatError, UnsupportedLayoutError, read_npy, read_npz, write_npy, write_npz
from .store import TASK_KINDS, DatasetRecord, DatasetStore, ImageRef, validate_name

__all__ = [
    "SPLITS",
    "UNLABELED",
    "ImageContainer",
    "import_npz",
    "export_npz",
    "NpyFormatError",
    "UnsupportedLayoutError",
    "read_npy",
    "read_npz",
    "write_npy",
    "write_npz",
    "TASK_KINDS",
    "DatasetRecord",
    "DatasetStore",
    "ImageRef",
    "validate_name",
]
