from app.data.pipeline import (
    Batch,
    ImagePair,
    augment,
    batches,
    denormalize,
    load_dataset,
    normalize,
    read_manifest,
    scan_directory,
)
from app.data.synth import SynthOracle, synth_generate
from app.data.io import load_oracle, write_dataset

__all__ = [
    "Batch",
    "ImagePair",
    "augment",
    "batches",
    "denormalize",
    "load_dataset",
    "normalize",
    "read_manifest",
    "scan_directory",
    "SynthOracle",
    "synth_generate",
    "load_oracle",
    "write_dataset",
]
