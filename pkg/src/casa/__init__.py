"""Data-free LoRA transfer onto fine-tuned models by cluster-aware spectral arbitration."""

__version__ = "0.1.0"

from .arbitration import CasaConfig, transfer_layer, transfer_model  # noqa: E402
from .spectral import SvdTriple, svd  # noqa: E402
from .tensor_store import (  # noqa: E402
    DeltaMap,
    LoraAdapter,
    WeightMap,
    load_checkpoint,
    pair_lora,
    save_checkpoint,
)

__all__ = [
    "CasaConfig", "DeltaMap", "LoraAdapter", "SvdTriple", "WeightMap",
    "load_checkpoint", "pair_lora", "save_checkpoint", "svd",
    "transfer_layer", "transfer_model",
]
