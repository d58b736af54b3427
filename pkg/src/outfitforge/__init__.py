"""Outfit compatibility and personalized outfit generation on a small numpy autodiff core.

Modules:

- ``tensor_core``: tape autodiff, attention, layer norm, Adam, gradient checking
- ``data``: item/outfit/behavior records, file formats, the synthetic world
- ``embedding``: multi-modal item embedding trained with a triplet loss
- ``fom``: masked-item Transformer for outfit compatibility (FITB, CP)
- ``pog``: history encoder plus autoregressive outfit decoder and generation
- ``evalsim``: FITB/CP evaluation, item-item CF baseline, click simulator
- ``checkpoint``: binary checkpoints and run manifests
- ``cli``: the ``outfitforge`` command
"""
from . import checkpoint, data, embedding, evalsim, fom, pog, tensor_core

__all__ = ["checkpoint", "data", "embedding", "evalsim", "fom", "pog", "tensor_core"]
__version__ = "0.1.0"
