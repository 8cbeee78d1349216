"""Learned image compression with segmentation directly on the latent.

A small numpy autodiff core drives a convolutional codec (compressor and
decompressor), an n-bit quantiser, canonical Huffman coding into ``.lcr``
containers, and a ResNet-sm segmentation network with a dual-graph head that
runs either on images or on dequantised latents.
"""
from .errors import LatentSegError

__version__ = "0.1.0"
__all__ = ["LatentSegError", "__version__"]
