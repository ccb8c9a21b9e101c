"""Scar-mask synthesis, masked diffusion math and AHA-17 evaluation for LGE volumes."""

from .volume import LabelVolume, Mask3, Volume3

__version__ = "0.1.0"
__all__ = ["Volume3", "Mask3", "LabelVolume"]
