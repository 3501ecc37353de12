"""
MADF Inpainting Toolkit
Mask-aware dynamic filtering encoder with point-wise normalized refinement
decoders, trained from scratch on numpy
"""

__version__ = "1.0.0"
