"""Image-to-image translation with a ViT generator and PatchGAN discriminators, on numpy."""

__version__ = "0.1.0"
