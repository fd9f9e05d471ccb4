"""Desk-scale discrete audio modeling: VQ codec, token language model, continuation."""

__version__ = "0.1.0"
