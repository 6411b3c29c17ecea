"""Layer-output caching for flow-matching Diffusion Transformer inference."""

__version__ = "0.1.0"
