"""Graph structure learning by co-evolving topology and multimodal latents."""
__version__ = "0.1.0"
