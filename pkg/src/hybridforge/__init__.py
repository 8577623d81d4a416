"""hybridforge: compose hybrid SSM / latent-attention LMs from a transformer."""

__version__ = "0.1.0"
