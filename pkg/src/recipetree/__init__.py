"""Cross-modal recipe/dish-image retrieval with latent-tree text encoders."""

__version__ = "0.1.0"
