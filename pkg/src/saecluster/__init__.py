"""Company-similarity clustering from summed sparse-autoencoder features."""

__version__ = "0.1.0"
