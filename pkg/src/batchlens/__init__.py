"""batchlens: a minimal convolutional-network training framework for
studying how batch-normalization statistics couple the images of a batch,
and what a network learns when every training batch is balanced (one image
per class)."""

__version__ = "0.1.0"
