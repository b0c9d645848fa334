"""Scale-equivariant UNets from trainable Gaussian-derivative filter banks."""

__version__ = "0.1.0"
