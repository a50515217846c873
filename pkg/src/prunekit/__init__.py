"""Pattern-based pruning, compressed storage, compiled sparse convolution and
composability-based pruning exploration."""

__version__ = "0.1.0"
