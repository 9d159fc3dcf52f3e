"""prockb: hierarchical procedure knowledge-base construction and evaluation."""

__version__ = "0.1.0"
