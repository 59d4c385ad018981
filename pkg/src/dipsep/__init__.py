"""Domain-invariant contrastive pretraining frontend for speech separation."""

__version__ = "0.1.0"
