"""Set-level contrastive pretraining over precomputed clip features."""

__version__ = "0.1.0"
