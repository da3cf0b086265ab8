"""Guide-masked in-batch negative selection for contrastive embedding training.

A desk-scale engine: a hashed bag-of-tokens encoder with exact gradients,
four in-batch negative strategies (assigned, bidirectional, full batch,
guided), a temperature-scaled contrastive loss, triplet mining, a synthetic
planted-noise corpus generator, and retrieval/STS/classification metrics.
"""
from .errors import ConfigError, ContractError, DataError, GistError
from .kernels import BACKEND
from .selection import Strategy

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "ContractError", "DataError", "GistError", "Strategy",
           "__version__"]
