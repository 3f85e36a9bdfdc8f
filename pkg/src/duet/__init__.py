"""Dual-view contrastive pretraining for legal judgment prediction, numpy edition.

Modules: ``corpus`` (data, vocabulary), ``encoder`` (mean-pool encoder and
checkpoints), ``objective`` (InfoNCE losses), ``miner`` (hard negatives),
``verbalizer`` (decision text), ``trainer`` (pretraining and fine-tuning),
``evaluation`` (metrics, DBI) and ``cli``.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
