"""Quotation recommendation for conversations.

A hierarchical conversation encoder (transformer per turn, Bi-GRU across
turns), a separate quotation encoder, and a learned linear map from the
query-turn space into the quotation space, trained with cross entropy
plus a mapping loss.
"""

from .config import TrainConfig
from .model import QuoteRecModel, RankedResult, predict
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = ["GradTape", "QuoteRecModel", "RankedResult", "Tensor", "TrainConfig", "predict"]
