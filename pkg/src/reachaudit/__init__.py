"""Reachability audits of user agency in recommender systems."""

from .core import (
    ActionKind,
    ActionSpace,
    EpsilonGreedy,
    RatingsDataset,
    Softmax,
    TargetSet,
    Top1,
    rank_of,
    rule_distribution,
    softmax_distribution,
)
from .errors import DataError, DomainError, NumericError, ParseError, ReachError
from .models import FactorModel, LinearWeightModel, UpdateConfig, affine_update, predict_scores
from .solver import ReachProblem, Reachable, max_reachability, top1_reachable

__all__ = [
    "ActionKind",
    "ActionSpace",
    "EpsilonGreedy",
    "RatingsDataset",
    "Softmax",
    "TargetSet",
    "Top1",
    "rank_of",
    "rule_distribution",
    "softmax_distribution",
    "DataError",
    "DomainError",
    "NumericError",
    "ParseError",
    "ReachError",
    "FactorModel",
    "LinearWeightModel",
    "UpdateConfig",
    "affine_update",
    "predict_scores",
    "ReachProblem",
    "Reachable",
    "max_reachability",
    "top1_reachable",
]
