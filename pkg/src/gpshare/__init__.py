"""Shared compositional covariance structures for multiple time series."""

from gpshare.errors import (
    AllPruned,
    ConstantSeries,
    DuplicateTime,
    NoActiveComponent,
    NonFinite,
    NotPsd,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "AllPruned",
    "ConstantSeries",
    "DuplicateTime",
    "NoActiveComponent",
    "NonFinite",
    "NotPsd",
    "ParseError",
]
