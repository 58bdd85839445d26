"""Correlated attention for multivariate time series.

Lagged cross-correlation scoring with TopK lag selection, four attention
mechanisms (self, de-stationary, correlated, mixture-of-head), an
encoder-only model with hand-derived gradients, synthetic data with planted
lags, and a CLI for training, evaluation and benchmarking.
"""

from .attention import (
    CabParams,
    correlated_attention,
    destationary_attention,
    mixture_of_head,
    self_attention,
)
from .numerics import (
    Param,
    check_gradient,
    l2_normalize_cols,
    matmul,
    roll,
    softmax_cols,
)
from .xcorr import (
    LagScoreVector,
    LagSelection,
    score_lags,
    select_lags,
    topk_lags,
    xcorr_all_lags_fft,
    xcorr_all_lags_naive,
)

__all__ = [
    "CabParams", "Param", "LagScoreVector", "LagSelection",
    "self_attention", "destationary_attention", "correlated_attention",
    "mixture_of_head", "check_gradient", "matmul", "softmax_cols",
    "l2_normalize_cols", "roll", "score_lags", "select_lags", "topk_lags",
    "xcorr_all_lags_fft", "xcorr_all_lags_naive",
]

__version__ = "0.1.0"
