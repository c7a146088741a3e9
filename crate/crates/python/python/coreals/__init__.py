from ._coreals import (
    Factors,
    FitReport,
    RatingMatrix,
    ces_sketch,
    fit,
    hit_at_k,
    ndcg_at_k,
    prmse,
    psnr,
    rmse,
    synth,
)

__all__ = [
    "Factors",
    "FitReport",
    "RatingMatrix",
    "ces_sketch",
    "fit",
    "hit_at_k",
    "ndcg_at_k",
    "prmse",
    "psnr",
    "rmse",
    "synth",
]
