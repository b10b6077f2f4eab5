"""Factorization machines with binary feature codes.

Learns one k-bit code per sparse feature dimension directly, by mixed
discrete/continuous alternating optimization, and scores user-item feature
vectors with xor/popcount instead of float multiplies.
"""

from .binarycodes import (
    CodeMatrix,
    DfmModel,
    code_dot,
    dfm_predict,
    dfm_predict_pairwise,
    load_dfm,
    pack,
    save_dfm,
    score_items,
    unpack,
)
from .data import (
    Dataset,
    FeatureIndex,
    SparseInstance,
    build_feature_index,
    parse_libfm,
    serialize_libfm,
    split_per_user,
)
from .dfmopt import (
    DelegateMatrix,
    OptState,
    initialize,
    sgn,
    soft_objective,
    train_dfm,
    update_B,
    update_D,
    update_w,
)
from .evalbench import (
    BenchReport,
    RankingRun,
    eval_grid,
    measure_ttc,
    ndcg_at_k,
    ranking_run_from_scores,
)
from .exceptions import DataError, NumericError, ParseError
from .fmcore import (
    FmModel,
    TrainConfig,
    fm_objective,
    fm_predict,
    fm_train,
    load_fm,
    save_fm,
    solve_w,
)

__version__ = "0.1.0"

__all__ = [
    "CodeMatrix",
    "DfmModel",
    "code_dot",
    "dfm_predict",
    "dfm_predict_pairwise",
    "load_dfm",
    "pack",
    "save_dfm",
    "score_items",
    "unpack",
    "Dataset",
    "FeatureIndex",
    "SparseInstance",
    "build_feature_index",
    "parse_libfm",
    "serialize_libfm",
    "split_per_user",
    "DelegateMatrix",
    "OptState",
    "initialize",
    "sgn",
    "soft_objective",
    "train_dfm",
    "update_B",
    "update_D",
    "update_w",
    "BenchReport",
    "RankingRun",
    "eval_grid",
    "measure_ttc",
    "ndcg_at_k",
    "ranking_run_from_scores",
    "DataError",
    "NumericError",
    "ParseError",
    "FmModel",
    "TrainConfig",
    "fm_objective",
    "fm_predict",
    "fm_train",
    "load_fm",
    "save_fm",
    "solve_w",
]
