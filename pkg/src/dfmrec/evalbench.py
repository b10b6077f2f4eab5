"""Ranking-quality evaluation (NDCG@K) and the float-vs-binary timing study.

NDCG convention: gain 2^rel - 1, discount 1/log2(rank + 1), ideal ordering
by true rating; a user whose ideal DCG is zero scores 1.0.  Ties in
predicted score break by ascending item id so evaluation is reproducible.
"""

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import binarycodes, fmcore
from .data import Dataset
from .exceptions import DataError
from .fmcore import TrainConfig
from .dfmopt import train_dfm

__all__ = [
    "RankingRun",
    "NdcgResult",
    "BenchReport",
    "GridRow",
    "ndcg_at_k",
    "ranking_run_from_scores",
    "measure_ttc",
    "eval_grid",
    "format_bench_text",
    "grid_csv",
    "ndcg_csv",
]

# Published acceleration ratios for a tuned C++ implementation pair on
# full-scale corpora, shown in reports as context for measured ratios.
REFERENCE_RATIO_BAND = (13.19, 17.51)


@dataclass(frozen=True)
class RankingRun:
    """Per-user ranked candidates: user -> [(item id, score, true rating)]."""

    per_user: Dict[int, List[Tuple[int, float, float]]]
    k_max: int

    def __post_init__(self):
        if self.k_max < 1:
            raise DataError("k_max must be >= 1")
        for user, items in self.per_user.items():
            if not items:
                raise DataError(f"user {user} has no ranked items")
            for _, score, rating in items:
                if not (math.isfinite(score) and math.isfinite(rating)):
                    raise DataError(f"non-finite entry for user {user}")


@dataclass(frozen=True)
class NdcgResult:
    per_user: Dict[int, float]
    mean: float


def _dcg(ratings: Sequence[float], K: int) -> float:
    return sum(
        (2.0 ** rel - 1.0) / math.log2(p + 2) for p, rel in enumerate(ratings[:K])
    )


def ndcg_at_k(run: RankingRun, K: int) -> NdcgResult:
    """NDCG@K per user plus the mean over users."""
    if K < 1:
        raise DataError("K must be >= 1")
    if K > run.k_max:
        raise DataError(f"K={K} exceeds run.k_max={run.k_max}")
    per_user = {}
    for user, items in run.per_user.items():
        ranked = sorted(items, key=lambda e: (-e[1], e[0]))
        rels = [rating for _, _, rating in ranked]
        ideal = sorted(rels, reverse=True)
        idcg = _dcg(ideal, K)
        per_user[user] = _dcg(rels, K) / idcg if idcg > 0.0 else 1.0
    mean = sum(per_user.values()) / len(per_user) if per_user else 0.0
    return NdcgResult(per_user, mean)


def ranking_run_from_scores(
    d: Dataset, scores: np.ndarray, k_max: int = 10
) -> RankingRun:
    """Group model scores of a test set by user for NDCG evaluation."""
    if d.user_field is None or d.item_field is None:
        raise DataError("ranking evaluation needs user_field and item_field")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(d),):
        raise DataError("need one score per test instance")
    per_user: Dict[int, List[Tuple[int, float, float]]] = {}
    for inst, score in zip(d.instances, scores):
        per_user.setdefault(d.user_of(inst), []).append(
            (d.item_of(inst), float(score), inst.target)
        )
    return RankingRun(per_user, k_max)


@dataclass(frozen=True)
class BenchReport:
    """One float-vs-binary timing comparison at a fixed code length."""

    code_length: int
    ttc_float: float
    ttc_binary: float
    acceleration_ratio: float
    instance_count: int
    n_features: int
    nnz_total: int
    nnz_mean: float
    nnz_max: int
    repetitions: int
    binary_path: str
    threads: int


def measure_ttc(
    fm_model: fmcore.FmModel,
    dfm_model: binarycodes.DfmModel,
    test: Dataset,
    repetitions: int = 3,
    chunk: int = 4096,
    binary_path: str = "pairs",
    threads: int = 1,
) -> BenchReport:
    """Time full-test-set scoring for the float and the binary model.

    Both models score the identical instance stream; when the dataset has a
    user field the timed region also ranks each user's items.  One warm-up
    pass runs first, then the best of ``repetitions`` wall-clock times is
    kept per model.
    """
    if len(test) == 0:
        raise DataError("empty test set")
    if fm_model.k != dfm_model.k:
        raise DataError("models disagree on code length")
    user_slices = None
    if test.user_field is not None:
        groups: Dict[int, list] = {}
        for i, inst in enumerate(test.instances):
            groups.setdefault(test.user_of(inst), []).append(i)
        user_slices = [np.asarray(ids, dtype=np.int64) for ids in groups.values()]

    def rank(scores):
        if user_slices is not None:
            for ids in user_slices:
                np.argsort(-scores[ids], kind="stable")

    def run_float():
        rank(fmcore.score_dataset(fm_model, test, chunk=chunk))

    def run_binary():
        rank(binarycodes.score_dataset(dfm_model, test, chunk=chunk, path=binary_path))

    def best_of(fn) -> float:
        fn()  # warm-up, excluded
        best = math.inf
        for _ in range(max(repetitions, 1)):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    ttc_float = best_of(run_float)
    ttc_binary = best_of(run_binary)
    nnz = np.asarray([inst.nnz for inst in test.instances])
    return BenchReport(
        code_length=dfm_model.k,
        ttc_float=ttc_float,
        ttc_binary=ttc_binary,
        acceleration_ratio=ttc_float / ttc_binary,
        instance_count=len(test),
        n_features=test.n_features,
        nnz_total=int(nnz.sum()),
        nnz_mean=float(nnz.mean()),
        nnz_max=int(nnz.max()),
        repetitions=repetitions,
        binary_path=binary_path,
        threads=threads,
    )


def format_bench_text(reports: Sequence[BenchReport]) -> str:
    """Plain-text summary: code-length columns, TTC rows, ratio row."""
    reports = sorted(reports, key=lambda r: r.code_length)
    cols = [f"{r.code_length}" for r in reports]
    width = max(12, *(len(c) for c in cols)) + 2
    rows = [
        ("Code Length", cols),
        ("float TTC (s)", [f"{r.ttc_float:.4f}" for r in reports]),
        ("binary TTC (s)", [f"{r.ttc_binary:.4f}" for r in reports]),
        ("Acceleration Ratio", [f"{r.acceleration_ratio:.2f}" for r in reports]),
    ]
    label_w = max(len(label) for label, _ in rows)
    lines = []
    for label, cells in rows:
        lines.append(
            label.ljust(label_w) + " |" + "".join(c.rjust(width) for c in cells)
        )
    r0 = reports[0]
    lines.append("")
    lines.append(
        f"instances={r0.instance_count} n_features={r0.n_features} "
        f"nnz_mean={r0.nnz_mean:.2f} repetitions={r0.repetitions} "
        f"binary_path={r0.binary_path} threads={r0.threads}"
    )
    lo, hi = REFERENCE_RATIO_BAND
    lines.append(
        f"Reference acceleration band: {lo:.2f}-{hi:.2f} (reported for a tuned "
        "C++ implementation pair on full-scale corpora; the ratio depends on "
        "the implementation pair and the machine, so treat it as context, "
        "not a target)."
    )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GridRow:
    """One hyperparameter cell: trained model quality at K = 1..10."""

    beta: float
    k: int
    status: str  # "ok" | "failed"
    ndcg: Optional[Tuple[float, ...]]  # NDCG@1..@10 when status == "ok"
    error: str = ""


def eval_grid(
    train: Dataset,
    test: Dataset,
    cfg: TrainConfig,
    betas: Sequence[float],
    ks: Sequence[int],
    k_eval: int = 10,
    on_cell: Callable = None,
) -> List[GridRow]:
    """Train one binary model per (beta, k) cell and evaluate NDCG@1..k_eval.

    A failing cell is marked "failed" and the sweep continues.  Output is a
    deterministic function of (data, grid, cfg.seed).
    """
    if not betas or not ks:
        raise DataError("empty hyperparameter grid")
    rows: List[GridRow] = []
    for k in ks:
        for beta in betas:
            cell_cfg = cfg.with_(beta=float(beta), k=int(k))
            try:
                model = train_dfm(train, cell_cfg)
                scores = binarycodes.score_dataset(model, test, path="st")
                run = ranking_run_from_scores(test, scores, k_max=k_eval)
                ndcgs = tuple(ndcg_at_k(run, K).mean for K in range(1, k_eval + 1))
                row = GridRow(float(beta), int(k), "ok", ndcgs)
            except (DataError, ArithmeticError, RuntimeError) as exc:
                row = GridRow(float(beta), int(k), "failed", None, error=str(exc))
            rows.append(row)
            if on_cell is not None:
                on_cell(row)
    return rows


def grid_csv(rows: Sequence[GridRow], k_eval: int = 10) -> str:
    """Fixed-header CSV; floats carry 6 significant digits."""
    header = "beta,k,status," + ",".join(f"ndcg@{K}" for K in range(1, k_eval + 1))
    lines = [header]
    for row in rows:
        cells = [f"{row.beta:.6g}", str(row.k), row.status]
        if row.ndcg is None:
            cells.extend([""] * k_eval)
        else:
            cells.extend(f"{v:.6g}" for v in row.ndcg)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def ndcg_csv(means: Sequence[float]) -> str:
    """CSV of the evaluation command: one row per cutoff K."""
    lines = ["K,ndcg"]
    for K, value in enumerate(means, start=1):
        lines.append(f"{K},{value:.6g}")
    return "\n".join(lines) + "\n"
