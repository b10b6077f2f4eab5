"""Real-valued factorization machine: prediction, training, ridge subsolver.

The trainer alternates an exact coordinate-descent ridge solve for the
bias/linear weights with closed-form coordinate updates of the embedding
entries (the model is linear in each individual parameter, so every update
is the exact 1-d minimizer and the objective never increases).  The same
embedding sweep doubles as the relaxed warm start of the discrete
optimizer, which couples it to a delegate matrix through a trace reward.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, FeatureIndex, SparseInstance, build_feature_index
from .exceptions import DataError, NumericError
from .fileio import CONTAINER_VERSION, FM_MAGIC, atomic_write_bytes
from .linalg import segment_sums

__all__ = [
    "FmModel",
    "TrainConfig",
    "fm_predict",
    "fm_objective",
    "solve_w",
    "fm_train",
    "score_dataset",
    "save_fm",
    "load_fm",
]


@dataclass(frozen=True)
class FmModel:
    """Global bias, linear weights, and a dense k x n embedding matrix."""

    w0: float
    w: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        V = np.ascontiguousarray(self.V, dtype=np.float64)
        if w.ndim != 1 or V.ndim != 2 or V.shape[1] != w.size:
            raise DataError("inconsistent model shapes: need w (n,), V (k, n)")
        if not (np.isfinite(self.w0) and np.all(np.isfinite(w)) and np.all(np.isfinite(V))):
            raise DataError("model parameters must be finite")
        w.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "w0", float(self.w0))

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def k(self) -> int:
        return self.V.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by the real and the discrete trainers.

    alpha is the l2 strength on the linear weights; beta the strength of
    the delegate trace coupling (ignored by the plain real-valued
    trainer).  embed_l2 is an optional shrinkage on the real embeddings,
    for the baseline only.  init_iters and init_fm_sweeps control the
    relaxed warm start of the discrete trainer.
    """

    alpha: float = 1e-2
    beta: float = 1e-2
    k: int = 16
    max_outer_iters: int = 50
    tol: float = 1e-6
    seed: int = 0
    init_scale: float = 0.01
    init_iters: int = 3
    init_fm_sweeps: int = 5
    embed_l2: float = 0.0
    solver: str = "cd"
    sgd_lr: float = 1e-3
    shuffle: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise DataError("k must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.embed_l2 < 0:
            raise DataError("regularization strengths must be >= 0")
        if self.solver not in ("cd", "sgd"):
            raise DataError(f"unknown solver {self.solver!r}")
        if self.max_outer_iters < 0 or self.init_iters < 0 or self.init_fm_sweeps < 0:
            raise DataError("iteration counts must be >= 0")

    def with_(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def fm_predict(m: FmModel, x: SparseInstance) -> float:
    """Score one instance in O(k * nnz) via the per-factor identity.

    The pairwise term is sum_t ((sum_i x_i V_ti)^2 - sum_i x_i^2 V_ti^2) / 2,
    which equals the double loop over feature pairs.
    """
    if x.nnz and (x.indices[0] < 0 or x.indices[-1] >= m.n):
        raise DataError(f"feature index out of range for model with n={m.n}")
    lin = m.w0 + float(m.w[x.indices] @ x.values)
    if x.nnz < 2:
        return lin
    cols = m.V[:, x.indices]
    s = cols @ x.values
    sq = (cols * cols) @ (x.values * x.values)
    return lin + 0.5 * float(s @ s - sq.sum())


def score_dataset(m: FmModel, d: Dataset, chunk: int = 4096) -> np.ndarray:
    """Score every instance, chunk-vectorized over the CSR layout."""
    indptr, indices, values = d.csr
    if indices.size and (indices.min() < 0 or indices.max() >= m.n):
        raise DataError(f"feature index out of range for model with n={m.n}")
    n_inst = len(d)
    out = np.empty(n_inst, dtype=np.float64)
    for a in range(0, n_inst, chunk):
        b = min(a + chunk, n_inst)
        lo, hi = indptr[a], indptr[b]
        ptr = indptr[a:b + 1] - lo
        idx = indices[lo:hi]
        val = values[lo:hi]
        lin = segment_sums(m.w[idx] * val, ptr)[0]
        cols = m.V[:, idx] * val
        s = segment_sums(cols, ptr)
        sq = segment_sums((m.V[:, idx] * m.V[:, idx]) * (val * val), ptr)
        out[a:b] = m.w0 + lin + 0.5 * ((s * s).sum(axis=0) - sq.sum(axis=0))
    return out


def fm_objective(m: FmModel, d: Dataset, cfg: TrainConfig) -> float:
    """Sum of squared residuals plus alpha * ||w||^2."""
    resid = d.targets - score_dataset(m, d)
    return float(resid @ resid + cfg.alpha * (m.w @ m.w))


def solve_w(
    phi: np.ndarray,
    d: Dataset,
    alpha: float,
    index: FeatureIndex = None,
    w0: float = 0.0,
    w: np.ndarray = None,
    tol: float = 1e-10,
    max_sweeps: int = 200,
):
    """Ridge regression of phi on the dataset features by coordinate descent.

    Minimizes sum (phi - w0 - w.x)^2 + alpha * ||w||^2 with an unpenalized
    intercept.  Each coordinate update is the exact 1-d minimizer, so the
    objective is non-increasing; sweeps stop when its relative change drops
    below ``tol``.  With alpha = 0 and collinear features the minimizer is
    not unique; the sweep converges to one of them (warm-start dependent).

    Returns (w0, w).
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (len(d),):
        raise DataError("phi must have one entry per instance")
    if not np.all(np.isfinite(phi)):
        raise DataError("phi must be finite")
    if alpha < 0:
        raise DataError("alpha must be >= 0")
    if len(d) == 0:
        raise DataError("empty dataset")
    if index is None:
        index = build_feature_index(d)
    w = np.zeros(d.n_features) if w is None else np.array(w, dtype=np.float64)

    resid = phi - w0 - _linear_term(d, w)
    obj = float(resid @ resid + alpha * (w @ w))
    for _ in range(max_sweeps):
        shift = float(resid.mean())
        w0 += shift
        resid -= shift
        for j in range(d.n_features):
            rows = index.rows(j)
            xv = index.values(j)
            ss = float(xv @ xv)
            denom = ss + alpha
            if denom == 0.0:
                continue
            new = (float(xv @ resid[rows]) + ss * w[j]) / denom
            delta = new - w[j]
            if delta != 0.0:
                w[j] = new
                resid[rows] -= delta * xv
        new_obj = float(resid @ resid + alpha * (w @ w))
        if abs(obj - new_obj) <= tol * max(1.0, abs(obj)):
            obj = new_obj
            break
        obj = new_obj
    return float(w0), w


def _linear_term(d: Dataset, w: np.ndarray) -> np.ndarray:
    indptr, indices, values = d.csr
    return segment_sums(w[indices] * values, indptr)[0]


def init_embedding_caches(V: np.ndarray, w0: float, w: np.ndarray, d: Dataset):
    """Per-instance factor accumulators S (m x k) and residuals y - yhat."""
    indptr, indices, values = d.csr
    cols = V[:, indices] * values
    S = segment_sums(cols, indptr).T  # (m, k)
    sq = segment_sums((V[:, indices] * V[:, indices]) * (values * values), indptr)
    preds = w0 + _linear_term(d, w) + 0.5 * ((S * S).sum(axis=1) - sq.sum(axis=0))
    return S, d.targets - preds


def embedding_sweep(
    V: np.ndarray,
    S: np.ndarray,
    resid: np.ndarray,
    index: FeatureIndex,
    l2: float = 0.0,
    coupling: float = 0.0,
    delegate: np.ndarray = None,
    order: np.ndarray = None,
):
    """One coordinate-descent sweep over all embedding entries, in place.

    Minimizes the squared loss plus ``l2 * V_tr^2`` and, when ``coupling``
    is positive, ``coupling * V_tr^2 - 2 * coupling * delegate_tr * V_tr``
    per entry.  The model is linear in each entry, so the update is exact
    and S / resid are patched in O(bucket) per entry.
    """
    k = V.shape[0]
    features = order if order is not None else range(V.shape[1])
    for r in features:
        rows = index.rows(r)
        xv = index.values(r)
        if rows.size == 0 and l2 == 0.0 and coupling == 0.0:
            continue
        for t in range(k):
            q = S[rows, t] - xv * V[t, r]
            h = xv * q
            hh = float(h @ h)
            denom = hh + l2 + coupling
            if denom == 0.0:
                continue
            num = float(h @ resid[rows]) + hh * V[t, r]
            if coupling:
                num += coupling * delegate[t, r]
            delta = num / denom - V[t, r]
            if delta != 0.0:
                V[t, r] += delta
                S[rows, t] += xv * delta
                resid[rows] -= h * delta


def fm_train(d: Dataset, cfg: TrainConfig, on_iter=None) -> FmModel:
    """Train a real-valued factorization machine.

    The default solver alternates a ridge solve for (w0, w) with embedding
    coordinate sweeps; its tracked objective (squared loss + alpha*||w||^2
    + embed_l2*||V||_F^2) is non-increasing per outer iteration.  The sgd
    solver is a plain seeded stochastic pass for baseline comparisons and
    carries no monotonicity guarantee.
    """
    if len(d) == 0:
        raise DataError("cannot train on an empty dataset")
    if cfg.solver == "sgd":
        return _fm_train_sgd(d, cfg, on_iter)
    rng = np.random.default_rng(cfg.seed)
    V = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(cfg.k, d.n_features))
    w0 = 0.0
    w = np.zeros(d.n_features)
    index = build_feature_index(d)

    S, resid = init_embedding_caches(V, w0, w, d)
    obj = float(
        resid @ resid + cfg.alpha * (w @ w) + cfg.embed_l2 * (V * V).sum()
    )
    for it in range(cfg.max_outer_iters):
        phi = resid + w0 + _linear_term(d, w)  # targets minus pairwise part
        w0, w = solve_w(phi, d, cfg.alpha, index=index, w0=w0, w=w)
        # rebuild caches exactly once per outer iteration to cap drift
        S, resid = init_embedding_caches(V, w0, w, d)
        embedding_sweep(V, S, resid, index, l2=cfg.embed_l2)
        new_obj = float(
            resid @ resid + cfg.alpha * (w @ w) + cfg.embed_l2 * (V * V).sum()
        )
        if not np.isfinite(new_obj):
            raise NumericError(f"objective diverged at iteration {it}")
        if on_iter is not None:
            on_iter(it, new_obj)
        if abs(obj - new_obj) <= cfg.tol * max(1.0, abs(obj)):
            obj = new_obj
            break
        obj = new_obj
    return FmModel(w0, w, V)


def _fm_train_sgd(d: Dataset, cfg: TrainConfig, on_iter=None) -> FmModel:
    rng = np.random.default_rng(cfg.seed)
    V = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(cfg.k, d.n_features))
    w0 = 0.0
    w = np.zeros(d.n_features)
    y = d.targets
    lr = cfg.sgd_lr
    m = len(d)
    for it in range(cfg.max_outer_iters):
        order = rng.permutation(m)
        for i in order:
            inst = d.instances[i]
            idx, val = inst.indices, inst.values
            cols = V[:, idx]
            s = cols @ val
            pred = w0 + float(w[idx] @ val)
            if idx.size >= 2:
                pred += 0.5 * float(s @ s - ((cols * cols) @ (val * val)).sum())
            g = pred - y[i]
            w0 -= lr * g
            w[idx] -= lr * (g * val + cfg.alpha * w[idx] / m)
            grad_v = np.outer(s, val) - cols * (val * val)
            V[:, idx] -= lr * (g * grad_v + cfg.embed_l2 * cols / m)
        if not (
            np.isfinite(w0) and np.all(np.isfinite(w)) and np.all(np.isfinite(V))
        ):
            raise NumericError(f"objective diverged at iteration {it}")
        if on_iter is not None:
            model = FmModel(w0, w.copy(), V.copy())
            on_iter(it, fm_objective(model, d, cfg))
    return FmModel(w0, w, V)


def save_fm(m: FmModel, path: str):
    """Self-describing binary container; all multi-byte fields little-endian."""
    header = FM_MAGIC + struct.pack("<IQQ", CONTAINER_VERSION, m.n, m.k)
    payload = (
        struct.pack("<d", m.w0)
        + m.w.astype("<f8").tobytes()
        + m.V.astype("<f8").tobytes()
    )
    atomic_write_bytes(path, header + payload)


def load_fm(path: str) -> FmModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FM_MAGIC:
        raise DataError(f"{path}: not a real-valued model file")
    version, n, k = struct.unpack_from("<IQQ", blob, 4)
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize("<IQQ")
    (w0,) = struct.unpack_from("<d", blob, off)
    off += 8
    w = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    V = np.frombuffer(blob, dtype="<f8", count=n * k, offset=off).astype(np.float64)
    return FmModel(w0, w, V.reshape(k, n))
