"""Discrete training of binary feature codes by alternating optimization.

The softened objective is

    sum (y - yhat)^2  +  alpha * ||w||^2  -  2 * beta * trace(B^T D)

over codes B in {-1,+1}^(k x n), a real delegate D constrained to have
zero row sums (balance) and D D^T = n I (de-correlation), and linear
weights (w0, w).  Three subproblems are solved in turn:

  * B: discrete coordinate descent, one bit at a time; each bit takes the
    sign of its update statistic and is left alone when that statistic is
    exactly zero.
  * D: a closed form built from centering, a small eigendecomposition,
    and a Gram-Schmidt completion; it maximizes trace(B^T D) over the
    constraint set exactly, so it never increases the objective.
  * w: ridge regression on the residual left after the code interactions.

The warm start solves the relaxed problem (real embeddings coupled to the
delegate) and rounds signs at the end.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .binarycodes import CodeMatrix, DfmModel, pack
from .data import Dataset, FeatureIndex, build_feature_index
from .exceptions import DataError, NumericError
from .fileio import CKPT_MAGIC, CONTAINER_VERSION, atomic_write_bytes
from .fmcore import (
    TrainConfig,
    embedding_sweep,
    init_embedding_caches,
    solve_w,
    _linear_term,
)
from .linalg import jacobi_eigh, orthonormal_complement, segment_sums

__all__ = [
    "DelegateMatrix",
    "OptState",
    "sgn",
    "soft_objective",
    "update_B",
    "update_D",
    "update_w",
    "initialize",
    "train_dfm",
    "save_checkpoint",
    "load_checkpoint",
]

BALANCE_TOL = 1e-8       # * sqrt(n), on ||D 1||_inf
DECORRELATION_TOL = 1e-6  # * n, on max |D D^T - n I|
AUDIT_EVERY = 10          # bit sweeps between full cache rebuilds


def sgn(x: float) -> int:
    """+1 for x >= 0, -1 otherwise; rejects NaN."""
    if math.isnan(x):
        raise NumericError("sgn of NaN")
    return 1 if x >= 0 else -1


def _sign_matrix(a: np.ndarray) -> np.ndarray:
    if np.isnan(a).any():
        raise NumericError("sign rounding hit NaN")
    return np.where(a >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class DelegateMatrix:
    """Real k x n matrix with zero row sums and D D^T = n I.

    Validated on construction against the tolerances the optimizer relies
    on: ||D 1||_inf <= 1e-8 sqrt(n) and max |D D^T - n I| <= 1e-6 n.
    """

    D: np.ndarray

    def __post_init__(self):
        D = np.ascontiguousarray(self.D, dtype=np.float64)
        if D.ndim != 2:
            raise DataError("delegate must be a 2-d matrix")
        k, n = D.shape
        balance = np.abs(D.sum(axis=1)).max(initial=0.0)
        if balance > BALANCE_TOL * math.sqrt(n):
            raise NumericError(f"delegate row sums too large: {balance:.3e}")
        gram_err = np.abs(D @ D.T - n * np.eye(k)).max(initial=0.0)
        if gram_err > DECORRELATION_TOL * n:
            raise NumericError(f"delegate rows not de-correlated: {gram_err:.3e}")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)

    @property
    def k(self) -> int:
        return self.D.shape[0]

    @property
    def n(self) -> int:
        return self.D.shape[1]


def update_D(b, rng=None, rank_tol: float = None) -> DelegateMatrix:
    """Closed-form delegate maximizing trace(B^T D) under the constraints.

    Works on a CodeMatrix or any real k x n matrix (the warm start applies
    it to real embeddings).  Procedure: center the rows, eigendecompose the
    small k x k Gram matrix, recover the leading right singular vectors,
    complete the basis with random directions orthogonalized against the
    recovered ones and the all-ones vector, and scale by sqrt(n).

    ``rng`` seeds the completion draws (only consumed when the centered
    matrix is rank deficient); an int or None is also accepted.
    """
    if isinstance(b, CodeMatrix):
        m = b.signs().astype(np.float64)
    else:
        m = np.asarray(b, dtype=np.float64)
        if m.ndim != 2:
            raise DataError("expected a k x n matrix")
    k, n = m.shape
    if k > n - 1:
        raise DataError(
            f"insufficient features for de-correlated delegate (k={k}, n={n})"
        )
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    centered = m - m.mean(axis=1, keepdims=True)
    gram = centered @ centered.T
    gram = 0.5 * (gram + gram.T)
    evals, evecs = jacobi_eigh(gram)
    if rank_tol is None:
        # Recovering a right singular vector divides by sqrt(eigenvalue), so
        # eigenvalues within a few decades of the eigensolver residual
        # reconstruct too inaccurately to keep the output feasible; cut them
        # and let the random completion cover those directions instead.
        eps = np.finfo(np.float64).eps
        rank_tol = max(
            1e-5 * float(np.linalg.norm(gram)),
            max(k, n) * eps * max(evals.max(initial=0.0), 0.0),
        )
    pos = evals > rank_tol
    P = evecs[:, pos]
    sigma = np.sqrt(evals[pos])
    Q = (centered.T @ P) / sigma
    ones = np.full((n, 1), 1.0 / math.sqrt(n))
    Q -= ones @ (ones.T @ Q)  # centering hygiene for near-null directions
    n_missing = k - P.shape[1]
    if n_missing:
        P_hat = evecs[:, ~pos]
        Q_hat = orthonormal_complement(np.hstack([Q, ones]), n_missing, rng)
        D = math.sqrt(n) * (P @ Q.T + P_hat @ Q_hat.T)
    else:
        D = math.sqrt(n) * (P @ Q.T)
    return DelegateMatrix(D)


@dataclass
class OptState:
    """Mutable optimizer state: codes, delegate, linear part, caches.

    ``signs`` is the unpacked working copy of the code matrix (entries
    ±1).  ``S[i, t]`` caches sum_j x_ij * signs[t, j] per instance and
    ``preds`` the current predictions, so a bit flip is patched in O(|V_r|)
    instead of a full rescore.  ``refresh`` rebuilds both from scratch;
    ``audit`` additionally fails loudly when the incremental values have
    drifted.
    """

    signs: np.ndarray
    D: np.ndarray
    w0: float
    w: np.ndarray
    S: np.ndarray = None
    preds: np.ndarray = None
    objective_trace: list = field(default_factory=list)
    sweeps: int = 0

    @property
    def k(self) -> int:
        return self.signs.shape[0]

    @property
    def n(self) -> int:
        return self.signs.shape[1]

    def codes(self) -> CodeMatrix:
        return pack(self.signs)

    def model(self) -> DfmModel:
        return DfmModel(self.w0, self.w.copy(), self.codes())

    def _compute_caches(self, d: Dataset):
        indptr, indices, values = d.csr
        S = segment_sums(self.signs[:, indices] * values, indptr).T
        sumsq = segment_sums(values * values, indptr)[0]
        preds = (
            self.w0
            + _linear_term(d, self.w)
            + 0.5 * ((S * S).sum(axis=1) - self.k * sumsq)
        )
        return S, preds

    def refresh(self, d: Dataset):
        self.S, self.preds = self._compute_caches(d)

    def audit(self, d: Dataset, tol: float = 1e-6):
        fresh_S, fresh_preds = self._compute_caches(d)
        drift = float(np.abs(self.preds - fresh_preds).max(initial=0.0))
        if drift > tol:
            raise NumericError(f"prediction cache drifted by {drift:.3e}")
        self.S, self.preds = fresh_S, fresh_preds
        return drift


def soft_objective(state: OptState, d: Dataset, cfg: TrainConfig) -> float:
    """Squared loss + alpha*||w||^2 - 2*beta*trace(B^T D), from the caches."""
    resid = d.targets - state.preds
    return float(
        resid @ resid
        + cfg.alpha * (state.w @ state.w)
        - 2.0 * cfg.beta * float((state.signs * state.D).sum())
    )


def update_B(
    state: OptState,
    d: Dataset,
    index: FeatureIndex,
    cfg: TrainConfig,
    on_bit=None,
) -> OptState:
    """One discrete coordinate-descent sweep over every (feature, bit).

    For each bit the update statistic is

        bhat = sum over instances with x_r != 0 of
               x_r * rho * (s_t - x_r * b_rt)  +  beta * d_rt

    where rho is the residual with this feature's bit-t interaction put
    back.  The bit becomes sgn(bhat) unless bhat is exactly zero, in which
    case it is left unchanged.  Caches are patched after each flip, so the
    softened objective never increases over the sweep.  ``on_bit`` (if
    given) observes every decision as (r, t, bhat, old_bit, new_bit).
    """
    signs = state.signs
    S, preds = state.S, state.preds
    y = d.targets
    beta, D = cfg.beta, state.D
    k = state.k
    feature_order = np.arange(state.n)
    bit_order = np.arange(k)
    if cfg.shuffle:
        order_rng = np.random.default_rng([cfg.seed, state.sweeps])
        feature_order = order_rng.permutation(feature_order)
        bit_order = order_rng.permutation(bit_order)
    for r in feature_order:
        rows = index.rows(r)
        xv = index.values(r)
        yr = y[rows]
        for t in bit_order:
            b_old = signs[t, r]
            q = S[rows, t] - xv * b_old
            h = xv * q
            bhat = float(h @ (yr - preds[rows] + h * b_old)) + beta * D[t, r]
            if bhat != 0.0:
                new = 1.0 if bhat > 0.0 else -1.0
                if new != b_old:
                    signs[t, r] = new
                    delta = new - b_old
                    S[rows, t] += xv * delta
                    preds[rows] += h * delta
            if on_bit is not None:
                on_bit(int(r), int(t), bhat, b_old, signs[t, r])
    state.sweeps += 1
    if state.sweeps % AUDIT_EVERY == 0:
        state.audit(d)
    return state


def update_w(
    state: OptState, d: Dataset, cfg: TrainConfig, index: FeatureIndex = None
) -> OptState:
    """Ridge-solve (w0, w) on the residual left by the code interactions.

    The pairwise contribution is recovered from the cached predictions, the
    exact convex subproblem is solved by coordinate descent, and the caches
    are patched.  A repeated call is a fixed point.
    """
    lin_old = state.w0 + _linear_term(d, state.w)
    pairwise = state.preds - lin_old
    phi = d.targets - pairwise
    if not np.all(np.isfinite(phi)):
        raise NumericError("predictions became non-finite before the ridge solve")
    w0, w = solve_w(phi, d, cfg.alpha, index=index, w0=state.w0, w=state.w)
    state.w0, state.w = w0, w
    state.preds = pairwise + w0 + _linear_term(d, w)
    return state


def _check_delegate_feasible(cfg: TrainConfig, n: int) -> bool:
    """Whether a balanced, de-correlated delegate exists for this shape.

    k rows orthogonal to each other and to the all-ones vector need
    k <= n - 1.  Without the trace coupling (beta = 0) the optimizer runs
    fine with the delegate dropped; with beta > 0 the shape is an error.
    """
    if cfg.k <= n - 1:
        return True
    if cfg.beta == 0.0:
        return False
    raise DataError(
        f"insufficient features for de-correlated delegate (k={cfg.k}, n={n})"
    )


def initialize(d: Dataset, cfg: TrainConfig, rng=None) -> OptState:
    """Relaxed warm start: real embeddings coupled to the delegate, rounded.

    Alternates (a) embedding coordinate sweeps on the relaxed objective,
    (b) the closed-form delegate on the real embeddings, (c) the ridge
    solve, for ``cfg.init_iters`` rounds, then rounds the embeddings to
    signs.  With init_iters = 0 the codes are just the rounded random
    initialization after a single ridge pass.
    """
    if len(d) == 0:
        raise DataError("cannot initialize on an empty dataset")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
    n = d.n_features
    delegate_ok = _check_delegate_feasible(cfg, n)
    V = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(cfg.k, n))
    w0 = 0.0
    w = np.zeros(n)
    index = build_feature_index(d)
    D = update_D(V, rng=rng).D if delegate_ok else np.zeros((cfg.k, n))
    S, resid = init_embedding_caches(V, w0, w, d)

    def check_finite():
        if not np.all(np.isfinite(resid)):
            raise NumericError("relaxed warm start diverged")

    check_finite()
    for _ in range(max(cfg.init_iters, 0)):
        for _ in range(cfg.init_fm_sweeps):
            embedding_sweep(V, S, resid, index, coupling=cfg.beta, delegate=D)
        if delegate_ok:
            D = update_D(V, rng=rng).D
        check_finite()
        phi = resid + w0 + _linear_term(d, w)
        w0, w = solve_w(phi, d, cfg.alpha, index=index, w0=w0, w=w)
        S, resid = init_embedding_caches(V, w0, w, d)
        check_finite()
    if cfg.init_iters == 0:
        phi = resid + w0 + _linear_term(d, w)
        check_finite()
        w0, w = solve_w(phi, d, cfg.alpha, index=index, w0=w0, w=w)
    state = OptState(signs=_sign_matrix(V), D=D, w0=w0, w=w)
    state.refresh(d)
    state.objective_trace.append(soft_objective(state, d, cfg))
    return state


def train_dfm(
    d: Dataset, cfg: TrainConfig, on_iter=None, state: OptState = None
) -> DfmModel:
    """Full alternating optimization; returns the packed binary model.

    Each outer iteration runs one bit sweep, one delegate solve, and one
    ridge solve, appending the softened objective to the state's trace.
    Stops when the relative objective change falls below cfg.tol or after
    cfg.max_outer_iters iterations.  Pass a checkpointed ``state`` to
    resume; ``on_iter(i, objective, state)`` observes every iteration.
    """
    index = build_feature_index(d)
    delegate_ok = _check_delegate_feasible(cfg, d.n_features)
    rng = np.random.default_rng([cfg.seed, 0xD])
    if state is None:
        state = initialize(d, cfg, rng=np.random.default_rng(cfg.seed))
    else:
        state.refresh(d)
        if not state.objective_trace:
            state.objective_trace.append(soft_objective(state, d, cfg))
    prev = state.objective_trace[-1]
    for it in range(cfg.max_outer_iters):
        update_B(state, d, index, cfg)
        if delegate_ok:
            state.D = update_D(state.signs, rng=rng).D
        update_w(state, d, cfg, index=index)
        obj = soft_objective(state, d, cfg)
        if not np.isfinite(obj):
            raise NumericError(
                f"objective became non-finite at outer iteration {it}; "
                f"trace={state.objective_trace}"
            )
        state.objective_trace.append(obj)
        if on_iter is not None:
            on_iter(it, obj, state)
        if abs(prev - obj) <= cfg.tol * max(1.0, abs(prev)):
            break
        prev = obj
    return state.model()


def save_checkpoint(state: OptState, path: str):
    """Resumable snapshot: packed codes, linear part, delegate, trace."""
    codes = state.codes()
    trace = np.asarray(state.objective_trace, dtype=np.float64)
    blob = (
        CKPT_MAGIC
        + struct.pack("<IQQ", CONTAINER_VERSION, state.n, state.k)
        + struct.pack("<d", state.w0)
        + np.ascontiguousarray(state.w, dtype="<f8").tobytes()
        + codes.words.astype("<u8").tobytes()
        + np.ascontiguousarray(state.D, dtype="<f8").tobytes()
        + struct.pack("<Q", trace.size)
        + trace.astype("<f8").tobytes()
        + struct.pack("<Q", state.sweeps)
    )
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str) -> OptState:
    """Rebuild an OptState (caches empty; refresh against a dataset)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, n, k = struct.unpack_from("<IQQ", blob, 4)
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize("<IQQ")
    (w0,) = struct.unpack_from("<d", blob, off)
    off += 8
    w = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    nw = (k + 63) // 64
    words = np.frombuffer(blob, dtype="<u8", count=n * nw, offset=off)
    off += 8 * n * nw
    D = np.frombuffer(blob, dtype="<f8", count=n * k, offset=off).astype(np.float64)
    off += 8 * n * k
    (trace_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    trace = np.frombuffer(blob, dtype="<f8", count=trace_len, offset=off)
    off += 8 * trace_len
    (sweeps,) = struct.unpack_from("<Q", blob, off)
    codes = CodeMatrix(n, k, words.reshape(n, nw).copy())
    return OptState(
        signs=codes.signs().astype(np.float64),
        D=D.reshape(k, n),
        w0=w0,
        w=w.copy(),
        objective_trace=trace.tolist(),
        sweeps=sweeps,
    )
