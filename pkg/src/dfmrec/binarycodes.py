"""Bit-packed {-1,+1} code matrices and popcount-based scoring.

A code matrix stores one k-bit code per feature.  Bit value 1 encodes +1
and 0 encodes -1; each feature occupies ceil(k/64) contiguous little-endian
words, with unused trailing bits kept at zero.  The inner product of two
codes then reduces to ``k - 2 * popcount(xor)``, which is what makes binary
scoring cheap: no float multiplies per embedding dimension.
"""

import struct
import sys
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SparseInstance
from .exceptions import DataError
from .fileio import CONTAINER_VERSION, DFM_MAGIC, atomic_write_bytes
from .linalg import segment_sums

__all__ = [
    "CodeMatrix",
    "DfmModel",
    "pack",
    "unpack",
    "code_dot",
    "dfm_predict",
    "dfm_predict_pairwise",
    "score_items",
    "score_dataset",
    "save_dfm",
    "load_dfm",
]

WORD_BITS = 64


def _words_per_code(k: int) -> int:
    return (k + WORD_BITS - 1) // WORD_BITS


class CodeMatrix:
    """Packed binary embedding matrix for n features, k bits each."""

    __slots__ = ("n", "k", "words")

    def __init__(self, n: int, k: int, words: np.ndarray):
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if k < 1 or n < 0:
            raise DataError("need k >= 1 and n >= 0")
        if words.shape != (n, _words_per_code(k)):
            raise DataError(
                f"words shape {words.shape} != ({n}, {_words_per_code(k)})"
            )
        tail = k % WORD_BITS
        if tail and n and np.any(words[:, -1] >> np.uint64(tail)):
            raise DataError("nonzero trailing bits beyond k")
        words.setflags(write=False)
        self.n = n
        self.k = k
        self.words = words

    @classmethod
    def from_signs(cls, signs) -> "CodeMatrix":
        """Pack a k x n matrix with entries in {-1, +1}."""
        signs = np.asarray(signs)
        if signs.ndim != 2:
            raise DataError("sign matrix must be 2-d (k x n)")
        if signs.size and not np.all(np.abs(signs) == 1):
            raise DataError("sign matrix entries must be +1 or -1")
        k, n = signs.shape
        nw = _words_per_code(k)
        bits = np.zeros((n, nw * WORD_BITS), dtype=np.uint8)
        bits[:, :k] = (signs.T > 0)
        packed = np.packbits(bits, axis=1, bitorder="little")
        words = np.ascontiguousarray(packed).view(np.uint64)
        if sys.byteorder == "big":  # packed bytes are little-endian words
            words = words.byteswap()
        return cls(n, k, words.reshape(n, nw))

    def signs(self) -> np.ndarray:
        """Unpack to a k x n matrix of +1/-1 (int8)."""
        as_bytes = self.words.reshape(self.n, -1)
        if sys.byteorder == "big":
            as_bytes = as_bytes.byteswap()
        bits = np.unpackbits(as_bytes.view(np.uint8), axis=1, bitorder="little")
        return (bits[:, : self.k].T.astype(np.int8) * 2 - 1)

    @property
    def word_count(self) -> int:
        """Total words of storage: n * ceil(k/64)."""
        return self.words.size

    def feature_signs(self, indices) -> np.ndarray:
        """Rows of ±1 codes (len(indices) x k) for the given feature ids."""
        sel = self.words[indices]
        if sys.byteorder == "big":
            sel = sel.byteswap()
        bits = np.unpackbits(
            sel.reshape(len(indices), -1).view(np.uint8), axis=1, bitorder="little"
        )
        return bits[:, : self.k].astype(np.float64) * 2.0 - 1.0

    def __eq__(self, other):
        if not isinstance(other, CodeMatrix):
            return NotImplemented
        return (
            self.n == other.n
            and self.k == other.k
            and np.array_equal(self.words, other.words)
        )


def pack(signs) -> CodeMatrix:
    return CodeMatrix.from_signs(signs)


def unpack(codes: CodeMatrix) -> np.ndarray:
    return codes.signs()


def code_dot(codes: CodeMatrix, i: int, j: int) -> int:
    """Inner product of two ±1 codes via xor + popcount.

    Always in {-k, -k+2, ..., k}; equals k when i == j.
    """
    if not (0 <= i < codes.n and 0 <= j < codes.n):
        raise DataError(f"feature id out of range (n={codes.n})")
    x = np.bitwise_xor(codes.words[i], codes.words[j])
    return codes.k - 2 * int(np.bitwise_count(x).sum())


@dataclass(frozen=True)
class DfmModel:
    """Factorization machine with binary feature codes."""

    w0: float
    w: np.ndarray
    codes: CodeMatrix

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size != self.codes.n:
            raise DataError("linear weights must have length codes.n")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w0", float(self.w0))

    @property
    def n(self) -> int:
        return self.codes.n

    @property
    def k(self) -> int:
        return self.codes.k


def _check_indices(indices: np.ndarray, n: int):
    if indices.size and (indices[0] < 0 or indices[-1] >= n):
        raise DataError(f"feature index out of range for model with n={n}")


def dfm_predict(m: DfmModel, x: SparseInstance) -> float:
    """Score one instance with per-bit accumulators (the fast path).

    Accumulates s_t = sum_i x_i b_it over the support, then the pairwise
    term is (sum_t s_t^2 - k * sum_i x_i^2) / 2.
    """
    _check_indices(x.indices, m.n)
    lin = m.w0 + float(m.w[x.indices] @ x.values)
    if x.nnz < 2:
        return lin
    signs = m.codes.feature_signs(x.indices)  # (nnz, k)
    s = x.values @ signs
    return lin + 0.5 * (float(s @ s) - m.k * float(x.values @ x.values))


def dfm_predict_pairwise(m: DfmModel, x: SparseInstance) -> float:
    """Score one instance by xor/popcount over all support pairs.

    Algebraically identical to :func:`dfm_predict`; kept as the explicit
    bit-operation path for testing and benchmarking.
    """
    _check_indices(x.indices, m.n)
    lin = m.w0 + float(m.w[x.indices] @ x.values)
    if x.nnz < 2:
        return lin
    iu, ju = np.triu_indices(x.nnz, 1)
    wi = m.codes.words[x.indices]
    xor = np.bitwise_xor(wi[iu], wi[ju])
    dots = m.k - 2.0 * np.bitwise_count(xor).sum(axis=1)
    return lin + float(dots @ (x.values[iu] * x.values[ju]))


def score_items(m: DfmModel, user_context: SparseInstance, candidates) -> list:
    """Score candidate items appended to a fixed user context.

    ``candidates`` entries are either a bare feature id (a one-hot item) or
    an ``(indices, values)`` sparse block.  The user-side accumulators are
    computed once and reused; each score equals ``dfm_predict`` on the
    merged instance.  A candidate overlapping the context support is an
    error.
    """
    _check_indices(user_context.indices, m.n)
    ctx_set = set(user_context.indices.tolist())
    ctx_signs = m.codes.feature_signs(user_context.indices)
    s_ctx = user_context.values @ ctx_signs  # (k,)
    sq_ctx = float(user_context.values @ user_context.values)
    lin_ctx = m.w0 + float(m.w[user_context.indices] @ user_context.values)

    scores = []
    for cand in candidates:
        if isinstance(cand, (int, np.integer)):
            idx = np.asarray([cand], dtype=np.int64)
            val = np.asarray([1.0])
        else:
            idx = np.asarray(cand[0], dtype=np.int64)
            val = np.asarray(cand[1], dtype=np.float64)
        _check_indices(np.sort(idx), m.n)
        if ctx_set.intersection(idx.tolist()):
            raise DataError("candidate block overlaps the user context support")
        s = s_ctx + val @ m.codes.feature_signs(idx)
        sq = sq_ctx + float(val @ val)
        lin = lin_ctx + float(m.w[idx] @ val)
        scores.append(lin + 0.5 * (float(s @ s) - m.k * sq))
    return scores


def score_dataset(
    m: DfmModel, d: Dataset, chunk: int = 4096, path: str = "pairs"
) -> np.ndarray:
    """Score every instance of a dataset, vectorized in chunks.

    ``path`` selects the binary kernel: ``"pairs"`` (xor + popcount over
    support pairs, grouped by equal nnz) or ``"st"`` (per-bit accumulator
    sums).  Both agree with :func:`dfm_predict` per instance.
    """
    if path not in ("pairs", "st"):
        raise DataError(f"unknown scoring path {path!r}")
    indptr, indices, values = d.csr
    if indices.size:
        _check_indices(np.asarray([indices.min(), indices.max()]), m.n)
    n_inst = len(d)
    out = np.empty(n_inst, dtype=np.float64)
    lin_flat = m.w[indices] * values
    for a in range(0, n_inst, chunk):
        b = min(a + chunk, n_inst)
        lo, hi = indptr[a], indptr[b]
        ptr = indptr[a:b + 1] - lo
        out[a:b] = m.w0 + segment_sums(lin_flat[lo:hi], ptr)[0]
    if path == "st":
        _add_pairwise_st(m, indptr, indices, values, out, chunk)
    else:
        _add_pairwise_pairs(m, indptr, indices, values, out)
    return out


def _add_pairwise_st(m, indptr, indices, values, out, chunk):
    k = m.k
    n_inst = out.size
    for a in range(0, n_inst, chunk):
        b = min(a + chunk, n_inst)
        lo, hi = indptr[a], indptr[b]
        ptr = indptr[a:b + 1] - lo
        sl_idx = indices[lo:hi]
        sl_val = values[lo:hi]
        if sl_idx.size == 0:
            continue
        signs = m.codes.feature_signs(sl_idx)  # (nnz, k)
        weighted = signs * sl_val[:, None]
        s = segment_sums(weighted.T, ptr)  # (k, b-a)
        sq = segment_sums(sl_val * sl_val, ptr)[0]
        out[a:b] += 0.5 * ((s * s).sum(axis=0) - k * sq)


def _add_pairwise_pairs(m, indptr, indices, values, out):
    # group instances by nnz so pair index tables are rectangular
    k = m.k
    counts = np.diff(indptr)
    for nnz in np.unique(counts):
        if nnz < 2:
            continue
        rows = np.nonzero(counts == nnz)[0]
        iu, ju = np.triu_indices(nnz, 1)
        # gathers stay modest: process the group in slabs
        slab = max(1, 4_000_000 // (int(nnz) * int(nnz)))
        for a in range(0, rows.size, slab):
            sel = rows[a:a + slab]
            offs = indptr[sel][:, None] + np.arange(nnz)[None, :]
            gi = indices[offs]  # (g, nnz)
            gv = values[offs]
            gw = m.codes.words[gi]  # (g, nnz, words)
            xor = np.bitwise_xor(gw[:, iu, :], gw[:, ju, :])
            pc = np.bitwise_count(xor).sum(axis=2)
            dots = k - 2.0 * pc
            out[sel] += (dots * (gv[:, iu] * gv[:, ju])).sum(axis=1)


def save_dfm(m: DfmModel, path: str):
    """Self-describing binary container; all multi-byte fields little-endian."""
    header = DFM_MAGIC + struct.pack("<IQQ", CONTAINER_VERSION, m.n, m.k)
    payload = (
        struct.pack("<d", m.w0)
        + m.w.astype("<f8").tobytes()
        + m.codes.words.astype("<u8").tobytes()
    )
    atomic_write_bytes(path, header + payload)


def load_dfm(path: str) -> DfmModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DFM_MAGIC:
        raise DataError(f"{path}: not a binary-code model file")
    version, n, k = struct.unpack_from("<IQQ", blob, 4)
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize("<IQQ")
    (w0,) = struct.unpack_from("<d", blob, off)
    off += 8
    w = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    nw = _words_per_code(k)
    words = np.frombuffer(blob, dtype="<u8", count=n * nw, offset=off)
    return DfmModel(w0, w, CodeMatrix(n, k, words.reshape(n, nw).copy()))
