"""Sparse rating datasets: parsing, validation, per-user splitting, indexing.

The on-disk format is the libFM text format: one instance per line,
``<target> <idx>:<val> [<idx>:<val> ...]``, with ``#`` starting comment
lines.  A ``#n <N>`` comment fixes the feature dimension explicitly, which
matters for test files that never touch the highest feature id.

Everything here is immutable after construction and safe to read from
many threads.  Parsing is single-threaded.
"""

import io
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from .exceptions import DataError, ParseError

__all__ = [
    "SparseInstance",
    "Dataset",
    "FeatureIndex",
    "parse_libfm",
    "serialize_libfm",
    "split_per_user",
    "build_feature_index",
]


@dataclass(frozen=True)
class SparseInstance:
    """One (feature vector, target) pair in sparse index:value form.

    ``indices`` is strictly increasing with no duplicates; ``values`` holds
    the matching finite, nonzero feature values; ``target`` is the rating.
    """

    indices: np.ndarray
    values: np.ndarray
    target: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or val.ndim != 1 or idx.shape != val.shape:
            raise DataError("indices and values must be 1-d and equal length")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise DataError("indices must be strictly increasing")
        if idx.size and idx[0] < 0:
            raise DataError("negative feature index")
        if not np.all(np.isfinite(val)):
            raise DataError("non-finite feature value")
        if np.any(val == 0.0):
            raise DataError("explicit zero value in sparse support")
        if not math.isfinite(self.target):
            raise DataError("non-finite target")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "target", float(self.target))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, SparseInstance):
            return NotImplemented
        return (
            self.target == other.target
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of sparse instances over ``n_features`` dims.

    ``user_field`` / ``item_field`` are optional ``(offset, width)`` ranges
    marking the one-hot user-ID and item-ID blocks of the feature space.
    When a field is declared, every instance must have exactly one nonzero
    inside it.
    """

    instances: tuple
    n_features: int
    user_field: Optional[tuple] = None
    item_field: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.n_features < 0:
            raise DataError("n_features must be >= 0")
        for inst in self.instances:
            if inst.nnz and inst.indices[-1] >= self.n_features:
                raise DataError(
                    f"feature index {inst.indices[-1]} out of range "
                    f"(n_features={self.n_features})"
                )
        for name in ("user_field", "item_field"):
            rng = getattr(self, name)
            if rng is None:
                continue
            off, width = int(rng[0]), int(rng[1])
            if off < 0 or width < 1 or off + width > self.n_features:
                raise DataError(f"{name} {rng} outside feature space")
            object.__setattr__(self, name, (off, width))
            for i, inst in enumerate(self.instances):
                inside = (inst.indices >= off) & (inst.indices < off + width)
                if int(inside.sum()) != 1:
                    raise DataError(
                        f"instance {i} has {int(inside.sum())} nonzeros in "
                        f"{name}, expected exactly 1"
                    )

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_features == other.n_features
            and self.user_field == other.user_field
            and self.item_field == other.item_field
            and self.instances == other.instances
        )

    @cached_property
    def targets(self) -> np.ndarray:
        y = np.array([inst.target for inst in self.instances], dtype=np.float64)
        y.setflags(write=False)
        return y

    @cached_property
    def csr(self):
        """(indptr, indices, values) arrays concatenating all supports."""
        indptr = np.zeros(len(self.instances) + 1, dtype=np.int64)
        for i, inst in enumerate(self.instances):
            indptr[i + 1] = indptr[i] + inst.nnz
        total = int(indptr[-1])
        indices = np.empty(total, dtype=np.int64)
        values = np.empty(total, dtype=np.float64)
        for i, inst in enumerate(self.instances):
            indices[indptr[i]:indptr[i + 1]] = inst.indices
            values[indptr[i]:indptr[i + 1]] = inst.values
        for a in (indptr, indices, values):
            a.setflags(write=False)
        return indptr, indices, values

    @property
    def total_nnz(self) -> int:
        return int(self.csr[0][-1])

    def _field_id(self, inst: SparseInstance, rng) -> int:
        off, width = rng
        inside = inst.indices[(inst.indices >= off) & (inst.indices < off + width)]
        return int(inside[0]) - off

    def user_of(self, inst: SparseInstance) -> int:
        """0-based user id (position within the user field)."""
        if self.user_field is None:
            raise DataError("dataset has no user_field")
        return self._field_id(inst, self.user_field)

    def item_of(self, inst: SparseInstance) -> int:
        """0-based item id (position within the item field)."""
        if self.item_field is None:
            raise DataError("dataset has no item_field")
        return self._field_id(inst, self.item_field)

    def replace(self, **kwargs) -> "Dataset":
        fields = {
            "instances": self.instances,
            "n_features": self.n_features,
            "user_field": self.user_field,
            "item_field": self.item_field,
        }
        fields.update(kwargs)
        return Dataset(**fields)


@dataclass(frozen=True)
class FeatureIndex:
    """Inverted index: for each feature r, the instances whose support has r.

    ``rows(r)`` gives instance ids and ``values(r)`` the matching feature
    values; together they mirror the nonzeros of the dataset exactly.
    """

    n_features: int
    _rows: tuple = field(repr=False)
    _values: tuple = field(repr=False)

    def rows(self, r: int) -> np.ndarray:
        return self._rows[r]

    def values(self, r: int) -> np.ndarray:
        return self._values[r]

    def bucket_size(self, r: int) -> int:
        return int(self._rows[r].size)

    @property
    def total_nnz(self) -> int:
        return sum(a.size for a in self._rows)


def build_feature_index(d: Dataset) -> FeatureIndex:
    """Group dataset nonzeros by feature id."""
    rows = [[] for _ in range(d.n_features)]
    vals = [[] for _ in range(d.n_features)]
    for i, inst in enumerate(d.instances):
        for r, v in zip(inst.indices, inst.values):
            rows[r].append(i)
            vals[r].append(v)
    row_arrays = []
    val_arrays = []
    for r in range(d.n_features):
        a = np.asarray(rows[r], dtype=np.int64)
        b = np.asarray(vals[r], dtype=np.float64)
        a.setflags(write=False)
        b.setflags(write=False)
        row_arrays.append(a)
        val_arrays.append(b)
    return FeatureIndex(d.n_features, tuple(row_arrays), tuple(val_arrays))


def _coerce_lines(source) -> Iterable[str]:
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_libfm(
    source,
    user_field: Optional[tuple] = None,
    item_field: Optional[tuple] = None,
) -> Dataset:
    """Parse libFM-format text into a Dataset.

    ``source`` may be a string or a text stream.  Lines starting with ``#``
    are comments; a ``#n <N>`` comment overrides the inferred feature
    dimension (otherwise it is 1 + the largest index seen).  Explicit zero
    values are dropped from the sparse support.  When both ``user_field``
    and ``item_field`` are given, duplicate (user, item) ratings are
    averaged into the first occurrence.
    """
    instances = []
    n_override = None
    max_index = -1
    for lineno, raw in enumerate(_coerce_lines(source), start=1):
        line = raw.rstrip("\r\n").strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "n":
                try:
                    n_override = int(parts[1])
                except ValueError:
                    raise ParseError(f"bad #n directive {line!r}", lineno)
                if n_override < 0:
                    raise ParseError("negative #n directive", lineno)
            continue
        tokens = line.split()
        try:
            target = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad target {tokens[0]!r}", lineno)
        if not math.isfinite(target):
            raise ParseError(f"non-finite target {tokens[0]!r}", lineno)
        idx = []
        val = []
        seen = set()
        for tok in tokens[1:]:
            head, sep, tail = tok.partition(":")
            if not sep:
                raise ParseError(f"malformed pair {tok!r}", lineno)
            try:
                i = int(head)
                v = float(tail)
            except ValueError:
                raise ParseError(f"malformed pair {tok!r}", lineno)
            if i < 0:
                raise ParseError(f"negative index in {tok!r}", lineno)
            if i in seen:
                raise ParseError(f"duplicate index {i}", lineno)
            seen.add(i)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in {tok!r}", lineno)
            if v == 0.0:
                continue  # semantically absent
            idx.append(i)
            val.append(v)
        order = np.argsort(np.asarray(idx, dtype=np.int64), kind="stable")
        inst = SparseInstance(
            np.asarray(idx, dtype=np.int64)[order],
            np.asarray(val, dtype=np.float64)[order],
            target,
        )
        if inst.nnz:
            max_index = max(max_index, int(inst.indices[-1]))
        instances.append(inst)

    n_features = n_override if n_override is not None else max_index + 1
    if max_index >= n_features:
        raise DataError(
            f"#n {n_features} smaller than max feature index {max_index}"
        )
    d = Dataset(tuple(instances), n_features, user_field, item_field)
    if user_field is not None and item_field is not None:
        d = _average_duplicates(d)
    return d


def _average_duplicates(d: Dataset) -> Dataset:
    """Average targets of repeated (user, item) pairs, keeping first features."""
    first = {}
    sums = {}
    counts = {}
    order = []
    for inst in d.instances:
        key = (d.user_of(inst), d.item_of(inst))
        if key not in first:
            first[key] = inst
            sums[key] = inst.target
            counts[key] = 1
            order.append(key)
        else:
            sums[key] += inst.target
            counts[key] += 1
    if all(c == 1 for c in counts.values()):
        return d
    merged = []
    for key in order:
        inst = first[key]
        if counts[key] == 1:
            merged.append(inst)
        else:
            merged.append(
                SparseInstance(inst.indices, inst.values, sums[key] / counts[key])
            )
    return Dataset(tuple(merged), d.n_features, d.user_field, d.item_field)


def serialize_libfm(d: Dataset) -> str:
    """Render a Dataset back to libFM text, with an explicit ``#n`` header.

    Floats are written with repr so that parse(serialize(d)) == d.
    """
    lines = [f"#n {d.n_features}"]
    for inst in d.instances:
        pairs = " ".join(
            f"{int(i)}:{float(v)!r}" for i, v in zip(inst.indices, inst.values)
        )
        lines.append(f"{float(inst.target)!r} {pairs}".rstrip())
    return "\n".join(lines) + "\n"


def split_per_user(
    d: Dataset, train_fraction: float = 0.5, seed: int = 0
) -> tuple:
    """Split each user's ratings into train/test at ``train_fraction``.

    Per user with m ratings, ceil(fraction * m) go to train; the rest to
    test.  Users with a single rating keep it in train and a warning is
    recorded.  Deterministic for a given seed; the two outputs partition
    the input.
    """
    if d.user_field is None:
        raise DataError("split_per_user requires a dataset with user_field")
    if not (0.0 < train_fraction < 1.0):
        raise DataError("train_fraction must be in (0, 1)")
    by_user = {}
    for i, inst in enumerate(d.instances):
        by_user.setdefault(d.user_of(inst), []).append(i)
    rng = np.random.default_rng(seed)
    train_ids = []
    test_ids = []
    for user in sorted(by_user):
        ids = np.asarray(by_user[user], dtype=np.int64)
        m = ids.size
        if m < 2:
            warnings.warn(
                f"user {user} has {m} rating(s); keeping all in train",
                stacklevel=2,
            )
            train_ids.extend(ids.tolist())
            continue
        perm = rng.permutation(m)
        n_train = math.ceil(train_fraction * m)
        train_ids.extend(ids[perm[:n_train]].tolist())
        test_ids.extend(ids[perm[n_train:]].tolist())
    train_ids.sort()
    test_ids.sort()
    pick = lambda ids: Dataset(
        tuple(d.instances[i] for i in ids),
        d.n_features,
        d.user_field,
        d.item_field,
    )
    return pick(train_ids), pick(test_ids)
