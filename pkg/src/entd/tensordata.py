"""Sparse COO tensors of binary or count observations.

Handles ingestion (JSON meta + TSV body), balanced negative sampling,
train/test splitting, minibatch streaming, and synthetic data generation.
All randomized operations are deterministic given their seed.
"""

import gzip
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BINARY = "binary"
COUNT = "count"


class DataFormatError(ValueError):
    """Malformed meta/data file or inconsistent tensor contents."""


def _flat_index(shape, indices):
    """Row-major linear index of each coordinate row."""
    return np.ravel_multi_index(tuple(indices.T), tuple(shape))


@dataclass(frozen=True)
class SparseTensor:
    """Observed entries of an order-D tensor, COO format.

    shape:   D positive extents (I_1..I_D).
    indices: N x D zero-based coordinates, one row per observed entry.
    values:  N observations; {0,1} for binary kind, nonnegative ints for count.
    kind:    "binary" or "count".
    """

    shape: tuple
    indices: np.ndarray
    values: np.ndarray
    kind: str

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        indices = np.ascontiguousarray(np.asarray(self.indices, dtype=np.int64))
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.int64))
        if len(shape) == 0 or any(s <= 0 for s in shape):
            raise DataFormatError(f"shape must be positive extents, got {shape}")
        if indices.ndim != 2 or indices.shape[1] != len(shape):
            raise DataFormatError(
                f"indices must be N x {len(shape)}, got {indices.shape}"
            )
        if values.shape != (indices.shape[0],):
            raise DataFormatError("values length must match index row count")
        if self.kind not in (BINARY, COUNT):
            raise DataFormatError(f"unknown kind {self.kind!r}")
        lo = indices.min(axis=0, initial=0)
        hi = indices.max(axis=0, initial=-1)
        if (lo < 0).any() or (hi >= np.asarray(shape)).any():
            bad = np.where((indices < 0) | (indices >= np.asarray(shape)))[0][0]
            raise DataFormatError(
                f"coordinate out of range at entry {bad}: {tuple(indices[bad])}"
            )
        if indices.shape[0]:
            flat = _flat_index(shape, indices)
            uniq, counts = np.unique(flat, return_counts=True)
            if (counts > 1).any():
                dup = np.unravel_index(uniq[counts > 1][0], shape)
                raise DataFormatError(f"duplicate index {tuple(int(i) for i in dup)}")
        if self.kind == BINARY and not np.isin(values, (0, 1)).all():
            raise DataFormatError("binary tensor values must be 0 or 1")
        if self.kind == COUNT and (values < 0).any():
            raise DataFormatError("count tensor values must be nonnegative")
        indices.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self):
        return self.indices.shape[0]

    @property
    def order(self):
        return len(self.shape)

    @property
    def ncells(self):
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class EntryBatch:
    """Minibatch of tensor entries with its unbiased-estimator scale N/s."""

    indices: np.ndarray
    values: np.ndarray
    scale: float

    def __len__(self):
        return self.indices.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/test split recipe."""

    test_fraction: float
    seed: int
    balanced_negatives: bool = False


def load_coo(meta_path, data_path) -> SparseTensor:
    """Load a tensor from a JSON meta file and a TSV body.

    Meta: {"shape": [...], "kind": "binary"|"count"}.  Body: one entry per
    line, D tab-separated coordinates followed by the value.  Bodies whose
    filename ends in ".gz" are gzip-decompressed.  Entry order is preserved.
    """
    meta_path, data_path = Path(meta_path), Path(data_path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    if not isinstance(meta, dict) or "shape" not in meta or "kind" not in meta:
        raise DataFormatError(f'{meta_path}: expected {{"shape": [...], "kind": ...}}')
    shape = tuple(int(s) for s in meta["shape"])
    kind = meta["kind"]
    order = len(shape)

    opener = gzip.open if data_path.name.endswith(".gz") else open
    rows, vals = [], []
    with opener(data_path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != order + 1:
                raise DataFormatError(
                    f"{data_path}:{lineno}: expected {order + 1} fields, "
                    f"got {len(parts)}"
                )
            try:
                nums = [int(p) for p in parts]
            except ValueError as exc:
                raise DataFormatError(f"{data_path}:{lineno}: {exc}") from exc
            rows.append(nums[:order])
            vals.append(nums[order])

    indices = np.asarray(rows, dtype=np.int64).reshape(len(rows), order)
    values = np.asarray(vals, dtype=np.int64)
    try:
        return SparseTensor(shape, indices, values, kind)
    except DataFormatError as exc:
        raise DataFormatError(f"{data_path}: {exc}") from exc


def save_coo(tensor: SparseTensor, meta_path, data_path):
    """Write the meta JSON and TSV body read back by :func:`load_coo`."""
    meta_path, data_path = Path(meta_path), Path(data_path)
    meta_path.write_text(
        json.dumps({"shape": list(tensor.shape), "kind": tensor.kind}) + "\n"
    )
    opener = gzip.open if data_path.name.endswith(".gz") else open
    with opener(data_path, "wt", encoding="utf-8", newline="\n") as fh:
        for row, val in zip(tensor.indices, tensor.values):
            fh.write("\t".join(str(int(c)) for c in row) + f"\t{int(val)}\n")


def balanced_negative_sample(tensor: SparseTensor, seed) -> SparseTensor:
    """Augment an all-positive binary tensor with equally many sampled zeros.

    Zeros are drawn uniformly without replacement from the unobserved cells.
    Raises if the tensor is not all ones or the complement is too small.
    """
    if tensor.kind != BINARY:
        raise DataFormatError("balanced sampling requires a binary tensor")
    if not (tensor.values == 1).all():
        raise DataFormatError("balanced sampling expects only positive entries")
    n_pos = tensor.nnz
    total = tensor.ncells
    if total - n_pos < n_pos:
        raise DataFormatError(
            f"complement too small: {total - n_pos} empty cells < {n_pos} positives"
        )
    rng = np.random.default_rng(seed)
    observed = _flat_index(tensor.shape, tensor.indices)
    if total <= 1 << 26:
        mask = np.ones(total, dtype=bool)
        mask[observed] = False
        complement = np.flatnonzero(mask)
        chosen = rng.choice(complement, size=n_pos, replace=False)
    else:
        # Rejection sampling for very large grids.
        taken = set(observed.tolist())
        chosen = []
        while len(chosen) < n_pos:
            cand = rng.integers(0, total, size=2 * (n_pos - len(chosen)))
            for c in cand.tolist():
                if c not in taken:
                    taken.add(c)
                    chosen.append(c)
                    if len(chosen) == n_pos:
                        break
        chosen = np.asarray(chosen, dtype=np.int64)
    neg_idx = np.stack(np.unravel_index(chosen, tensor.shape), axis=1)
    indices = np.concatenate([tensor.indices, neg_idx], axis=0)
    values = np.concatenate([tensor.values, np.zeros(n_pos, dtype=np.int64)])
    return SparseTensor(tensor.shape, indices, values, BINARY)


def train_test_split(tensor: SparseTensor, spec: SplitSpec):
    """Split entries into (train, test), test getting round(N * fraction).

    With ``spec.balanced_negatives`` the tensor is first augmented via
    :func:`balanced_negative_sample` (same seed); the disjoint-union
    guarantee then holds with respect to the augmented tensor.
    """
    if not 0.0 < spec.test_fraction < 1.0:
        raise DataFormatError(f"test_fraction must be in (0,1), got {spec.test_fraction}")
    if spec.balanced_negatives:
        tensor = balanced_negative_sample(tensor, spec.seed)
    n = tensor.nnz
    n_test = int(np.rint(n * spec.test_fraction))
    if not 1 <= n_test < n:
        raise DataFormatError(
            f"test_fraction {spec.test_fraction} yields {n_test} test entries of {n}"
        )
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    test_rows, train_rows = perm[:n_test], perm[n_test:]
    make = lambda rows: SparseTensor(
        tensor.shape, tensor.indices[rows], tensor.values[rows], tensor.kind
    )
    return make(train_rows), make(test_rows)


def minibatches(tensor: SparseTensor, batch_size, epoch_seed):
    """Yield EntryBatches covering every entry exactly once, shuffled.

    The last batch may be short; every batch carries scale = N / len(batch)
    so that batch-summed objectives stay unbiased.
    """
    if batch_size < 1:
        raise DataFormatError(f"batch_size must be >= 1, got {batch_size}")
    n = tensor.nnz
    perm = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        rows = perm[start : start + batch_size]
        yield EntryBatch(
            tensor.indices[rows], tensor.values[rows], n / len(rows)
        )


def _latent_grid(shape, rank, rng):
    """Unit-variance multilinear latent field over the full grid.

    Factors are standard normal; the rank-1 components are summed with unit
    weights and the result divided by sqrt(rank) so each cell has variance 1.
    """
    factors = [rng.standard_normal((s, rank)) for s in shape]
    f = factors[0]
    for z in factors[1:]:
        # outer accumulation over modes, components still separate
        f = f[..., None, :] * z
    return f.sum(axis=-1).ravel() / math.sqrt(rank)


def sample_observations(f, kind, zeta, rng):
    """Draw observations given per-cell latent values f.

    binary: x ~ Bernoulli(sigmoid(f)); count: x ~ NB(zeta, sigmoid(f)) with
    mean zeta * exp(f).
    """
    p = 1.0 / (1.0 + np.exp(-np.asarray(f, dtype=np.float64)))
    if kind == BINARY:
        return (rng.random(p.shape) < p).astype(np.int64)
    if kind == COUNT:
        # numpy's negative_binomial counts failures before `n` successes with
        # success prob q; with q = 1-p its mean n(1-q)/q equals zeta*p/(1-p).
        return rng.negative_binomial(zeta, 1.0 - p).astype(np.int64)
    raise DataFormatError(f"unknown kind {kind!r}")


def _full_grid_indices(shape):
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def synth_binary(shape, rank, seed):
    """Fully observed synthetic binary tensor.

    Returns (tensor, f) where f holds the ground-truth latent value for each
    entry, aligned with tensor.indices rows.
    """
    if rank < 1:
        raise DataFormatError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    f = _latent_grid(shape, rank, rng)
    values = sample_observations(f, BINARY, None, rng)
    return SparseTensor(tuple(shape), _full_grid_indices(shape), values, BINARY), f


def synth_count(shape, rank, zeta, seed):
    """Fully observed synthetic count tensor; see :func:`synth_binary`."""
    if rank < 1:
        raise DataFormatError(f"rank must be >= 1, got {rank}")
    if zeta <= 0:
        raise DataFormatError(f"zeta must be > 0, got {zeta}")
    rng = np.random.default_rng(seed)
    f = _latent_grid(shape, rank, rng)
    values = sample_observations(f, COUNT, zeta, rng)
    return SparseTensor(tuple(shape), _full_grid_indices(shape), values, COUNT), f
