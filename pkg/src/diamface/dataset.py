"""Synthetic shallow two-domain datasets.

Every identity owns exactly one document-side sample and one or more live-side
samples.  Inputs are generic real vectors standing in for face images.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from ._io import atomic_write_text

FORMAT_MAGIC = "diamface-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


class Domain(enum.IntEnum):
    DOC = 0
    LIVE = 1

    @property
    def tag(self) -> str:
        return "doc" if self is Domain.DOC else "live"

    @classmethod
    def from_tag(cls, tag: str) -> "Domain":
        if tag == "doc":
            return cls.DOC
        if tag == "live":
            return cls.LIVE
        raise ValueError(f"unknown domain tag {tag!r}")


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    identity: int
    domain: Domain


@dataclass
class ShallowDataset:
    """Column-oriented store of samples.

    ``inputs`` is ``(N, d_in)``; ``identities`` and ``domains`` are length-N
    integer arrays.  ``source_ids`` maps each local identity back to the
    identity number of the dataset it was cut from (identity itself for a
    freshly generated set), so held-out splits stay traceable.
    """

    inputs: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    num_identities: int
    seed: int | None = None
    source_ids: np.ndarray | None = None
    doc_index: list[list[int]] = field(init=False, repr=False)
    live_index: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.source_ids is None:
            self.source_ids = np.arange(self.num_identities, dtype=np.int64)
        else:
            self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.validate()
        self.doc_index, self.live_index = self._build_index()

    @property
    def d_in(self) -> int:
        return int(self.inputs.shape[1])

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def sample(self, i: int) -> Sample:
        return Sample(self.inputs[i], int(self.identities[i]), Domain(int(self.domains[i])))

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def validate(self) -> None:
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        n = self.inputs.shape[0]
        if self.identities.shape != (n,) or self.domains.shape != (n,):
            raise ValueError("identities/domains must have one entry per sample")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")
        if n and (self.identities.min() < 0 or self.identities.max() >= self.num_identities):
            raise ValueError("identity label out of range")
        if not np.all(np.isin(self.domains, (Domain.DOC, Domain.LIVE))):
            raise ValueError("unknown domain value")
        if self.source_ids.shape != (self.num_identities,):
            raise ValueError("source_ids must have one entry per identity")
        docs = np.bincount(self.identities[self.domains == Domain.DOC], minlength=self.num_identities)
        lives = np.bincount(self.identities[self.domains == Domain.LIVE], minlength=self.num_identities)
        if np.any(docs != 1):
            raise ValueError("every identity needs exactly one doc-side sample")
        if np.any(lives < 1):
            raise ValueError("every identity needs at least one live-side sample")

    def _build_index(self) -> tuple[list[list[int]], list[list[int]]]:
        docs: list[list[int]] = [[] for _ in range(self.num_identities)]
        lives: list[list[int]] = [[] for _ in range(self.num_identities)]
        for i, (ident, dom) in enumerate(zip(self.identities.tolist(), self.domains.tolist())):
            (docs if dom == Domain.DOC else lives)[ident].append(i)
        return docs, lives

    def samples_per_identity(self) -> np.ndarray:
        return np.bincount(self.identities, minlength=self.num_identities)

    def subset(self, identities: Sequence[int]) -> "ShallowDataset":
        """Restrict to ``identities`` (local ids), relabelled 0..k-1 in the given order."""
        identities = np.asarray(identities, dtype=np.int64)
        remap = np.full(self.num_identities, -1, dtype=np.int64)
        remap[identities] = np.arange(len(identities))
        keep = remap[self.identities] >= 0
        return ShallowDataset(
            inputs=self.inputs[keep],
            identities=remap[self.identities[keep]],
            domains=self.domains[keep],
            num_identities=len(identities),
            seed=self.seed,
            source_ids=self.source_ids[identities],
        )

    def equals(self, other: "ShallowDataset") -> bool:
        return (
            self.num_identities == other.num_identities
            and self.seed == other.seed
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.identities, other.identities)
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.source_ids, other.source_ids)
        )


SelfieCounts = Union[int, Sequence[int], Callable[[np.random.Generator, int], np.ndarray]]


def _selfie_counts(spec: SelfieCounts, n: int, rng: np.random.Generator) -> np.ndarray:
    if callable(spec):
        counts = np.asarray(spec(rng, n), dtype=np.int64)
    elif np.isscalar(spec):
        counts = np.full(n, int(spec), dtype=np.int64)
    else:
        counts = np.asarray(spec, dtype=np.int64)
    if counts.shape != (n,):
        raise ValueError(f"selfie counts must have length {n}")
    if np.any(counts < 1):
        raise ValueError("every identity needs at least one selfie")
    return counts


def generate_synthetic(
    num_identities: int,
    selfies_per_identity: SelfieCounts = 1,
    d_in: int = 16,
    domain_shift: float = 0.5,
    noise: float = 0.1,
    seed: int = 0,
    signal_dim: int | None = None,
) -> ShallowDataset:
    """Gaussian-mixture dataset with an additive doc-side offset.

    Class centers are standard normal in the first ``signal_dim`` coordinates
    of a random orthonormal basis (all of them by default) and zero elsewhere,
    so with ``signal_dim < d_in`` part of the input carries only noise.  The
    doc-side offset is a fixed random direction scaled to ``domain_shift``.

    ``selfies_per_identity`` may be a constant, a per-identity sequence, or a
    callable ``(rng, n) -> counts``.
    """
    if num_identities < 2:
        raise ValueError("num_identities must be >= 2")
    if d_in < 2:
        raise ValueError("d_in must be >= 2")
    if noise < 0 or not math.isfinite(noise):
        raise ValueError("noise must be a finite non-negative number")
    if domain_shift < 0 or not math.isfinite(domain_shift):
        raise ValueError("domain_shift must be a finite non-negative number")
    signal_dim = d_in if signal_dim is None else int(signal_dim)
    if not 1 <= signal_dim <= d_in:
        raise ValueError("signal_dim must lie in [1, d_in]")

    rng = np.random.default_rng(seed)
    counts = _selfie_counts(selfies_per_identity, num_identities, rng)

    if signal_dim == d_in:
        basis = np.eye(d_in)
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    centers = rng.standard_normal((num_identities, signal_dim)) @ basis[:, :signal_dim].T

    direction = rng.standard_normal(d_in)
    offset = domain_shift * direction / np.linalg.norm(direction)

    identities = np.concatenate(
        [np.full(1 + c, i, dtype=np.int64) for i, c in enumerate(counts)]
    )
    domains = np.concatenate(
        [np.r_[Domain.DOC, np.full(c, Domain.LIVE)].astype(np.int64) for c in counts]
    )
    inputs = centers[identities] + noise * rng.standard_normal((len(identities), d_in))
    inputs[domains == Domain.DOC] += offset
    return ShallowDataset(inputs, identities, domains, num_identities, seed=seed)


@dataclass(frozen=True)
class FoldSplit:
    fold_count: int
    assignment: np.ndarray  # identity -> fold index

    def test_identities(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_identities(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.fold_count)


def split_folds(dataset_or_count: ShallowDataset | int, k: int, seed: int = 0) -> FoldSplit:
    """Partition identities into ``k`` folds whose sizes differ by at most one."""
    n = dataset_or_count if isinstance(dataset_or_count, int) else dataset_or_count.num_identities
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} identities into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldSplit(k, assignment)


def _format_dataset(dataset: ShallowDataset) -> str:
    lines = [
        f"{FORMAT_MAGIC} v{FORMAT_VERSION}",
        f"d_in {dataset.d_in}",
        f"num_identities {dataset.num_identities}",
        f"num_samples {len(dataset)}",
        f"seed {'none' if dataset.seed is None else dataset.seed}",
        "source_ids " + " ".join(str(int(s)) for s in dataset.source_ids),
        "data",
    ]
    for x, ident, dom in zip(dataset.inputs, dataset.identities, dataset.domains):
        values = " ".join(repr(float(v)) for v in x)
        lines.append(f"{int(ident)} {Domain(int(dom)).tag} {values}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_dataset(dataset: ShallowDataset, path: str | Path) -> None:
    atomic_write_text(path, _format_dataset(dataset))


def load_dataset(path: str | Path) -> ShallowDataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def header(lineno: int, key: str) -> str:
        if lineno > len(lines):
            raise DatasetFormatError(f"line {lineno}: missing header {key!r}")
        parts = lines[lineno - 1].split(" ", 1)
        if parts[0] != key:
            raise DatasetFormatError(f"line {lineno}: expected header {key!r}")
        return parts[1] if len(parts) > 1 else ""

    if not lines or lines[0] != f"{FORMAT_MAGIC} v{FORMAT_VERSION}":
        raise DatasetFormatError("line 1: not a diamface dataset file (bad magic/version)")
    try:
        d_in = int(header(2, "d_in"))
        num_identities = int(header(3, "num_identities"))
        num_samples = int(header(4, "num_samples"))
        seed_text = header(5, "seed")
        seed = None if seed_text == "none" else int(seed_text)
        source_text = header(6, "source_ids")
        source_ids = np.array([int(t) for t in source_text.split()], dtype=np.int64)
    except ValueError as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"malformed header: {exc}") from None
    if header(7, "data") != "":
        raise DatasetFormatError("line 7: malformed data marker")

    first = 8
    inputs = np.empty((num_samples, d_in))
    identities = np.empty(num_samples, dtype=np.int64)
    domains = np.empty(num_samples, dtype=np.int64)
    for r in range(num_samples):
        lineno = first + r
        if lineno > len(lines) or lines[lineno - 1] == "end":
            raise DatasetFormatError(
                f"line {lineno}: file truncated after {r} of {num_samples} records"
            )
        fields = lines[lineno - 1].split(" ")
        if len(fields) != d_in + 2:
            raise DatasetFormatError(
                f"line {lineno} (record {r}): expected {d_in + 2} fields, got {len(fields)}"
            )
        try:
            identities[r] = int(fields[0])
            domains[r] = Domain.from_tag(fields[1])
            inputs[r] = [float(v) for v in fields[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno} (record {r}): {exc}") from None
    end_line = first + num_samples
    if end_line > len(lines) or lines[end_line - 1] != "end":
        raise DatasetFormatError(f"line {end_line}: missing end marker (file truncated?)")
    if end_line != len(lines):
        raise DatasetFormatError(f"line {end_line + 1}: trailing content after end marker")
    try:
        return ShallowDataset(inputs, identities, domains, num_identities, seed, source_ids)
    except ValueError as exc:
        raise DatasetFormatError(f"inconsistent dataset: {exc}") from None
