"""Verification metrics: cosine scores, ROC, TAR at fixed FAR, k-fold aggregation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Domain, FoldSplit, ShallowDataset
from .losses import NumericDomainError
from .network import SiblingPair

log = logging.getLogger(__name__)

PAPER_FARS = (1e-5, 1e-4, 1e-3)
DESK_FARS = (1e-2, 1e-3)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)


def extract_all(pair: SiblingPair, dataset: ShallowDataset) -> np.ndarray:
    """Unit-norm embedding for every sample (row i belongs to sample i)."""
    raw = pair.embed(dataset.inputs, dataset.domains)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if len(zero):
        raise NumericDomainError(f"sample {int(zero[0])} has a zero embedding")
    return raw / norms


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def score_protocol(embeddings: np.ndarray, dataset: ShallowDataset,
                   max_impostors: int | None = None, seed: int = 0) -> ScoreSet:
    """Doc-vs-live cosine scores.

    Genuine: each identity's doc sample against each of its live samples.
    Impostor: doc of identity i against every live sample of identity j != i,
    or a seeded uniform subsample of those when ``max_impostors`` is smaller.
    """
    if embeddings.shape[0] != len(dataset):
        raise ValueError("embeddings do not cover the dataset")
    doc_rows, live_rows = [], []
    for c in range(dataset.num_identities):
        if not dataset.doc_index[c] or not dataset.live_index[c]:
            log.warning("identity %d lacks a domain; skipped", c)
            continue
        doc_rows.append(dataset.doc_index[c][0])
    docs = np.array(doc_rows, dtype=np.int64)
    lives = np.flatnonzero(dataset.domains == Domain.LIVE)
    sims = embeddings[docs] @ embeddings[lives].T
    same = dataset.identities[docs][:, None] == dataset.identities[lives][None, :]
    genuine = sims[same]
    impostor = sims[~same]
    meta = {"impostor_total": int(impostor.size), "impostor_subsampled": False}
    if max_impostors is not None and impostor.size > max_impostors:
        pick = np.sort(np.random.default_rng(seed).choice(impostor.size, max_impostors, replace=False))
        impostor = impostor[pick]
        meta.update(impostor_subsampled=True, subsample_seed=seed)
    return ScoreSet(genuine, impostor, meta)


@dataclass(frozen=True)
class OperatingPoint:
    far_target: float
    tar: float
    threshold: float
    far: float
    reliable: bool


def tar_at_far(scores: ScoreSet, far_targets: Sequence[float]) -> list[OperatingPoint]:
    """TAR at the smallest threshold whose empirical FAR does not exceed each target.

    A score ``>= threshold`` is accepted, so tied scores land on the accept
    side.  Candidate thresholds are the distinct observed scores plus +inf.
    ``reliable`` is False when there are fewer than ``1/target`` impostors.
    """
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    if gen.size == 0 or imp.size == 0:
        raise ValueError("need at least one genuine and one impostor score")
    cand = np.append(np.unique(np.concatenate([gen, imp])), np.inf)
    fars = (imp.size - np.searchsorted(imp, cand, side="left")) / imp.size
    points = []
    for target in far_targets:
        ok = np.flatnonzero(fars <= target)
        k = ok[0]  # fars is non-increasing along cand
        thr = cand[k]
        tar = (gen.size - np.searchsorted(gen, thr, side="left")) / gen.size
        points.append(OperatingPoint(float(target), float(tar), float(thr), float(fars[k]),
                                     imp.size * target >= 1.0))
    return points


def roc_points(scores: ScoreSet) -> np.ndarray:
    """``(threshold, far, tar)`` rows for every distinct score, thresholds descending."""
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    cand = np.unique(np.concatenate([gen, imp]))[::-1]
    far = (imp.size - np.searchsorted(imp, cand, side="left")) / imp.size
    tar = (gen.size - np.searchsorted(gen, cand, side="left")) / gen.size
    return np.column_stack([cand, far, tar])


@dataclass
class EvalReport:
    far_targets: tuple[float, ...]
    fold_tars: np.ndarray  # (folds, len(far_targets))
    fold_thresholds: np.ndarray
    roc: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return self.fold_tars.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        if self.fold_tars.shape[0] < 2:
            return np.zeros(len(self.far_targets))
        return self.fold_tars.std(axis=0, ddof=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "far", "tar", "threshold"])
        for f in range(self.fold_tars.shape[0]):
            for j, far in enumerate(self.far_targets):
                w.writerow([f, repr(far), repr(float(self.fold_tars[f, j])),
                            repr(float(self.fold_thresholds[f, j]))])
        for j, far in enumerate(self.far_targets):
            w.writerow(["mean", repr(far), repr(float(self.mean[j])), ""])
            w.writerow(["std", repr(far), repr(float(self.std[j])), ""])
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "threshold", "far", "tar"])
        for f, pts in enumerate(self.roc):
            for thr, far, tar in pts:
                w.writerow([f, repr(float(thr)), repr(float(far)), repr(float(tar))])
        return buf.getvalue()


def read_report_csv(text: str) -> EvalReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    per_fold: dict[int, dict[float, tuple[float, float]]] = {}
    for r in rows:
        if r["fold"] in ("mean", "std"):
            continue
        per_fold.setdefault(int(r["fold"]), {})[float(r["far"])] = (float(r["tar"]), float(r["threshold"]))
    folds = sorted(per_fold)
    fars = tuple(per_fold[folds[0]])
    tars = np.array([[per_fold[f][a][0] for a in fars] for f in folds])
    thrs = np.array([[per_fold[f][a][1] for a in fars] for f in folds])
    return EvalReport(fars, tars, thrs)


def evaluate(pair: SiblingPair, dataset: ShallowDataset, far_targets: Sequence[float],
             max_impostors: int | None = None, seed: int = 0) -> tuple[list[OperatingPoint], ScoreSet]:
    scores = score_protocol(extract_all(pair, dataset), dataset, max_impostors, seed)
    return tar_at_far(scores, far_targets), scores


def check_disjoint(train_ids: Sequence[int], test_ids: Sequence[int]) -> None:
    overlap = np.intersect1d(np.asarray(train_ids), np.asarray(test_ids))
    if overlap.size:
        raise ValueError(f"{overlap.size} identities appear in both train and test sets")


def cross_validate(dataset: ShallowDataset, split: FoldSplit, config,
                   far_targets: Sequence[float] = DESK_FARS, max_impostors: int | None = None,
                   keep_roc: bool = False) -> EvalReport:
    """Train one model per fold on the other folds and score its held-out fold."""
    from .training import TrainingError, train

    if split.fold_count < 2:
        raise ValueError("need at least two folds")
    tars = np.zeros((split.fold_count, len(far_targets)))
    thrs = np.zeros_like(tars)
    rocs = []
    for fold in range(split.fold_count):
        train_ids = split.train_identities(fold)
        test_ids = split.test_identities(fold)
        check_disjoint(dataset.source_ids[train_ids], dataset.source_ids[test_ids])
        try:
            result = train(dataset.subset(train_ids), config)
        except TrainingError as exc:
            raise TrainingError(f"fold {fold}: {exc}", exc.step, exc.trace) from None
        points, scores = evaluate(result.pair, dataset.subset(test_ids), far_targets,
                                  max_impostors, seed=config.seed + fold)
        tars[fold] = [p.tar for p in points]
        thrs[fold] = [p.threshold for p in points]
        if keep_roc:
            rocs.append(roc_points(scores))
    return EvalReport(tuple(far_targets), tars, thrs, rocs,
                      {"folds": split.fold_count, "max_impostors": max_impostors})
