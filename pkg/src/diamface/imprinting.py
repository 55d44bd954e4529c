"""Classifier-weight imprinting: dynamic (per mini-batch) and static (whole dataset)."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Domain, ShallowDataset
from .losses import MarginHead, NumericDomainError, l2_normalize
from .network import SiblingPair

TARGET_MODES = ("doc", "live", "average")
SCHEDULES = ("dynamic", "static-fixed", "static-periodical")


class ImprintWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ImprintConfig:
    alpha: float = 1.0
    target_mode: str = "average"
    schedule: str = "dynamic"
    period: int = 2  # epochs between static re-imprints

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.schedule == "static-periodical" and self.period < 1:
            raise ValueError("period must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def dwi_update(head: MarginHead, class_targets: dict[int, np.ndarray], alpha: float) -> MarginHead:
    """Interpolate each listed class weight toward its target and renormalize, in place.

    Rows of classes absent from ``class_targets`` are left untouched.  A class
    whose interpolated vector is exactly zero is skipped with a warning.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0 or not class_targets:
        return head
    classes = np.fromiter(class_targets, dtype=np.int64, count=len(class_targets))
    if np.any(classes < 0) or np.any(classes >= head.num_classes):
        raise ValueError("target for a class the head does not have")
    targets = np.stack([np.asarray(class_targets[c], dtype=np.float64) for c in classes.tolist()])
    if np.any(~targets.any(axis=1)):
        raise NumericDomainError("imprint targets must be nonzero")
    current = head.W_star[classes]
    current = current / np.linalg.norm(current, axis=1, keepdims=True)
    mixed = (1.0 - alpha) * current + alpha * targets
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    ok = norms[:, 0] > 0
    if not ok.all():
        warnings.warn(
            f"imprinting produced a zero vector for classes {classes[~ok].tolist()}; skipped",
            ImprintWarning,
            stacklevel=2,
        )
    head.W_star[classes[ok]] = mixed[ok] / norms[ok]
    return head


def batch_targets(embeddings: np.ndarray, labels: np.ndarray, domains: np.ndarray,
                  mode: str = "average") -> dict[int, np.ndarray]:
    """Per-class target vectors from a batch of raw embeddings.

    Embeddings are L2-normalized first, then pooled per class over the domains
    the mode selects (doc only, live only, or both).  Classes lacking the
    required domain are omitted with one warning per call.
    """
    if mode not in TARGET_MODES:
        raise ValueError(f"mode must be one of {TARGET_MODES}")
    embeddings = np.atleast_2d(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains)
    if embeddings.shape[0] == 0:
        raise ValueError("batch is empty")
    unit, _ = l2_normalize(embeddings)
    if mode == "doc":
        use = domains == Domain.DOC
    elif mode == "live":
        use = domains == Domain.LIVE
    else:
        use = np.ones(len(labels), dtype=bool)

    classes, inverse = np.unique(labels, return_inverse=True)
    sums = np.zeros((len(classes), unit.shape[1]))
    counts = np.zeros(len(classes))
    np.add.at(sums, inverse[use], unit[use])
    np.add.at(counts, inverse[use], 1.0)
    if np.any(counts == 0):
        warnings.warn(
            f"classes lacking {mode}-mode samples were omitted from the imprint targets",
            ImprintWarning,
            stacklevel=2,
        )
    return {int(c): sums[i] / counts[i] for i, c in enumerate(classes.tolist()) if counts[i] > 0}


def static_imprint_all(head: MarginHead, pair: SiblingPair, dataset: ShallowDataset,
                       mode: str = "average", rng: np.random.Generator | None = None) -> MarginHead:
    """Replace every class weight with its normalized whole-dataset target, in place.

    With ``rng`` one random doc/live pair per class is embedded; without it,
    every sample of the dataset is used.  Class ``j`` of the head is identity
    ``j`` of ``dataset``.
    """
    if head.num_classes != dataset.num_identities:
        raise ValueError("head and dataset disagree on the number of classes")
    if rng is None:
        idx = np.arange(len(dataset))
    else:
        idx = np.empty(2 * dataset.num_identities, dtype=np.int64)
        for c in range(dataset.num_identities):
            lives = dataset.live_index[c]
            idx[2 * c] = dataset.doc_index[c][0]
            idx[2 * c + 1] = lives[rng.integers(len(lives))] if len(lives) > 1 else lives[0]
    feats = pair.embed(dataset.inputs[idx], dataset.domains[idx])
    targets = batch_targets(feats, dataset.identities[idx], dataset.domains[idx], mode)
    return dwi_update(head, targets, 1.0)
