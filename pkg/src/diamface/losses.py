"""Loss heads with analytic gradients.

All functions accept a single embedding ``(d,)`` with an integer label, or a
batch ``(n, d)`` with a label array; batch losses are averaged over samples.
Embedding gradients are always with respect to the *raw* embedding passed in,
i.e. the L2 normalization used by the cosine heads is differentiated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCALE = 16.0
DEFAULT_MARGIN = 5.0
CONTRASTIVE_MARGIN = 1.0
TRIPLET_MARGIN = 0.5


class NumericDomainError(ValueError):
    """An input lies outside the domain where the loss is defined (e.g. a zero vector)."""


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericDomainError("cannot normalize a zero vector")
    return x / norms, norms


def normalize_backward(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient wrt ``x/|x|`` back to ``x``."""
    return (grad - unit * np.sum(grad * unit, axis=-1, keepdims=True)) / norms


def _as_batch(embedding, labels=None):
    x = np.asarray(embedding, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if labels is None:
        return x, None, single
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (x.shape[0],):
        raise ValueError("need one label per embedding")
    return x, y, single


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.argmax(axis=1)
    shifted = logits - logits[np.arange(len(logits)), top][:, None]
    # log1p over the non-max terms keeps tiny losses of confident rows exact
    rest = np.exp(shifted)
    rest[np.arange(len(logits)), top] = 0.0
    return shifted - np.log1p(rest.sum(axis=1, keepdims=True))


@dataclass
class MarginHead:
    """Cosine classifier: rows of ``W_star`` are normalized on read; ``s`` is kept as log(s)."""

    W_star: np.ndarray
    log_s: float = float(np.log(DEFAULT_SCALE))
    m: float = DEFAULT_MARGIN

    def __post_init__(self) -> None:
        self.W_star = np.asarray(self.W_star, dtype=np.float64)
        if self.m < 0:
            raise ValueError("margin must be non-negative")

    @classmethod
    def random(cls, num_classes: int, dim: int, seed: int = 0, s: float = DEFAULT_SCALE,
               m: float = DEFAULT_MARGIN, unit_rows: bool = True) -> "MarginHead":
        """Gaussian rows, either unit-norm or Glorot-scaled (std sqrt(2/(C+d)))."""
        w = np.random.default_rng(seed).standard_normal((num_classes, dim))
        if unit_rows:
            w /= np.linalg.norm(w, axis=1, keepdims=True)
        else:
            w *= np.sqrt(2.0 / (num_classes + dim))
        return cls(w, float(np.log(s)), m)

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s))

    @property
    def weights(self) -> np.ndarray:
        return l2_normalize(self.W_star)[0]

    @property
    def num_classes(self) -> int:
        return self.W_star.shape[0]

    def copy(self) -> "MarginHead":
        return MarginHead(self.W_star.copy(), self.log_s, self.m)


@dataclass
class SoftmaxHead:
    """Unnormalized affine classifier for plain cross-entropy."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def random(cls, num_classes: int, dim: int, seed: int = 0) -> "SoftmaxHead":
        w = np.random.default_rng(seed).standard_normal((num_classes, dim)) / np.sqrt(dim)
        return cls(w, np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "SoftmaxHead":
        return SoftmaxHead(self.weight.copy(), self.bias.copy())


@dataclass
class LossOutput:
    loss: float
    prob: np.ndarray
    grad_embedding: np.ndarray
    grad_weights: np.ndarray
    grad_s: float = 0.0
    grad_log_s: float = 0.0
    grad_bias: np.ndarray | None = field(default=None)


def _check_labels(y: np.ndarray, num_classes: int) -> None:
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError("label out of range")


def am_softmax(head: MarginHead, embedding, label) -> LossOutput:
    """Additive-margin softmax; the margin is subtracted from the target logit unscaled.

    ``grad_weights`` is the gradient wrt ``head.W_star`` (descent convention).
    """
    x, y, single = _as_batch(embedding, label)
    _check_labels(y, head.num_classes)
    n = x.shape[0]
    f, f_norm = l2_normalize(x)
    w, w_norm = l2_normalize(head.W_star)
    s = head.s
    cos = f @ w.T
    logits = s * cos
    rows = np.arange(n)
    logits[rows, y] -= head.m
    logp = _log_softmax(logits)
    prob = np.exp(logp)
    loss = -logp[rows, y].mean()

    d_logits = prob.copy()
    d_logits[rows, y] -= 1.0
    d_logits /= n
    grad_s = float(np.sum(d_logits * cos))
    d_cos = s * d_logits
    grad_f = normalize_backward(d_cos @ w, f, f_norm)
    grad_w = normalize_backward(d_cos.T @ f, w, w_norm)
    return LossOutput(
        loss=float(loss),
        prob=prob[0] if single else prob,
        grad_embedding=grad_f[0] if single else grad_f,
        grad_weights=grad_w,
        grad_s=grad_s,
        grad_log_s=grad_s * s,
    )


def weight_gradients(head: MarginHead, embedding, label) -> np.ndarray:
    """Update signal for the normalized class weights.

    Row ``y`` is ``s(1 - p_y) f`` (attraction toward the feature) and every other
    row ``j`` is ``-s p_j f`` (repulsion); i.e. the negated loss gradient wrt the
    normalized weights, so a descent step *adds* it.  Batches are averaged.
    """
    x, y, _ = _as_batch(embedding, label)
    _check_labels(y, head.num_classes)
    n = x.shape[0]
    f, _ = l2_normalize(x)
    out = am_softmax(head, x, y)
    signal = -np.atleast_2d(out.prob).copy()
    signal[np.arange(n), y] += 1.0
    return head.s * (signal.T @ f) / n


def plain_softmax(head: SoftmaxHead, embedding, label) -> LossOutput:
    """Cross-entropy on affine logits ``W x + b`` of the raw embedding."""
    x, y, single = _as_batch(embedding, label)
    _check_labels(y, head.num_classes)
    n = x.shape[0]
    logits = x @ head.weight.T + head.bias
    rows = np.arange(n)
    logp = _log_softmax(logits)
    prob = np.exp(logp)
    d_logits = prob.copy()
    d_logits[rows, y] -= 1.0
    d_logits /= n
    grad_x = d_logits @ head.weight
    return LossOutput(
        loss=float(-logp[rows, y].mean()),
        prob=prob[0] if single else prob,
        grad_embedding=grad_x[0] if single else grad_x,
        grad_weights=d_logits.T @ x,
        grad_bias=d_logits.sum(axis=0),
    )


@dataclass
class PairLossOutput:
    loss: float
    grads: tuple[np.ndarray, ...]


def contrastive_loss(emb_a, emb_b, same, margin: float = CONTRASTIVE_MARGIN) -> PairLossOutput:
    """Mean over pairs of ``d^2`` (genuine) or ``max(0, margin - d^2)`` (impostor).

    ``d`` is the distance between L2-normalized embeddings.
    """
    a, _, single = _as_batch(emb_a)
    b, _, _ = _as_batch(emb_b)
    same = np.atleast_1d(np.asarray(same, dtype=bool))
    if a.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one pair")
    if a.shape != b.shape or same.shape != (a.shape[0],):
        raise ValueError("pair arrays have inconsistent shapes")
    n = a.shape[0]
    fa, na = l2_normalize(a)
    fb, nb = l2_normalize(b)
    diff = fa - fb
    d2 = np.sum(diff * diff, axis=1)
    hinge = margin - d2
    per_pair = np.where(same, d2, np.maximum(hinge, 0.0))
    coef = np.where(same, 1.0, np.where(hinge > 0, -1.0, 0.0))
    g = (2.0 / n) * coef[:, None] * diff
    ga = normalize_backward(g, fa, na)
    gb = normalize_backward(-g, fb, nb)
    if single:
        ga, gb = ga[0], gb[0]
    return PairLossOutput(float(per_pair.mean()), (ga, gb))


def triplet_loss(anchor, positive, negative, margin: float = TRIPLET_MARGIN) -> PairLossOutput:
    """Mean of ``max(0, d(a,p)^2 - d(a,n)^2 + margin)`` on L2-normalized embeddings."""
    a, _, single = _as_batch(anchor)
    p, _, _ = _as_batch(positive)
    q, _, _ = _as_batch(negative)
    if not (a.shape == p.shape == q.shape):
        raise ValueError("anchor/positive/negative shapes differ")
    if a.shape[0] == 0:
        raise ValueError("triplet loss needs at least one triplet")
    n = a.shape[0]
    fa, na = l2_normalize(a)
    fp, np_ = l2_normalize(p)
    fq, nq = l2_normalize(q)
    d_ap = fa - fp
    d_aq = fa - fq
    raw = np.sum(d_ap * d_ap, axis=1) - np.sum(d_aq * d_aq, axis=1) + margin
    active = (raw > 0).astype(np.float64)[:, None] * (2.0 / n)
    ga = normalize_backward(active * (fq - fp), fa, na)
    gp = normalize_backward(-active * d_ap, fp, np_)
    gq = normalize_backward(active * d_aq, fq, nq)
    if single:
        ga, gp, gq = ga[0], gp[0], gq[0]
    return PairLossOutput(float(np.maximum(raw, 0.0).mean()), (ga, gp, gq))
