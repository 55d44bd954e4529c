"""Mini-batch sampling, SGD with momentum, and the sibling-network training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import Domain, ShallowDataset
from .imprinting import ImprintConfig, batch_targets, dwi_update, static_imprint_all
from .losses import (
    CONTRASTIVE_MARGIN,
    DEFAULT_MARGIN,
    DEFAULT_SCALE,
    TRIPLET_MARGIN,
    MarginHead,
    SoftmaxHead,
    am_softmax,
    contrastive_loss,
    plain_softmax,
    triplet_loss,
)
from .network import SiblingPair, load_tensors, save_tensors

SAMPLERS = ("images", "pairs", "domain-pairs")
LOSSES = ("softmax", "am-softmax", "contrastive", "triplet")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, trace: Sequence[float] = ()):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.trace = list(trace)


# ---------------------------------------------------------------- sampling


def sample_batch(dataset: ShallowDataset, kind: str, batch_size: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Indices of one mini-batch.

    ``images``: ``batch_size`` distinct samples uniformly over all images.
    ``pairs``: ``batch_size/2`` distinct classes, two distinct samples each.
    ``domain-pairs``: ``batch_size/2`` distinct classes, one doc plus one random
    live sample each.  Pair batches are laid out class by class.
    """
    if kind not in SAMPLERS:
        raise ValueError(f"unknown sampler {kind!r}; expected one of {SAMPLERS}")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if kind == "images":
        if batch_size > len(dataset):
            raise ValueError(f"batch of {batch_size} exceeds {len(dataset)} samples")
        return rng.choice(len(dataset), size=batch_size, replace=False)
    if batch_size % 2:
        raise ValueError("pair samplers need an even batch size")
    half = batch_size // 2
    if half > dataset.num_identities:
        raise ValueError(f"{half} classes requested but only {dataset.num_identities} exist")
    classes = rng.choice(dataset.num_identities, size=half, replace=False)
    out = np.empty(batch_size, dtype=np.int64)
    for k, c in enumerate(classes.tolist()):
        doc = dataset.doc_index[c]
        lives = dataset.live_index[c]
        if kind == "domain-pairs":
            out[2 * k] = doc[0]
            out[2 * k + 1] = lives[rng.integers(len(lives))]
        else:
            members = doc + lives
            a, b = rng.choice(len(members), size=2, replace=False)
            out[2 * k] = members[a]
            out[2 * k + 1] = members[b]
    return out


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Piecewise-constant learning rate, momentum and (coupled) weight decay.

    ``boundaries`` are the steps at which the rate switches to the next entry
    of ``rates``.
    """

    rates: tuple[float, ...] = (0.01, 0.001)
    boundaries: tuple[int, ...] = (3200,)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if len(self.rates) != len(self.boundaries) + 1:
            raise ValueError("need one more rate than boundaries")
        if any(r <= 0 for r in self.rates):
            raise ValueError("learning rates must be positive")

    def lr(self, step: int) -> float:
        return self.rates[int(np.searchsorted(self.boundaries, step, side="right"))]


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState,
             step: int = 0, decay: Sequence[bool] | None = None) -> None:
    """In-place update ``v <- mu v + (g + wd*theta)``, ``theta <- theta - lr v``.

    ``decay`` flags which parameters receive weight decay (all by default).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if state.velocities is None:
        state.velocities = [np.zeros_like(p) for p in params]
    lr = state.lr(step)
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient {i} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {i}", step)
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.velocities[i]
        v *= state.momentum
        v += g
        if state.weight_decay and (decay is None or decay[i]):
            v += state.weight_decay * p
        p -= lr * v


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 248
    steps: int = 4000
    seed: int = 0
    loss: str = "am-softmax"
    imprint: ImprintConfig | None = field(default_factory=ImprintConfig)
    sampler: str = "domain-pairs"
    sharing: str = "high-fc"
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 32
    lr: float = 0.01
    lr_decay_at: float = 0.8
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = DEFAULT_MARGIN
    scale_init: float = DEFAULT_SCALE
    learn_scale: bool = True
    contrastive_margin: float = CONTRASTIVE_MARGIN
    triplet_margin: float = TRIPLET_MARGIN

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.sampler != "images" and self.batch_size % 2:
            raise ValueError("pair samplers need an even batch size")
        if self.steps < 0 or self.batch_size < 2:
            raise ValueError("invalid steps or batch size")
        if self.imprint is not None and self.loss != "am-softmax":
            raise ValueError("weight imprinting applies to the am-softmax head only")

    @property
    def label(self) -> str:
        if self.loss == "am-softmax" and self.imprint is not None:
            return "diam" if self.imprint.schedule == "dynamic" else f"am-softmax/{self.imprint.schedule}"
        return self.loss

    def optimizer(self) -> OptimizerState:
        boundary = int(round(self.lr_decay_at * self.steps))
        return OptimizerState(
            rates=(self.lr, self.lr * self.lr_decay_factor),
            boundaries=(boundary,),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        imprint = data.pop("imprint", None)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(imprint=ImprintConfig(**imprint) if imprint else None, **data)

    def with_updates(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class TrainResult:
    pair: SiblingPair
    head: MarginHead | SoftmaxHead | None
    config: TrainConfig
    losses: list[float] = field(default_factory=list)
    scales: list[float] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)
    source_ids: np.ndarray | None = None

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "s", "lr"])
        for i, (l, s, r) in enumerate(zip(self.losses, self.scales, self.rates)):
            writer.writerow([i, repr(l), repr(s), repr(r)])
        return buf.getvalue()


def steps_per_epoch(num_identities: int, batch_size: int) -> int:
    return math.ceil(num_identities / (batch_size // 2))


def _genuine_pairs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    return np.nonzero(np.triu(same, k=1))


def _scatter_rows(n: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` rows into an ``(n, d)`` array at row positions ``idx``."""
    onehot = np.zeros((n, len(idx)))
    onehot[idx, np.arange(len(idx))] = 1.0
    return onehot @ values


def _semihard_negatives(emb: np.ndarray, labels: np.ndarray, anchors: np.ndarray,
                        positives: np.ndarray) -> np.ndarray:
    """Closest negative that is farther than the positive; the farthest one if none is."""
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    d2 = np.maximum(2.0 - 2.0 * unit @ unit.T, 0.0)
    d_ap = d2[anchors, positives][:, None]
    d_an = d2[anchors]
    is_neg = labels[anchors][:, None] != labels[None, :]
    outside = is_neg & (d_an > d_ap)
    semi = np.where(outside, d_an, np.inf).argmin(axis=1)
    easiest = np.where(is_neg, d_an, -np.inf).argmax(axis=1)
    return np.where(outside.any(axis=1), semi, easiest)


def _metric_loss(config: TrainConfig, emb: np.ndarray, labels: np.ndarray,
                 rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Pair/triplet losses assembled from a mini-batch.

    Contrastive: every in-batch genuine pair plus one random impostor pair per
    genuine pair.  Triplet: every ordered genuine (anchor, positive) pair with
    a semi-hard negative from the batch.
    """
    n = len(emb)
    gi, gj = _genuine_pairs(labels)
    if len(gi) == 0:
        return 0.0, np.zeros_like(emb)
    if config.loss == "contrastive":
        ia = rng.integers(n, size=len(gi))
        ib = (ia + rng.integers(1, n, size=len(gi))) % n
        clash = labels[ia] == labels[ib]
        while clash.any():
            ib[clash] = rng.integers(n, size=int(clash.sum()))
            clash = labels[ia] == labels[ib]
        a = np.concatenate([gi, ia])
        b = np.concatenate([gj, ib])
        same = np.arange(len(a)) < len(gi)
        out = contrastive_loss(emb[a], emb[b], same, config.contrastive_margin)
        return out.loss, _scatter_rows(n, a, out.grads[0]) + _scatter_rows(n, b, out.grads[1])
    anchors = np.concatenate([gi, gj])
    positives = np.concatenate([gj, gi])
    negatives = _semihard_negatives(emb, labels, anchors, positives)
    out = triplet_loss(emb[anchors], emb[positives], emb[negatives], config.triplet_margin)
    grad = _scatter_rows(n, anchors, out.grads[0]) + _scatter_rows(n, positives, out.grads[1]) \
        + _scatter_rows(n, negatives, out.grads[2])
    return out.loss, grad


def init_model(dataset: ShallowDataset, config: TrainConfig):
    pair = SiblingPair.create(
        dataset.d_in, config.hidden, config.embedding_dim, config.sharing, seed=config.seed
    )
    head_seed = config.seed + 7919
    if config.loss == "am-softmax":
        # SGD-trained rows start Glorot-scaled; imprinted rows start on the unit sphere
        head = MarginHead.random(
            dataset.num_identities, config.embedding_dim, head_seed, config.scale_init,
            config.margin, unit_rows=config.imprint is not None,
        )
    elif config.loss == "softmax":
        head = SoftmaxHead.random(dataset.num_identities, config.embedding_dim, head_seed)
    else:
        head = None
    return pair, head


def train(dataset: ShallowDataset, config: TrainConfig, on_step=None) -> TrainResult:
    """Run ``config.steps`` SGD steps; deterministic for a given config and dataset.

    With imprinting enabled the head rows receive no gradient step: dynamic
    imprinting refreshes the rows of classes in each batch after the backward
    pass, static schedules re-imprint every class at step 0 (and every
    ``period`` epochs when periodical).  ``s`` is learned unless
    ``config.learn_scale`` is off.
    ``on_step(step, result)`` is called after every completed step.
    """
    pair, head = init_model(dataset, config)
    result = TrainResult(pair, head, config, source_ids=dataset.source_ids.copy())
    if config.steps == 0:
        return result

    rng = np.random.default_rng([config.seed, 1])
    opt = config.optimizer()
    imprint = config.imprint
    params = pair.parameters()
    decay = [True] * len(params)
    if isinstance(head, MarginHead):
        head_log_s = np.array([head.log_s])
        if imprint is None:
            params = params + [head.W_star]
            decay += [False]
        if config.learn_scale:
            params = params + [head_log_s]
            decay += [False]
    elif isinstance(head, SoftmaxHead):
        params = params + [head.weight, head.bias]
        decay += [True, True]

    static_period = None
    if imprint is not None and imprint.schedule == "static-periodical":
        static_period = imprint.period * steps_per_epoch(dataset.num_identities, config.batch_size)

    doc_net, live_net = pair.doc_net, pair.live_net
    for step in range(config.steps):
        lr = opt.lr(step)
        if imprint is not None and imprint.schedule != "dynamic":
            if step == 0 or (static_period and step % static_period == 0):
                static_imprint_all(head, pair, dataset, imprint.target_mode, rng)

        idx = sample_batch(dataset, config.sampler, config.batch_size, rng)
        x = dataset.inputs[idx]
        labels = dataset.identities[idx]
        domains = dataset.domains[idx]
        is_doc = domains == Domain.DOC
        is_live = ~is_doc

        # forward both siblings, keeping activations for the backward pass
        emb = np.empty((len(idx), config.embedding_dim))
        acts = {}
        for rows, net in ((is_doc, doc_net), (is_live, live_net)):
            if rows.any():
                acts[net] = net._forward(x[rows])
                emb[rows] = acts[net][-1]

        if isinstance(head, MarginHead):
            head.log_s = float(head_log_s[0])
            out = am_softmax(head, emb, labels)
            loss, grad_emb = out.loss, out.grad_embedding
            head_grads = [out.grad_weights] if imprint is None else []
            if config.learn_scale:
                head_grads.append(np.array([out.grad_log_s]))
        elif isinstance(head, SoftmaxHead):
            out = plain_softmax(head, emb, labels)
            loss, grad_emb = out.loss, out.grad_embedding
            head_grads = [out.grad_weights, out.grad_bias]
        else:
            loss, grad_emb = _metric_loss(config, emb, labels, rng)
            head_grads = []

        if not math.isfinite(loss):
            raise TrainingError("loss diverged", step, result.losses)

        doc_grads = doc_net._backward(acts[doc_net], grad_emb[is_doc]) if is_doc.any() else None
        live_grads = live_net._backward(acts[live_net], grad_emb[is_live]) if is_live.any() else None
        grads = pair.combine_gradients(doc_grads, live_grads) + head_grads

        if imprint is not None and imprint.schedule == "dynamic":
            dwi_update(head, batch_targets(emb, labels, domains, imprint.target_mode), imprint.alpha)

        try:
            sgd_step(params, grads, opt, step, decay)
        except TrainingError as exc:
            raise TrainingError(str(exc).split(": ", 1)[1], step, result.losses) from None

        result.losses.append(loss)
        result.scales.append(head.s if isinstance(head, MarginHead) else float("nan"))
        result.rates.append(lr)
        if on_step is not None:
            if isinstance(head, MarginHead):
                head.log_s = float(head_log_s[0])
            on_step(step, result)

    if isinstance(head, MarginHead):
        head.log_s = float(head_log_s[0])
    return result


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, result: TrainResult, extra: dict | None = None) -> None:
    tensors = result.pair.tensors("pair.")
    head = result.head
    head_kind = None
    if isinstance(head, MarginHead):
        head_kind = "margin"
        tensors["head.W_star"] = head.W_star
        tensors["head.log_s"] = np.array(head.log_s)
        tensors["head.m"] = np.array(head.m)
    elif isinstance(head, SoftmaxHead):
        head_kind = "softmax"
        tensors["head.weight"] = head.weight
        tensors["head.bias"] = head.bias
    meta = {
        "pair": result.pair.describe(),
        "head": head_kind,
        "config": result.config.to_dict(),
        "source_ids": [] if result.source_ids is None else [int(s) for s in result.source_ids],
        **(extra or {}),
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[TrainResult, dict]:
    tensors, meta = load_tensors(path)
    pair = SiblingPair.from_tensors(tensors, meta["pair"], prefix="pair.")
    head = None
    if meta["head"] == "margin":
        head = MarginHead(tensors["head.W_star"], float(tensors["head.log_s"]), float(tensors["head.m"]))
    elif meta["head"] == "softmax":
        head = SoftmaxHead(tensors["head.weight"], tensors["head.bias"])
    config = TrainConfig.from_dict(meta["config"])
    source = np.array(meta["source_ids"], dtype=np.int64)
    return TrainResult(pair, head, config, source_ids=source), meta
