"""Feedforward embedding networks with hand-written backprop, and sibling pairs."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes
from .dataset import Domain, Sample

ACTIVATIONS = ("tanh", "linear")


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(a: np.ndarray, kind: str) -> np.ndarray | None:
    # expressed through the activation output to avoid recomputing tanh
    if kind == "tanh":
        return 1.0 - a * a
    return None


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight/bias shapes are inconsistent")

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class GradientSet:
    """Per-layer (dW, db) pairs plus the gradient with respect to the input."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def is_zero(self) -> bool:
        return all(not g.any() for g in (*self.weights, *self.biases, self.input))


class EmbeddingNetwork:
    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("layer dimensions do not chain")
        self.layers = list(layers)

    @classmethod
    def create(
        cls,
        d_in: int,
        hidden: Sequence[int] = (64, 64),
        d_out: int = 32,
        seed: int = 0,
        activation: str = "tanh",
    ) -> "EmbeddingNetwork":
        """Fan-in scaled Gaussian weights, zero biases, linear output layer."""
        rng = np.random.default_rng(seed)
        dims = [d_in, *hidden, d_out]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            act = "linear" if i == len(dims) - 2 else activation
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1].weight.shape[0]

    def architecture(self) -> list[tuple[int, int, str]]:
        return [(l.weight.shape[1], l.weight.shape[0], l.activation) for l in self.layers]

    def copy(self) -> "EmbeddingNetwork":
        return EmbeddingNetwork([l.copy() for l in self.layers])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.d_in:
            raise ValueError(f"expected input of dimension {self.d_in}, got shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Embed one vector ``(d_in,)`` or a batch ``(n, d_in)``."""
        return self._forward(self._check_input(x))[-1]

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        for layer in self.layers:
            acts.append(_activate(acts[-1] @ layer.weight.T + layer.bias, layer.activation))
        return acts

    def forward_backward(self, x: np.ndarray, upstream_fn) -> tuple[np.ndarray, object, GradientSet]:
        """Forward, then backprop ``upstream_fn(embedding) -> (aux, upstream)``."""
        x = self._check_input(x)
        acts = self._forward(x)
        aux, upstream = upstream_fn(acts[-1])
        return acts[-1], aux, self._backward(acts, upstream)

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> GradientSet:
        x = self._check_input(x)
        return self._backward(self._forward(x), upstream)

    def _backward(self, acts: list[np.ndarray], upstream: np.ndarray) -> GradientSet:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != acts[-1].shape:
            raise ValueError(
                f"upstream gradient shape {upstream.shape} != embedding shape {acts[-1].shape}"
            )
        batched = upstream.ndim == 2
        n = len(self.layers)
        dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        delta = upstream
        for i in range(n - 1, -1, -1):
            layer = self.layers[i]
            deriv = _activation_grad(acts[i + 1], layer.activation)
            if deriv is not None:
                delta = delta * deriv
            if batched:
                dws[i] = delta.T @ acts[i]
                dbs[i] = delta.sum(axis=0)
            else:
                dws[i] = np.outer(delta, acts[i])
                dbs[i] = delta.copy()
            delta = delta @ layer.weight
        return GradientSet(dws, dbs, delta)


def parse_sharing_mask(spec: str | Sequence[bool], num_layers: int) -> tuple[bool, ...]:
    """Resolve a sharing mask.

    Accepts ``none``, ``all``, ``low-k`` (first k layers shared), ``high-k``
    (last k layers shared), ``high-fc`` (= ``high-1``, the embedding layer), or
    an explicit sequence of booleans / a string of 0/1 characters.
    """
    if not isinstance(spec, str):
        mask = tuple(bool(b) for b in spec)
    elif spec == "none":
        mask = (False,) * num_layers
    elif spec == "all":
        mask = (True,) * num_layers
    elif spec == "high-fc":
        mask = (False,) * (num_layers - 1) + (True,)
    elif spec.startswith(("low-", "high-")):
        side, _, count = spec.partition("-")
        k = int(count)
        if not 0 <= k <= num_layers:
            raise ValueError(f"mask {spec!r} does not fit a {num_layers}-layer network")
        shared = (True,) * k
        free = (False,) * (num_layers - k)
        mask = shared + free if side == "low" else free + shared
    elif set(spec) <= {"0", "1"}:
        mask = tuple(c == "1" for c in spec)
    else:
        raise ValueError(f"unknown sharing mask {spec!r}")
    if len(mask) != num_layers:
        raise ValueError(f"mask has {len(mask)} entries for a {num_layers}-layer network")
    return mask


class SiblingPair:
    """Doc-side and live-side networks; shared layers are the same ``Layer`` object."""

    def __init__(self, doc_net: EmbeddingNetwork, live_net: EmbeddingNetwork, sharing_mask):
        if doc_net.architecture() != live_net.architecture():
            raise ValueError("sibling networks must have identical architectures")
        self.sharing_mask = parse_sharing_mask(sharing_mask, len(doc_net.layers))
        for i, shared in enumerate(self.sharing_mask):
            if shared:
                live_net.layers[i] = doc_net.layers[i]
        self.doc_net = doc_net
        self.live_net = live_net

    @classmethod
    def create(
        cls,
        d_in: int,
        hidden: Sequence[int] = (64, 64),
        d_out: int = 32,
        sharing_mask="high-fc",
        seed: int = 0,
    ) -> "SiblingPair":
        """Both siblings start from the same initialization."""
        base = EmbeddingNetwork.create(d_in, hidden, d_out, seed=seed)
        return cls(base, base.copy(), sharing_mask)

    def net_for(self, domain: Domain) -> EmbeddingNetwork:
        return self.doc_net if domain == Domain.DOC else self.live_net

    def route(self, sample: Sample) -> np.ndarray:
        return self.net_for(sample.domain).forward(sample.input)

    def embed(self, inputs: np.ndarray, domains: np.ndarray) -> np.ndarray:
        """Raw embeddings for a batch, each row routed by its domain tag."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        domains = np.asarray(domains)
        out = np.empty((inputs.shape[0], self.doc_net.d_out))
        for dom in (Domain.DOC, Domain.LIVE):
            rows = domains == dom
            if rows.any():
                out[rows] = self.net_for(dom).forward(inputs[rows])
        return out

    def parameters(self) -> list[np.ndarray]:
        """Unique parameter arrays; shared layers appear once."""
        params = []
        for i, shared in enumerate(self.sharing_mask):
            params += [self.doc_net.layers[i].weight, self.doc_net.layers[i].bias]
            if not shared:
                params += [self.live_net.layers[i].weight, self.live_net.layers[i].bias]
        return params

    def combine_gradients(self, doc: GradientSet | None, live: GradientSet | None) -> list[np.ndarray]:
        """Gradients aligned with ``parameters()``; shared layers get the sum of both."""
        grads = []
        for i, shared in enumerate(self.sharing_mask):
            dw_doc = doc.weights[i] if doc else np.zeros_like(self.doc_net.layers[i].weight)
            db_doc = doc.biases[i] if doc else np.zeros_like(self.doc_net.layers[i].bias)
            dw_live = live.weights[i] if live else np.zeros_like(self.live_net.layers[i].weight)
            db_live = live.biases[i] if live else np.zeros_like(self.live_net.layers[i].bias)
            if shared:
                grads += [dw_doc + dw_live, db_doc + db_live]
            else:
                grads += [dw_doc, db_doc, dw_live, db_live]
        return grads

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, net in (("doc", self.doc_net), ("live", self.live_net)):
            for i, layer in enumerate(net.layers):
                out[f"{prefix}{name}.{i}.weight"] = layer.weight
                out[f"{prefix}{name}.{i}.bias"] = layer.bias
        return out

    def describe(self) -> dict:
        return {
            "architecture": [list(a) for a in self.doc_net.architecture()],
            "sharing_mask": [int(b) for b in self.sharing_mask],
        }

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], description: dict, prefix: str = "") -> "SiblingPair":
        nets = []
        for name in ("doc", "live"):
            layers = []
            for i, (_, _, act) in enumerate(description["architecture"]):
                layers.append(
                    Layer(
                        tensors[f"{prefix}{name}.{i}.weight"].copy(),
                        tensors[f"{prefix}{name}.{i}.bias"].copy(),
                        act,
                    )
                )
            nets.append(EmbeddingNetwork(layers))
        return cls(nets[0], nets[1], [bool(b) for b in description["sharing_mask"]])


CHECKPOINT_MAGIC = b"DIAMFACE-TENSORS\n"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Binary dump: magic, version, JSON header, then little-endian float64 payloads.

    Byte output depends only on the arguments, so repeated saves are identical.
    """
    names = sorted(tensors)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [[n, list(np.shape(tensors[n]))] for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(head)), head]
    for n in names:
        chunks.append(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not a diamface tensor file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        header = json.loads(data[pos : pos + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')}")
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise CheckpointFormatError(f"{path}: truncated in tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return tensors, header["meta"]
