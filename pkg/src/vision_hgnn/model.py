"""End-to-end Vision-HgNN model: tokenizer, HgAT, HgT, readout and classifier."""

from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import hgat, hgt
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .hypergraph import (
    METRICS,
    VisualHypergraph,
    add_position,
    add_virtual_hypernode,
    build_hypergraph,
    embed_patches,
)

READOUTS = ("mean", "sum", "cls")

VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no-hgat": {"disable_hgat": True},
    "no-hgt": {"disable_hgt": True},
    "cls": {"readout": "cls"},
    "gsm": {"readout": "sum"},
    "virtual": {"virtual_node": True, "disable_hgt": True},
}

CHECKPOINT_MAGIC = b"VHGNN\x00\x00\x01"


@dataclass
class VisionHgNNConfig:
    d: int = 128
    patch_size: int = 32
    image_size: int = 256
    channels: int = 3
    k: int = 20
    replicas: int = 4
    hgat_layers: int = 2
    hgt_layers: int = 2
    heads: int = 4
    dropout: float = 0.2
    num_classes: int = 10
    metric: str = "euclidean"
    disable_hgat: bool = False
    disable_hgt: bool = False
    readout: str = "mean"
    virtual_node: bool = False
    alpha_mode: str = "sum"
    clamp_k: bool = False
    precision: str = "float32"
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def uses_hgat(self) -> bool:
        return not self.disable_hgat and self.hgat_layers > 0

    @property
    def uses_hgt(self) -> bool:
        return not self.disable_hgt and self.hgt_layers > 0

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def with_variant(self, variant: str) -> "VisionHgNNConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return dataclasses.replace(self, **VARIANTS[variant])

    def validate(self) -> "VisionHgNNConfig":
        if self.d <= 0 or self.patch_size <= 0 or self.image_size <= 0:
            raise ConfigError("d, patch_size and image_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        n = self.n_patches
        if self.k < 1 or (self.k >= n and not self.clamp_k):
            raise ConfigError(f"K={self.k} must satisfy 1 <= K < n={n}")
        if n < 2:
            raise ConfigError("at least two patches are needed to build a hypergraph")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.hgat_layers < 0 or self.hgt_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.uses_hgt and (self.heads < 1 or self.d % self.heads):
            raise ConfigError(f"{self.heads} heads do not divide d={self.d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}; expected one of {READOUTS}")
        if self.readout == "cls" and not self.uses_hgt:
            raise ConfigError("readout=cls needs at least one HgT layer")
        if self.alpha_mode != "sum":
            raise ConfigError(f"alpha_mode {self.alpha_mode!r} is not implemented; only 'sum' is available")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "VisionHgNNConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_shapes(config: VisionHgNNConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Trainable tensor names and shapes, in checkpoint order."""
    d = config.d
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.E"] = (config.patch_dim, d)
    shapes["embed.pos"] = (config.n_patches, d)
    if config.uses_hgat:
        for layer in range(config.hgat_layers):
            for z in range(config.replicas):
                for w in ("W0", "W1", "W2"):
                    shapes[f"hgat.{layer}.z{z}.{w}"] = (d, d)
                shapes[f"hgat.{layer}.z{z}.W3"] = (2 * d,)
            if layer + 1 < config.hgat_layers:
                shapes[f"hgat.{layer}.bn.gain"] = (d,)
                shapes[f"hgat.{layer}.bn.bias"] = (d,)
        shapes["hgat.proj"] = (d * config.hgat_layers, d)
    if config.uses_hgt:
        head_dim = d // config.heads
        for layer in range(config.hgt_layers):
            p = f"hgt.{layer}"
            shapes[f"{p}.ln1.gain"] = (d,)
            shapes[f"{p}.ln1.bias"] = (d,)
            for k in range(config.heads):
                for w in ("Wq", "Wk", "Wv"):
                    shapes[f"{p}.attn.head{k}.{w}"] = (d, head_dim)
            shapes[f"{p}.attn.Wo"] = (d, d)
            shapes[f"{p}.ln2.gain"] = (d,)
            shapes[f"{p}.ln2.bias"] = (d,)
            shapes[f"{p}.mlp.W1"] = (d, 4 * d)
            shapes[f"{p}.mlp.b1"] = (4 * d,)
            shapes[f"{p}.mlp.W2"] = (4 * d, d)
            shapes[f"{p}.mlp.b2"] = (d,)
    if config.readout == "cls":
        shapes["cls"] = (d,)
    shapes["head.W_out"] = (config.num_classes, d)
    return shapes


def buffer_shapes(config: VisionHgNNConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if config.uses_hgat:
        for layer in range(config.hgat_layers - 1):
            shapes[f"hgat.{layer}.bn.running_mean"] = (config.d,)
            shapes[f"hgat.{layer}.bn.running_var"] = (config.d,)
    return shapes


def count_parameters(config: VisionHgNNConfig) -> int:
    """Closed-form trainable parameter count."""
    d, C = config.d, config.num_classes
    total = config.patch_dim * d + config.n_patches * d + C * d
    if config.uses_hgat:
        L, Z = config.hgat_layers, config.replicas
        total += L * Z * (3 * d * d + 2 * d) + (L - 1) * 2 * d + L * d * d
    if config.uses_hgt:
        # qkv over all heads is 3 d^2, output d^2, MLP 8 d^2 + 5 d, two layer norms 4 d
        total += config.hgt_layers * (12 * d * d + 9 * d)
    if config.readout == "cls":
        total += d
    return total


@dataclass
class ParameterSet:
    tensors: "OrderedDict[str, Tensor]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        ad.zero_grad(self.tensors.values())

    def copy(self) -> "ParameterSet":
        tensors = OrderedDict(
            (name, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)) for name, t in self.tensors.items()
        )
        return ParameterSet(tensors, OrderedDict((k, v.copy()) for k, v in self.buffers.items()))

    def astype(self, dtype) -> "ParameterSet":
        tensors = OrderedDict(
            (name, Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype, name=name))
            for name, t in self.tensors.items()
        )
        return ParameterSet(tensors, OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items()))


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(config: VisionHgNNConfig, seed: int | None = None) -> ParameterSet:
    """Seeded init: Glorot-uniform matrices, N(0, 0.02^2) position and CLS
    embeddings, zero W3 and biases, unit norm gains."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = config.dtype
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embed.pos", "cls"):
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gain":
            data = np.ones(shape)
        elif leaf == "W3" or leaf.startswith("b") or leaf == "bias":
            data = np.zeros(shape)
        else:
            data = _glorot(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in buffer_shapes(config).items():
        fill = 0.0 if name.endswith("running_mean") else 1.0
        buffers[name] = np.full(shape, fill, dtype=dtype)
    return ParameterSet(tensors, buffers)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def tokenize(features: np.ndarray, params: ParameterSet, config: VisionHgNNConfig) -> tuple[Tensor, Tensor]:
    """Patch embedding ``X' E`` and hypernode features ``X' E + E_pos``."""
    features = np.asarray(features)
    expected = (config.n_patches, config.patch_dim)
    if features.shape != expected:
        raise DimensionError(f"patch features have shape {features.shape}, config expects {expected}")
    patch_embed = embed_patches(features.astype(config.dtype, copy=False), params["embed.E"])
    return patch_embed, add_position(patch_embed, params["embed.pos"])


def sample_hypergraph(features: np.ndarray, params: ParameterSet, config: VisionHgNNConfig) -> VisualHypergraph:
    with ad.no_grad():
        _, X = tokenize(features, params, config)
    return build_hypergraph(X, config.k, config.metric, config.clamp_k)


def readout(h: Tensor, mode: str, num_real: int | None = None) -> Tensor:
    """Collapse hypernode rows to one vector.

    ``mean``/``sum`` pool the first ``num_real`` rows (dropping a virtual node
    or CLS row appended after them); ``cls`` returns the last row.
    """
    n = h.shape[0]
    if n < 1:
        raise DimensionError("readout over zero hypernodes")
    if mode == "cls":
        return ad.reshape(ad.take_rows(h, [n - 1]), (h.shape[1],))
    if mode not in ("mean", "sum"):
        raise ConfigError(f"unknown readout {mode!r}; expected one of {READOUTS}")
    rows = h if num_real is None or num_real == n else ad.take_rows(h, np.arange(num_real))
    return ad.mean_reduce(rows, axis=0) if mode == "mean" else ad.sum_reduce(rows, axis=0)


def forward_patches(
    features: np.ndarray,
    params: ParameterSet,
    config: VisionHgNNConfig,
    training: bool = False,
    key: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """Pre-softmax class logits for one tokenized image (n x p*p*c features)."""
    patch_embed, X = tokenize(features, params, config)
    n, d = X.shape
    h, skip = X, patch_embed
    zero_row = Tensor(np.zeros((1, d), dtype=X.dtype))
    if config.uses_hgat:
        G = build_hypergraph(X, config.k, config.metric, config.clamp_k)
        if config.virtual_node:
            G = add_virtual_hypernode(G)
            skip = ad.concat([skip, zero_row], axis=0)
        h = hgat.stack_forward(
            G.features,
            G.incidence,
            params.tensors,
            params.buffers,
            config.hgat_layers,
            config.replicas,
            config.dropout,
            training,
            key,
        )
    if config.uses_hgt:
        if config.readout == "cls":
            h = ad.concat([h, ad.reshape(params["cls"], (1, d))], axis=0)
            skip = ad.concat([skip, zero_row], axis=0)
        h = hgt.hgt_stack_forward(h, skip, params.tensors, config.hgt_layers, config.heads)
    z = readout(h, config.readout, num_real=n)
    logits = ad.matmul(params["head.W_out"], ad.reshape(z, (d, 1)))
    return ad.reshape(logits, (config.num_classes,))


def forward(m, params: ParameterSet, config: VisionHgNNConfig, training: bool = False, key=(0, 0, 0)) -> Tensor:
    """Logits for a preprocessed micrograph (already resized and normalized)."""
    from .ingest import Micrograph, patchify

    if not isinstance(m, Micrograph):
        m = Micrograph(np.asarray(m))
    h, w, _ = m.pixels.shape
    if (h, w) != (config.image_size, config.image_size):
        raise DimensionError(f"image is {h}x{w}, config expects {config.image_size}x{config.image_size}")
    return forward_patches(patchify(m, config.patch_size).features, params, config, training, key)


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability, ties to the smaller index."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def predict(logits, top: tuple[int, ...] = (1, 2, 3, 5)) -> tuple[np.ndarray, dict[int, list[int]]]:
    probs = softmax_probs(logits)
    if probs.shape[-1] < 2:
        raise ConfigError("prediction needs at least two classes")
    order = rank_classes(probs)
    return probs, {n: order[:n].tolist() for n in top}


# ---------------------------------------------------------------------------
# Model wrapper and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class VisionHgNN:
    config: VisionHgNNConfig
    params: ParameterSet
    class_names: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: VisionHgNNConfig, class_names=None) -> "VisionHgNN":
        return cls(config, init_parameters(config), list(class_names or []))

    def logits(self, features: np.ndarray, training: bool = False, key=(0, 0, 0)) -> Tensor:
        return forward_patches(features, self.params, self.config, training, key)

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.stack([softmax_probs(self.logits(f)) for f in batch])

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.config, {"class_names": self.class_names})

    @classmethod
    def load(cls, path, config: VisionHgNNConfig | None = None) -> "VisionHgNN":
        params, cfg, meta = load_checkpoint(path, config)
        return cls(cfg, params, list(meta.get("class_names", [])))


def save_checkpoint(path, params: ParameterSet, config: VisionHgNNConfig, meta: Mapping | None = None) -> None:
    """Write magic, an 8-byte little-endian header length, a JSON header, then raw tensors."""
    entries, payloads, offset = [], [], 0
    items = [(n, t.data) for n, t in params.tensors.items()] + list(params.buffers.items())
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "byte_offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = {"config": config.to_dict(), "meta": dict(meta or {}), "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path, config: VisionHgNNConfig | None = None) -> tuple[ParameterSet, VisionHgNNConfig, dict]:
    """Read a checkpoint and check every tensor against ``config`` (or the stored config)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a Vision-HgNN checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path} is truncated")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{path} is truncated: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        stored = VisionHgNNConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    target = config if config is not None else stored
    expected = dict(parameter_shapes(target))
    expected_buffers = dict(buffer_shapes(target))
    payload = memoryview(blob)[16 + hlen :]
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in expected:
            want = expected[name]
        elif name in expected_buffers:
            want = expected_buffers[name]
        else:
            raise CheckpointError(f"checkpoint tensor {name!r} is unknown for this model config")
        if shape != want:
            raise CheckpointError(f"checkpoint tensor {name!r} has shape {shape}, config expects {want}")
        if entry["dtype"] not in ("float32", "float64"):
            raise CheckpointError(f"checkpoint tensor {name!r} has unsupported dtype {entry['dtype']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start = entry["byte_offset"]
        stop = start + dtype.itemsize * int(np.prod(shape))
        if start < 0 or stop > len(payload):
            raise CheckpointError(f"checkpoint tensor {name!r} runs past the end of {path}")
        arr = np.frombuffer(payload[start:stop], dtype=dtype).reshape(shape).astype(entry["dtype"])
        if name in expected:
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            buffers[name] = arr
    missing = [n for n in list(expected) + list(expected_buffers) if n not in tensors and n not in buffers]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
    ordered = OrderedDict((n, tensors[n]) for n in expected)
    ordered_buffers = OrderedDict((n, buffers[n]) for n in expected_buffers)
    return ParameterSet(ordered, ordered_buffers), target, dict(header.get("meta", {}))
