"""Feature extractor f, semantic projection g and class embedding table omega.

Logits are ``omega @ g(f(x))`` for every class row of omega. With no hidden
layers f is the identity (the ZSL feature setting); with a frozen omega the
rows are fixed semantic vectors, otherwise omega is a learned classifier.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    DimensionError,
    affine_backward,
    affine_forward,
    relu,
    relu_backward,
)
from .rng import substream

CHECKPOINT_MAGIC = b"CMXM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    omega_trainable: bool = False
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0 or self.embed_dim <= 0 or self.num_classes <= 0:
            raise ValueError("input_dim, embed_dim and num_classes must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_dims}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        dims = (self.input_dim, *self.hidden_dims)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"f.{i}.weight"] = (a, b)
            shapes[f"f.{i}.bias"] = (b,)
        shapes["g.weight"] = (self.feature_dim, self.embed_dim)
        shapes["g.bias"] = (self.embed_dim,)
        shapes["omega"] = (self.num_classes, self.embed_dim)
        return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    class_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.class_ids:
            self.class_ids = tuple(range(self.config.num_classes))
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if len(self.class_ids) != self.config.num_classes:
            raise ValueError("class_ids must name every omega row")
        for name, shape in self.config.tensor_shapes().items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden_dims)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n != "omega" or self.config.omega_trainable]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.class_ids)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    features: np.ndarray
    projections: np.ndarray
    logits: np.ndarray


def init_model(config: ModelConfig, embeddings=None, class_ids=None) -> ModelParams:
    if not config.omega_trainable:
        if embeddings is None:
            raise ValueError("a frozen omega needs an embedding table")
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (config.num_classes, config.embed_dim):
            raise DimensionError(
                f"embeddings {embeddings.shape} vs expected {(config.num_classes, config.embed_dim)}"
            )
    rng = substream(config.init_seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
        elif name == "omega" and not config.omega_trainable:
            tensors[name] = embeddings.copy()
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, tensors, tuple(class_ids) if class_ids is not None else ())


def extract_features(params: ModelParams, inputs):
    """Run f; returns the features plus what the backward pass needs."""
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.config.input_dim:
        raise DimensionError(f"inputs {h.shape} do not match input_dim {params.config.input_dim}")
    layer_inputs, pre = [], []
    for i in range(params.n_hidden):
        layer_inputs.append(h)
        a = affine_forward(h, params.tensors[f"f.{i}.weight"], params.tensors[f"f.{i}.bias"])
        pre.append(a)
        h = relu(a)
    return h, layer_inputs, pre


def extract_backward(params: ModelParams, layer_inputs, pre_activations, grad_features):
    grads: dict[str, np.ndarray] = {}
    up = grad_features
    for i in reversed(range(params.n_hidden)):
        up = relu_backward(pre_activations[i], up)
        up, gw, gb = affine_backward(layer_inputs[i], params.tensors[f"f.{i}.weight"], up)
        grads[f"f.{i}.weight"] = gw
        grads[f"f.{i}.bias"] = gb
    return grads


def head_forward(params: ModelParams, features, omega=None):
    """Apply g then score against omega (or an override table, e.g. unseen classes)."""
    proj = affine_forward(features, params.tensors["g.weight"], params.tensors["g.bias"])
    table = params.tensors["omega"] if omega is None else np.asarray(omega, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != proj.shape[1]:
        raise DimensionError(f"class table {table.shape} vs projections {proj.shape}")
    return proj, proj @ table.T


def head_backward(params: ModelParams, features, projections, grad_logits):
    """Gradients for g and omega, plus the gradient flowing back into f's output."""
    omega = params.tensors["omega"]
    if grad_logits.shape != (projections.shape[0], omega.shape[0]):
        raise DimensionError(f"grad_logits {grad_logits.shape} vs logits {(projections.shape[0], omega.shape[0])}")
    grads: dict[str, np.ndarray] = {}
    if params.config.omega_trainable:
        grads["omega"] = grad_logits.T @ projections
    grad_proj = grad_logits @ omega
    grad_feat, grads["g.weight"], grads["g.bias"] = affine_backward(
        features, params.tensors["g.weight"], grad_proj
    )
    return grads, grad_feat


def forward(params: ModelParams, inputs, omega=None) -> ForwardCache:
    x = np.asarray(inputs, dtype=np.float64)
    feats, layer_inputs, pre = extract_features(params, x)
    proj, logits = head_forward(params, feats, omega)
    return ForwardCache(x, layer_inputs, pre, feats, proj, logits)


def backward(params: ModelParams, cache: ForwardCache, grad_logits) -> dict[str, np.ndarray]:
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != cache.logits.shape:
        raise DimensionError(f"grad_logits {grad_logits.shape} vs logits {cache.logits.shape}")
    grads, grad_feat = head_backward(params, cache.features, cache.projections, grad_logits)
    grads.update(extract_backward(params, cache.layer_inputs, cache.pre_activations, grad_feat))
    return grads


def predict(params: ModelParams, inputs, omega=None) -> np.ndarray:
    """Index of the best-scoring row of the class table; ties go to the lowest index."""
    if omega is not None and np.asarray(omega).shape[0] == 0:
        raise ValueError("empty active class set")
    return np.argmax(forward(params, inputs, omega).logits, axis=1)


def _config_json(params: ModelParams) -> dict:
    cfg = asdict(params.config)
    cfg["hidden_dims"] = list(cfg["hidden_dims"])
    return {
        "format": "CMXM",
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "class_ids": list(params.class_ids),
        "tensors": {k: list(v.shape) for k, v in params.tensors.items()},
    }


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack("<II", cfg.input_dim, len(cfg.hidden_dims))
    out += struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims)
    out += struct.pack("<III", cfg.embed_dim, cfg.num_classes, int(cfg.omega_trainable))
    out += struct.pack("<Q", cfg.init_seed)
    out += struct.pack(f"<{cfg.num_classes}I", *params.class_ids)
    for name in cfg.tensor_shapes():
        out += params.tensors[name].astype("<f4").tobytes()
    path = Path(path)
    path.write_bytes(bytes(out))
    sidecar_path(path).write_text(json.dumps(_config_json(params), indent=2) + "\n")


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(data, path)
    r.pos = 4
    (version,) = r.take("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    input_dim, n_hidden = r.take("<II")
    hidden = r.take(f"<{n_hidden}I")
    embed_dim, num_classes, trainable = r.take("<III")
    (seed,) = r.take("<Q")
    class_ids = r.take(f"<{num_classes}I")
    try:
        config = ModelConfig(input_dim, embed_dim, num_classes, hidden, bool(trainable), seed)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from None
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        count = math.prod(shape)
        if r.pos + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint while reading {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=r.pos)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        r.pos += 4 * count
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    params = ModelParams(config, tensors, class_ids)

    meta_path = sidecar_path(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        expected = _config_json(params)
        for key in ("config", "class_ids"):
            if meta.get(key) != expected[key]:
                raise CheckpointError(
                    f"{meta_path}: {key} disagrees with binary checkpoint "
                    f"({meta.get(key)} vs {expected[key]})"
                )
    return params
