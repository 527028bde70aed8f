"""The two sign classifiers, their SGD trainer and the ``SSHD`` weight file."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, FormatError, InputShapeError, LabelError, ParameterError
from .transforms import random_crop_resize

log = logging.getLogger(__name__)

NUM_CLASSES = 18
MAGIC = b"SSHD"
VERSION = 1


class ModelId(IntEnum):
    MODEL_A = 0
    MODEL_B = 1


def _layers_a():
    return (
        T.conv("conv1", 16), T.relu(), T.maxpool(),
        T.conv("conv2", 32), T.relu(), T.maxpool(),
        T.conv("conv3", 64), T.relu(), T.maxpool(),
        T.flatten(),
        T.dense("fc1", 128), T.relu(),
        T.dense("logits", NUM_CLASSES),
    )


def _layers_b():
    # strided stem, two identity-skip blocks, then a small conv head
    return (
        T.conv("stem", 16, stride=2), T.relu(),                        # 0, 1
        T.conv("block1a", 16), T.relu(), T.conv("block1b", 16),        # 2, 3, 4
        T.residual_add(1), T.relu(),                                   # 5, 6
        T.conv("block2a", 16), T.relu(), T.conv("block2b", 16),        # 7, 8, 9
        T.residual_add(6), T.relu(),                                   # 10, 11
        T.maxpool(),
        T.conv("conv3", 32), T.relu(), T.maxpool(),
        T.flatten(),
        T.dense("fc1", 64), T.relu(),
        T.dense("logits", NUM_CLASSES),
    )


@dataclass(frozen=True)
class ModelArchitecture:
    id: ModelId
    input_shape: tuple
    layers: tuple

    @property
    def extent(self) -> int:
        return self.input_shape[0]


ARCHITECTURES = {
    ModelId.MODEL_A: ModelArchitecture(ModelId.MODEL_A, (64, 64, 3), _layers_a()),
    ModelId.MODEL_B: ModelArchitecture(ModelId.MODEL_B, (56, 56, 3), _layers_b()),
}


def architecture(model_id) -> ModelArchitecture:
    if isinstance(model_id, str):
        key = model_id.upper()
        aliases = {"A": ModelId.MODEL_A, "B": ModelId.MODEL_B}
        if key in aliases:
            model_id = aliases[key]
        elif key in ModelId.__members__:
            model_id = ModelId[key]
        else:
            raise ParameterError(f"unknown model {model_id!r}; expected A or B")
    return ARCHITECTURES[ModelId(model_id)]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.05
    crop_fraction: float = 0.94
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.crop_fraction <= 1:
            raise ParameterError(f"crop fraction must be in (0, 1], got {self.crop_fraction}")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ParameterError("batch size and learning rate must be positive")


@dataclass
class TrainedModel:
    architecture: ModelArchitecture
    network: T.Network
    seed: int | None = None
    class_count: int = NUM_CLASSES
    epoch_losses: list = field(default_factory=list)
    converged: bool = True

    @property
    def input_shape(self):
        return self.architecture.input_shape

    @property
    def weights(self) -> dict:
        return self.network.params


def train(images, labels, arch: ModelArchitecture, cfg: TrainConfig | None = None) -> TrainedModel:
    """Minibatch SGD from a Glorot-uniform init.

    Every sample is passed through :func:`random_crop_resize` before its
    forward pass. Three child streams of ``cfg.seed`` drive init, shuffle
    and augmentation, so a run is reproducible bit for bit.
    """
    cfg = cfg or TrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise DataError("cannot train on an empty dataset")
    if labels.shape != (len(images),):
        raise DataError(f"{len(images)} images but labels of shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise LabelError(f"labels must lie in [0, {NUM_CLASSES}), got range [{labels.min()}, {labels.max()}]")
    if images.shape[1:] != arch.input_shape:
        raise InputShapeError(f"images have shape {images.shape[1:]}, {arch.id.name} expects {arch.input_shape}")

    init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    net = T.Network(arch.input_shape, arch.layers, T.glorot_init(arch.layers, arch.input_shape, np.random.default_rng(init_ss)))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)

    epoch_losses = []
    lr = np.float32(cfg.learning_rate)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = np.stack([random_crop_resize(images[i], cfg.crop_fraction, aug_rng) for i in idx])
            loss, grads = T.loss_and_param_gradients(net, batch, labels[idx])
            for key, g in grads.items():
                net.params[key] -= lr * g
            total += loss * len(idx)
        epoch_losses.append(total / len(images))
        log.info("%s epoch %d/%d loss %.4f", arch.id.name, epoch + 1, cfg.epochs, epoch_losses[-1])

    tail = epoch_losses[-3:]
    converged = all(b <= a for a, b in zip(tail, tail[1:]))
    if not converged:
        log.warning("%s: training loss not monotone over the final epochs: %s", arch.id.name, tail)
    return TrainedModel(arch, net, cfg.seed, NUM_CLASSES, epoch_losses, converged)


def predict(model: TrainedModel, x) -> tuple[int, np.ndarray]:
    """Label (argmax, lowest index on ties) and logits for one image."""
    logits = T.forward(model.network, x)
    if logits.ndim != 1:
        raise InputShapeError("predict takes a single image; use predict_batch for stacks")
    return int(np.argmax(logits)), logits


def predict_batch(model: TrainedModel, xs) -> np.ndarray:
    return np.argmax(T.forward(model.network, xs), axis=1)


# -- weight file -------------------------------------------------------------


def save_model(model: TrainedModel, path) -> None:
    parts = [MAGIC, bytes([VERSION, int(model.architecture.id)])]
    params = model.network.params
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: {what} needs {n} bytes, {len(self.data) - self.pos} left",
                              offset=self.pos, path=self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_model(path) -> TrainedModel:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0, path=path)
    version, arch_id = r.take(2, "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    try:
        arch = ARCHITECTURES[ModelId(arch_id)]
    except ValueError:
        raise FormatError(f"unknown architecture id {arch_id}", offset=5, path=path) from None
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    expected = T.param_shapes(arch.layers, arch.input_shape)
    params = {}
    for i in range(count):
        start = r.pos
        (name_len,) = struct.unpack("<H", r.take(2, f"name length of tensor #{i}"))
        name = r.take(name_len, f"name of tensor #{i}").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of tensor {name!r}"))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of tensor {name!r}"))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        raw = r.take(nbytes, f"weights of tensor {name!r}")
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r} for {arch.id.name}", offset=start, path=path)
        if tuple(shape) != expected[name]:
            raise FormatError(f"tensor {name!r} has shape {shape}, expected {expected[name]}", offset=start, path=path)
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise FormatError(f"missing tensor(s) {', '.join(missing)}", offset=r.pos, path=path)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos, path=path)
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} holds non-finite values", path=path)
    return TrainedModel(arch, T.Network(arch.input_shape, arch.layers, params))
