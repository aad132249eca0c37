"""
Model assembly, training and weight storage for fogpipe.

This module builds the multichannel classifier (one convolutional branch per
accelerometer channel, concatenated into a dense head), trains it with
seeded mini-batches and Adam, and stores trained weights in a versioned,
checksummed binary container.
"""

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fogpipe.core.errors import (
    BadConfig,
    ChecksumFailure,
    ContainerError,
    DegenerateBatch,
    EmptyTrainingSet,
    ShapeMismatch,
    VersionMismatch,
)
from fogpipe.core.gaf import GafTensorSet
from fogpipe.core.ingest import CHANNELS
from fogpipe.core.nn import (
    LayerSpec,
    MultiBranchNetwork,
    ParamSet,
    Sequential,
    add_l2_gradient,
    adam_step,
    one_hot,
    softmax,
    softmax_xent_loss,
)
from fogpipe.core.seeding import derive_seed

logger = logging.getLogger(__name__)

FORMAT_ID = b"FOGPIPE-WEIGHTS"
FORMAT_VERSION = 1
FILTER_LADDER = (32, 64, 128)
_END_HEADER = b"end-header"
_DIGEST_SIZE = 32


@dataclass
class ModelConfig:
    """Architecture and training settings of one classifier."""

    channels: Tuple[str, ...] = CHANNELS
    filters: Tuple[int, ...] = FILTER_LADDER
    block_dropout: Tuple[float, ...] = (0.2, 0.2, 0.4)
    head_units: Tuple[int, ...] = (128, 64)
    head_dropout: Tuple[float, ...] = (0.4, 0.2)
    l2_lambda: float = 0.001
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    image_size: int = 64
    angle_source: str = "bipolar"
    seed: int = 42

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.filters = tuple(self.filters)
        self.block_dropout = tuple(self.block_dropout)
        self.head_units = tuple(self.head_units)
        self.head_dropout = tuple(self.head_dropout)

    def validate(self) -> None:
        """
        Check the configuration.

        Raises:
            BadConfig: On any invalid setting
        """
        if not 1 <= len(self.channels) <= 3 or len(set(self.channels)) != len(self.channels):
            raise BadConfig(f"channels must be 1-3 distinct names, got {list(self.channels)}")
        unknown = [name for name in self.channels if name not in CHANNELS]
        if unknown:
            raise BadConfig(f"unknown channel(s): {unknown}")
        if self.filters != FILTER_LADDER:
            raise BadConfig(f"filter ladder must be {FILTER_LADDER}, got {self.filters}")
        if len(self.block_dropout) != 3 or len(self.head_dropout) != len(self.head_units):
            raise BadConfig("one dropout rate per block and per dense layer required")
        if any(not 0.0 <= r < 1.0 for r in self.block_dropout + self.head_dropout):
            raise BadConfig("dropout rates must be in [0, 1)")
        if self.image_size < 8 or self.image_size % 8:
            raise BadConfig(f"image size must be a positive multiple of 8, got {self.image_size}")
        if self.epochs < 0 or self.batch_size < 2 or self.learning_rate <= 0 or self.l2_lambda < 0:
            raise BadConfig("epochs >= 0, batch_size >= 2, learning_rate > 0 and l2_lambda >= 0 required")

    @property
    def name(self) -> str:
        return "-".join(self.channels)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(**data)


@dataclass
class EpochRecord:
    """Training history entry."""

    epoch: int
    train_loss: float
    val_accuracy: Optional[float] = None
    val_f1: Optional[float] = None
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainedModel:
    """A built network with its configuration, history and metadata."""

    config: ModelConfig
    network: MultiBranchNetwork
    history: List[EpochRecord] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def params(self) -> ParamSet:
        return self.network.parameters()

    @property
    def channels(self) -> Tuple[str, ...]:
        return self.config.channels

    @property
    def test_f1(self) -> Optional[float]:
        return self.metadata.get("test_f1")

    @test_f1.setter
    def test_f1(self, value: Optional[float]) -> None:
        self.metadata["test_f1"] = value

    def predict_proba(self, data: GafTensorSet, batch_size: Optional[int] = None) -> np.ndarray:
        """Class probabilities for every sample (infer mode)."""
        return predict_proba(self.network, data, self.config.channels, batch_size or self.config.batch_size)

    def predict(self, data: GafTensorSet) -> np.ndarray:
        return self.predict_proba(data).argmax(axis=1).astype(np.int64)

    def predict_tensors(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        """Predicted classes for raw (N, H, W, 3) tensors, one per channel."""
        logits = self.network.forward([np.asarray(x, dtype=np.float32) for x in inputs], mode="infer")
        return softmax(logits.astype(np.float64)).argmax(axis=1).astype(np.int64)


def branch_specs(cfg: ModelConfig) -> List[LayerSpec]:
    """conv -> BN -> ReLU -> pool -> dropout, three times, then global pooling."""
    specs: List[LayerSpec] = []
    for index, (filters, rate) in enumerate(zip(cfg.filters, cfg.block_dropout)):
        specs += [
            LayerSpec("conv2d", filters=filters, l2=index > 0),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("maxpool"),
            LayerSpec("dropout", rate=rate),
        ]
    specs.append(LayerSpec("globalavgpool"))
    return specs


def head_specs(cfg: ModelConfig) -> List[LayerSpec]:
    """Dense layers after concatenation; only the first carries L2."""
    specs: List[LayerSpec] = []
    for index, (units, rate) in enumerate(zip(cfg.head_units, cfg.head_dropout)):
        specs += [
            LayerSpec("dense", units=units, l2=index == 0),
            LayerSpec("relu"),
            LayerSpec("dropout", rate=rate),
        ]
    specs += [LayerSpec("dense", units=2), LayerSpec("softmax")]
    return specs


def build_graph(cfg: ModelConfig, dtype: Any = np.float32) -> MultiBranchNetwork:
    """
    Build the network described by a config.

    Weights are drawn from a generator seeded by ``derive_seed(cfg.seed, "init")``,
    so two builds of the same config are identical.

    Raises:
        BadConfig: If the config is invalid
    """
    cfg.validate()
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    branches = []
    width = 0
    for channel in cfg.channels:
        branch, out = Sequential.from_specs(branch_specs(cfg), 3, channel, rng, dtype)
        branches.append(branch)
        width += out
    head, _ = Sequential.from_specs(head_specs(cfg), width, "head", rng, dtype)
    return MultiBranchNetwork(cfg.channels, branches, head, dtype)


def feature_width(cfg: ModelConfig) -> int:
    """Width of the concatenated branch features."""
    return cfg.filters[-1] * len(cfg.channels)


def channel_subsets(channels: Sequence[str] = CHANNELS) -> List[Tuple[str, ...]]:
    """All non-empty channel combinations, smallest first."""
    return [combo for size in range(1, len(channels) + 1) for combo in combinations(channels, size)]


def check_batchable(n_windows: int, epochs: int, owner: str = "training set") -> None:
    """
    Reject a training set that cannot form a batch-normalised batch.

    Raises:
        DegenerateBatch: If training would run on a single window
    """
    if epochs > 0 and n_windows == 1:
        raise DegenerateBatch(f"{owner} has a single window; batch normalisation needs at least 2")


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, order.shape[0], batch_size)]
    # a trailing single sample cannot be batch-normalised on its own
    if len(batches) > 1 and batches[-1].shape[0] == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def predict_proba(
    network: MultiBranchNetwork,
    data: GafTensorSet,
    channels: Sequence[str],
    batch_size: int = 64,
) -> np.ndarray:
    """Infer-mode class probabilities in mini-batches."""
    out = np.zeros((len(data), 2), dtype=np.float64)
    for start in range(0, len(data), batch_size):
        index = np.arange(start, min(start + batch_size, len(data)))
        inputs = [data.tensors(channel, index) for channel in channels]
        out[index] = softmax(network.forward(inputs, mode="infer").astype(np.float64))
    return out


def trainable_subset(data: GafTensorSet, channels: Sequence[str]) -> GafTensorSet:
    """Drop samples with a non-functional input channel."""
    keep = data.functional(channels)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("Dropping %d %s windows with non-functional channels", dropped, data.split)
    return data.select(keep)


def fit_epochs(
    network: MultiBranchNetwork,
    data: GafTensorSet,
    cfg: ModelConfig,
    epochs: int,
    stream_seed: int,
    first_epoch: int = 0,
    val: Optional[GafTensorSet] = None,
) -> List[EpochRecord]:
    """
    Run mini-batch Adam epochs on a network in place.

    Epoch ``e`` shuffles with ``derive_seed(stream_seed, "epoch", e)`` and
    batch ``b`` of it draws dropout masks from ``derive_seed(stream_seed,
    "step", e, b)``. The optimizer state starts fresh on every call.

    Args:
        network: Network to train
        data: Training images, already restricted to functional samples
        cfg: Model configuration (batch size, learning rate, L2)
        epochs: Number of epochs to run
        stream_seed: Seed of this training stream
        first_epoch: Global index of the first epoch
        val: Optional validation images scored after every epoch

    Returns:
        One record per epoch
    """
    from fogpipe.core.evaluation import window_metrics

    params = network.parameters()
    params.reset_optimizer()
    targets = one_hot(data.labels, 2, network.dtype)
    history: List[EpochRecord] = []
    step = 0
    for epoch in range(first_epoch, first_epoch + epochs):
        started = time.perf_counter()
        order = np.random.default_rng(derive_seed(stream_seed, "epoch", epoch)).permutation(len(data))
        losses = []
        for batch_index, index in enumerate(_batches(order, cfg.batch_size)):
            inputs = [data.tensors(channel, index) for channel in cfg.channels]
            params.zero_grad()
            logits = network.forward(inputs, mode="train", seed=derive_seed(stream_seed, "step", epoch, batch_index))
            loss, dlogits = softmax_xent_loss(logits, targets[index], params, cfg.l2_lambda)
            network.backward(dlogits)
            add_l2_gradient(params, cfg.l2_lambda)
            step += 1
            adam_step(params, lr=cfg.learning_rate, t=step)
            losses.append(loss)
            logger.debug("epoch %d batch %d loss %.5f", epoch, batch_index, loss)
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)) if losses else 0.0)
        if val is not None and len(val):
            preds = predict_proba(network, val, cfg.channels, cfg.batch_size).argmax(axis=1)
            report = window_metrics(preds, val.labels)
            record.val_accuracy, record.val_f1 = report.accuracy, report.f1
        record.seconds = time.perf_counter() - started
        history.append(record)
        logger.info(
            "epoch %d: loss %.4f val_acc %s val_f1 %s (%.1fs)",
            epoch, record.train_loss, record.val_accuracy, record.val_f1, record.seconds,
        )
    return history


def train(
    cfg: ModelConfig,
    train_set: GafTensorSet,
    val_set: Optional[GafTensorSet] = None,
    client_index: int = 0,
) -> TrainedModel:
    """
    Train a classifier from scratch.

    Args:
        cfg: Model configuration
        train_set: GASF-encoded training windows
        val_set: Optional GASF-encoded validation windows
        client_index: Training stream index; centralised training is stream 0

    Returns:
        The trained model with its per-epoch history

    Raises:
        EmptyTrainingSet: If no usable training window remains
        DegenerateBatch: If exactly one usable training window remains
    """
    cfg.validate()
    data = trainable_subset(train_set, cfg.channels)
    if len(data) == 0:
        raise EmptyTrainingSet("no training windows with functional channels")
    check_batchable(len(data), cfg.epochs)
    val = trainable_subset(val_set, cfg.channels) if val_set is not None else None

    network = build_graph(cfg)
    logger.info("Training %s on %d windows for %d epochs", cfg.name, len(data), cfg.epochs)
    history = fit_epochs(network, data, cfg, cfg.epochs, derive_seed(cfg.seed, "train", client_index), 0, val)
    model = TrainedModel(config=cfg, network=network, history=history)
    model.metadata.update(
        {
            "channels": list(cfg.channels),
            "epochs_trained": len(history),
            "val_accuracy": history[-1].val_accuracy if history else None,
            "val_f1": history[-1].val_f1 if history else None,
            "test_f1": None,
            "format_version": FORMAT_VERSION,
        }
    )
    return model


def write_history_csv(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    """Write epoch, train_loss, val_accuracy, val_f1, seconds_per_epoch."""
    frame = pd.DataFrame(
        [
            {
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_accuracy": r.val_accuracy,
                "val_f1": r.val_f1,
                "seconds_per_epoch": r.seconds,
            }
            for r in history
        ],
        columns=["epoch", "train_loss", "val_accuracy", "val_f1", "seconds_per_epoch"],
    )
    frame.to_csv(path, index=False, lineterminator="\n")


# -- weight container --------------------------------------------------------


def save_weights(model: TrainedModel) -> bytes:
    """
    Serialise a model.

    Layout: a text header (format id, version, one ``key: json`` line per
    metadata item, tensor count, ``end-header``), then per tensor the name,
    rank, dimensions and little-endian float32 values, then the SHA-256 of
    everything before it.
    """
    header = {
        "config": model.config.to_dict(),
        "history": [r.to_dict() for r in model.history],
    }
    header.update({key: value for key, value in model.metadata.items() if key not in header})
    header["format_version"] = FORMAT_VERSION

    lines = [FORMAT_ID, f"version: {FORMAT_VERSION}".encode("ascii")]
    for key in sorted(header):
        lines.append(f"{key}: {json.dumps(header[key], sort_keys=True)}".encode("utf-8"))
    lines.append(f"tensors: {len(model.params)}".encode("ascii"))
    lines.append(_END_HEADER)
    body = bytearray(b"\n".join(lines) + b"\n")

    for param in model.params:
        name = param.name.encode("utf-8")
        body += struct.pack("<H", len(name)) + name
        body += struct.pack("<B", param.values.ndim)
        body += struct.pack(f"<{param.values.ndim}I", *param.values.shape)
        body += np.ascontiguousarray(param.values, dtype="<f4").tobytes()
    return bytes(body) + hashlib.sha256(body).digest()


def _read_header(blob: bytes) -> Tuple[Dict[str, Any], int]:
    marker = b"\n" + _END_HEADER + b"\n"
    end = blob.find(marker)
    if not blob.startswith(FORMAT_ID + b"\n") or end < 0:
        raise ContainerError("not a fogpipe weight container")
    lines = blob[:end].decode("utf-8").split("\n")[1:]
    header: Dict[str, Any] = {}
    for line in lines:
        key, _, value = line.partition(": ")
        header[key] = value
    return header, end + len(marker)


def load_weights(blob: bytes) -> TrainedModel:
    """
    Rebuild a model from ``save_weights`` output.

    Raises:
        VersionMismatch: If the container version is not supported
        ChecksumFailure: If the content is truncated or altered
        ShapeMismatch: If stored tensors do not match the configured network
    """
    header, offset = _read_header(blob)
    if header.get("version") != str(FORMAT_VERSION):
        raise VersionMismatch(f"unsupported container version {header.get('version')}")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if len(blob) < offset + _DIGEST_SIZE or hashlib.sha256(body).digest() != digest:
        raise ChecksumFailure("weight container checksum does not match")

    meta = {key: json.loads(value) for key, value in header.items() if key not in ("version", "tensors")}
    cfg = ModelConfig.from_dict(meta.pop("config"))
    history = [EpochRecord(**record) for record in meta.pop("history", [])]
    count = int(header["tensors"])

    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", body, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if offset + 4 * size > len(body):
                raise ShapeMismatch(f"tensor {name} with shape {shape} overruns the container")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise ShapeMismatch(f"malformed tensor record: {e}") from e
    if offset != len(body):
        raise ShapeMismatch("tensor records do not fill the container")

    network = build_graph(cfg)
    network.parameters().load_values(tensors)
    return TrainedModel(config=cfg, network=network, history=history, metadata=meta)


def save_model(model: TrainedModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_weights(model))
    return path


def load_model(path: Union[str, Path]) -> TrainedModel:
    return load_weights(Path(path).read_bytes())
