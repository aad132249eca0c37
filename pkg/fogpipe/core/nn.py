"""
Neural-network engine for fogpipe.

A small numpy implementation of the layers the classifier needs, with
explicit forward and backward passes: 3x3 "same" convolution, batch
normalisation, ReLU, 2x2 max pooling, inverted dropout, global average
pooling and dense layers, plus softmax cross-entropy with an L2 penalty and
the Adam optimizer. Tensors use the (batch, height, width, channels)
layout. Everything is deterministic given weights, inputs, seed and mode.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fogpipe.core.errors import BadConfig, BadRate, DegenerateBatch, OddDims, ShapeMismatch

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "dropout", "globalavgpool", "dense", "softmax")

ArrayLike = Union[np.ndarray, "ParamTensor"]


@dataclass
class ParamTensor:
    """A named parameter with its gradient and Adam moments."""

    name: str
    values: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    l2: bool = False
    trainable: bool = True

    @classmethod
    def create(cls, name: str, values: np.ndarray, l2: bool = False, trainable: bool = True) -> "ParamTensor":
        values = np.array(values, copy=True)
        return cls(
            name=name,
            values=values,
            grad=np.zeros_like(values),
            adam_m=np.zeros_like(values),
            adam_v=np.zeros_like(values),
            l2=l2,
            trainable=trainable,
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    def copy(self) -> "ParamTensor":
        return ParamTensor(
            name=self.name,
            values=self.values.copy(),
            grad=self.grad.copy(),
            adam_m=self.adam_m.copy(),
            adam_v=self.adam_v.copy(),
            l2=self.l2,
            trainable=self.trainable,
        )


class ParamSet:
    """
    Ordered collection of the parameters of one model.

    Non-trainable entries (batch-norm running statistics) travel with the
    parameters so averaging and serialisation see the complete model state.
    """

    def __init__(self, params: Iterable[ParamTensor] = ()):
        self._params: Dict[str, ParamTensor] = {}
        for param in params:
            if param.name in self._params:
                raise ShapeMismatch(f"duplicate parameter name {param.name}")
            self._params[param.name] = param

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self._params.items()}

    def count(self, trainable_only: bool = False) -> int:
        return int(sum(p.values.size for p in self if p.trainable or not trainable_only))

    def values(self) -> Dict[str, np.ndarray]:
        """Copies of all parameter values keyed by name."""
        return {name: p.values.copy() for name, p in self._params.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        """
        Overwrite parameter values in place.

        Raises:
            ShapeMismatch: If names or shapes differ from this set
        """
        if set(values) != set(self._params):
            missing = sorted(set(self._params) ^ set(values))
            raise ShapeMismatch(f"parameter names differ: {missing}")
        for name, param in self._params.items():
            new = np.asarray(values[name])
            if new.shape != param.values.shape:
                raise ShapeMismatch(f"{name}: expected shape {param.shape}, got {new.shape}")
            param.values[...] = new

    def copy(self) -> "ParamSet":
        return ParamSet(p.copy() for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0

    def reset_optimizer(self) -> None:
        for p in self:
            p.adam_m[...] = 0
            p.adam_v[...] = 0


def _values(p: ArrayLike) -> np.ndarray:
    return p.values if isinstance(p, ParamTensor) else np.asarray(p)


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], dtype: Any = np.float32) -> np.ndarray:
    """Glorot/Xavier uniform initialisation for dense and convolution kernels."""
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# -- functional layers -------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, Tuple]:
    """
    3x3 convolution, stride 1, zero "same" padding.

    ``out[n, i, j, f] = sum_{k, l, c} w[k, l, c, f] * xpad[n, i + k, j + l, c] + b[f]``

    Args:
        x: Input of shape (N, H, W, C)
        w: Kernel of shape (3, 3, C, F)
        b: Bias of shape (F,)

    Returns:
        Output of shape (N, H, W, F) and the cache for the backward pass

    Raises:
        ShapeMismatch: On rank or channel mismatches
    """
    w, b = _values(w), _values(b)
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    n, h, wd, c = x.shape
    f = w.shape[3]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (N, H, W, C, 3, 3) -> (N, H, W, 3, 3, C)
    patches = sliding_window_view(padded, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = patches.reshape(n * h * wd, 9 * c)
    out = cols @ w.reshape(9 * c, f) + b
    return out.reshape(n, h, wd, f), (x.shape, cols, w)


def conv2d_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of ``conv2d_forward``."""
    x_shape, cols, w = cache
    n, h, wd, c = x_shape
    f = w.shape[3]
    if dy.shape != (n, h, wd, f):
        raise ShapeMismatch(f"conv2d backward: expected {(n, h, wd, f)}, got {dy.shape}")
    dy2 = dy.reshape(-1, f)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(9 * c, f).T).reshape(n, h, wd, 3, 3, c)
    dpadded = np.zeros((n, h + 2, wd + 2, c), dtype=dcols.dtype)
    for k in range(3):
        for l in range(3):
            dpadded[:, k:k + h, l:l + wd, :] += dcols[:, :, :, k, l, :]
    return dpadded[:, 1:-1, 1:-1, :], dw, db


def batchnorm_forward(
    x: np.ndarray,
    gamma: ArrayLike,
    beta: ArrayLike,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tuple[np.ndarray, Optional[Tuple]]:
    """
    Batch normalisation over every axis but the last.

    Train mode normalises by batch statistics and updates ``running_mean``
    and ``running_var`` in place with the given momentum; infer mode uses
    the running statistics.

    Raises:
        DegenerateBatch: In train mode with fewer than two samples
    """
    gamma, beta = _values(gamma), _values(beta)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatch(f"batch normalisation needs at least 2 samples, got {x.shape[0]}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        return gamma * xhat + beta, (xhat, inv_std, gamma, axes)
    xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return gamma * xhat + beta, (xhat, None, gamma, axes)


def batchnorm_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta) of ``batchnorm_forward``."""
    xhat, inv_std, gamma, axes = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if inv_std is None:
        raise ShapeMismatch("batch normalisation backward requires a train-mode forward pass")
    m = xhat.size // xhat.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, cache: np.ndarray) -> np.ndarray:
    return dy * cache


def maxpool2x2_forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    """
    2x2 max pooling with stride 2.

    Raises:
        OddDims: If height or width is odd
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool expects rank 4, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise OddDims(f"maxpool needs even spatial dims, got {h}x{w}")
    # blocks[..., k] enumerates the 2x2 cell row-major: TL, TR, BL, BR
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax)


def maxpool2x2_backward(dy: np.ndarray, cache: Tuple) -> np.ndarray:
    """Route each gradient to the first maximal cell of its block."""
    (n, h, w, c), argmax = cache
    blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, argmax[..., None], dy[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    if x.ndim != 4:
        raise ShapeMismatch(f"global average pooling expects rank 4, got shape {x.shape}")
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dy: np.ndarray, cache: Tuple[int, ...]) -> np.ndarray:
    n, h, w, c = cache
    return np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy()


def dense_forward(x: np.ndarray, w: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, Tuple]:
    w, b = _values(w), _values(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dy: np.ndarray, cache: Tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    if dy.shape != (x.shape[0], w.shape[1]):
        raise ShapeMismatch(f"dense backward: expected {(x.shape[0], w.shape[1])}, got {dy.shape}")
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def dropout_forward(
    x: np.ndarray,
    rate: float,
    seed: Union[int, Sequence[int]] = 0,
    mode: str = "train",
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Inverted dropout.

    In train mode each unit is zeroed with probability ``rate`` and the
    survivors are scaled by 1 / (1 - rate); the mask is a pure function of
    ``seed``. Infer mode is the identity.

    Raises:
        BadRate: If rate is outside [0, 1)
    """
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x, None
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def dropout_backward(dy: np.ndarray, cache: Optional[np.ndarray]) -> np.ndarray:
    return dy if cache is None else dy * cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def l2_penalty(params: Optional[Iterable[ParamTensor]], lam: float) -> float:
    """``lam * sum ||w||^2`` over parameters flagged for L2."""
    if params is None or lam == 0.0:
        return 0.0
    return float(lam * sum(float(np.sum(p.values.astype(np.float64) ** 2)) for p in params if p.l2))


def add_l2_gradient(params: Iterable[ParamTensor], lam: float) -> None:
    """Add ``2 * lam * w`` to the gradient of every L2-flagged parameter."""
    if lam == 0.0:
        return
    for p in params:
        if p.l2:
            p.grad += (2.0 * lam) * p.values


def softmax_xent_loss(
    logits: np.ndarray,
    onehot: np.ndarray,
    params: Optional[Iterable[ParamTensor]] = None,
    lam: float = 0.001,
) -> Tuple[float, np.ndarray]:
    """
    Mean categorical cross-entropy plus the L2 penalty.

    Returns:
        The loss and the gradient with respect to the logits,
        ``(softmax - onehot) / batch``
    """
    if logits.shape != onehot.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {onehot.shape}")
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-(onehot * log_probs).sum() / batch)
    dlogits = (np.exp(log_probs) - onehot) / batch
    return loss + l2_penalty(params, lam), dlogits.astype(logits.dtype)


def one_hot(labels: np.ndarray, classes: int = 2, dtype: Any = np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def adam_step(
    params: Iterable[ParamTensor],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-7,
    t: int = 1,
) -> None:
    """
    One bias-corrected Adam update of every trainable parameter, in place.

    Args:
        params: Parameters with gradients filled in
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor
        t: Step number, starting at 1
    """
    if t < 1:
        raise BadConfig(f"Adam step number must be >= 1, got {t}")
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / correction1
        v_hat = p.adam_v / correction2
        p.values -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)


# -- layer objects -----------------------------------------------------------


@dataclass
class LayerSpec:
    """Description of one layer in a stack."""

    kind: str
    filters: Optional[int] = None
    units: Optional[int] = None
    rate: Optional[float] = None
    l2: bool = False

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise BadConfig(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.filters is None or self.filters < 1):
            raise BadConfig("conv2d needs filters >= 1")
        if self.kind == "dense" and (self.units is None or self.units < 1):
            raise BadConfig("dense needs units >= 1")
        if self.kind == "dropout" and (self.rate is None or not 0.0 <= self.rate < 1.0):
            raise BadConfig("dropout rate must be in [0, 1)")


class Layer:
    """Base class: forward caches what backward needs."""

    kind = ""

    def __init__(self) -> None:
        self.uid = 0
        self._cache: Any = None

    def parameters(self) -> List[ParamTensor]:
        return []

    def forward(self, x: np.ndarray, mode: str = "train", seed: int = 0) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, filters: int, rng: np.random.Generator,
                 dtype: Any = np.float32, l2: bool = False):
        super().__init__()
        self.kernel = ParamTensor.create(f"{name}/kernel", glorot_uniform(rng, (3, 3, in_channels, filters), dtype), l2=l2)
        self.bias = ParamTensor.create(f"{name}/bias", np.zeros(filters, dtype=dtype))

    def parameters(self) -> List[ParamTensor]:
        return [self.kernel, self.bias]

    def forward(self, x, mode="train", seed=0):
        out, self._cache = conv2d_forward(x, self.kernel, self.bias)
        return out

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._cache)
        self.kernel.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, channels: int, dtype: Any = np.float32):
        super().__init__()
        self.gamma = ParamTensor.create(f"{name}/gamma", np.ones(channels, dtype=dtype))
        self.beta = ParamTensor.create(f"{name}/beta", np.zeros(channels, dtype=dtype))
        self.moving_mean = ParamTensor.create(f"{name}/moving_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.moving_var = ParamTensor.create(f"{name}/moving_var", np.ones(channels, dtype=dtype), trainable=False)

    def parameters(self) -> List[ParamTensor]:
        return [self.gamma, self.beta, self.moving_mean, self.moving_var]

    def forward(self, x, mode="train", seed=0):
        out, self._cache = batchnorm_forward(
            x, self.gamma, self.beta, self.moving_mean.values, self.moving_var.values, mode
        )
        return out

    def backward(self, dy):
        dx, dgamma, dbeta = batchnorm_backward(dy, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="train", seed=0):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dy):
        return relu_backward(dy, self._cache)


class MaxPool2x2(Layer):
    kind = "maxpool"

    def forward(self, x, mode="train", seed=0):
        out, self._cache = maxpool2x2_forward(x)
        return out

    def backward(self, dy):
        return maxpool2x2_backward(dy, self._cache)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, mode="train", seed=0):
        out, self._cache = dropout_forward(x, self.rate, (int(seed), self.uid), mode)
        return out

    def backward(self, dy):
        return dropout_backward(dy, self._cache)


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x, mode="train", seed=0):
        out, self._cache = global_avg_pool_forward(x)
        return out

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._cache)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, units: int, rng: np.random.Generator,
                 dtype: Any = np.float32, l2: bool = False):
        super().__init__()
        self.kernel = ParamTensor.create(f"{name}/kernel", glorot_uniform(rng, (in_features, units), dtype), l2=l2)
        self.bias = ParamTensor.create(f"{name}/bias", np.zeros(units, dtype=dtype))

    def parameters(self) -> List[ParamTensor]:
        return [self.kernel, self.bias]

    def forward(self, x, mode="train", seed=0):
        out, self._cache = dense_forward(x, self.kernel, self.bias)
        return out

    def backward(self, dy):
        dx, dw, db = dense_backward(dy, self._cache)
        self.kernel.grad += dw
        self.bias.grad += db
        return dx


class Sequential:
    """A stack of layers applied in order."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    @classmethod
    def from_specs(
        cls,
        specs: Sequence[LayerSpec],
        in_channels: int,
        prefix: str,
        rng: np.random.Generator,
        dtype: Any = np.float32,
    ) -> Tuple["Sequential", int]:
        """
        Build a stack from layer specs.

        Returns:
            The stack and its output width (channels or features)
        """
        layers: List[Layer] = []
        width = in_channels
        counts: Dict[str, int] = {}
        for spec in specs:
            spec.validate()
            index = counts.get(spec.kind, 0)
            counts[spec.kind] = index + 1
            name = f"{prefix}/{spec.kind}{index}"
            if spec.kind == "conv2d":
                layers.append(Conv2D(name, width, spec.filters, rng, dtype, spec.l2))
                width = spec.filters
            elif spec.kind == "dense":
                layers.append(Dense(name, width, spec.units, rng, dtype, spec.l2))
                width = spec.units
            elif spec.kind == "batchnorm":
                layers.append(BatchNorm(name, width, dtype))
            elif spec.kind == "relu":
                layers.append(ReLU())
            elif spec.kind == "maxpool":
                layers.append(MaxPool2x2())
            elif spec.kind == "dropout":
                layers.append(Dropout(spec.rate))
            elif spec.kind == "globalavgpool":
                layers.append(GlobalAvgPool())
            # softmax is folded into the loss and into predict_proba
        return cls(layers), width

    def parameters(self) -> ParamSet:
        return ParamSet(p for layer in self.layers for p in layer.parameters())

    def forward(self, x: np.ndarray, mode: str = "train", seed: int = 0) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, mode, seed)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def assign_uids(stacks: Iterable[Sequential]) -> None:
    """Number every layer so dropout masks differ per layer but not per run."""
    uid = 0
    for stack in stacks:
        for layer in stack.layers:
            uid += 1
            layer.uid = uid


class MultiBranchNetwork:
    """
    Parallel per-channel branches whose outputs are concatenated into a head.

    ``forward`` takes one input tensor per branch, in branch order.
    """

    def __init__(self, branch_names: Sequence[str], branches: Sequence[Sequential], head: Sequential,
                 dtype: Any = np.float32):
        if len(branch_names) != len(branches):
            raise ShapeMismatch("one branch per name required")
        self.branch_names = list(branch_names)
        self.branches = list(branches)
        self.head = head
        self.dtype = np.dtype(dtype)
        self._widths: List[int] = []
        assign_uids(self.branches + [self.head])
        self._params = ParamSet(
            [p for branch in self.branches for p in branch.parameters()] + list(self.head.parameters())
        )

    def parameters(self) -> ParamSet:
        return self._params

    def forward(self, inputs: Sequence[np.ndarray], mode: str = "train", seed: int = 0) -> np.ndarray:
        if len(inputs) != len(self.branches):
            raise ShapeMismatch(f"expected {len(self.branches)} inputs, got {len(inputs)}")
        features = [
            branch.forward(np.asarray(x, dtype=self.dtype), mode, seed)
            for branch, x in zip(self.branches, inputs)
        ]
        self._widths = [f.shape[1] for f in features]
        return self.head.forward(np.concatenate(features, axis=1), mode, seed)

    def backward(self, dlogits: np.ndarray) -> List[np.ndarray]:
        dfeatures = self.head.backward(dlogits)
        splits = np.cumsum(self._widths)[:-1]
        return [branch.backward(part) for branch, part in zip(self.branches, np.split(dfeatures, splits, axis=1))]

    def predict_proba(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        return softmax(self.forward(inputs, mode="infer").astype(np.float64))


# -- gradient checking -------------------------------------------------------


@dataclass
class GradientCheckReport:
    """Analytic versus central-difference gradients."""

    tolerance: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def gradient_check(
    graph: Any,
    inputs: Any,
    tolerance: float = 1e-4,
    labels: Optional[np.ndarray] = None,
    l2_lambda: float = 0.0,
    epsilon: float = 1e-5,
    seed: int = 0,
    mode: str = "train",
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientCheckReport:
    """
    Compare backprop gradients with central finite differences.

    ``graph`` is anything with ``forward(inputs, mode, seed)``,
    ``backward(dy)`` and ``parameters()``. With ``labels`` the loss is
    softmax cross-entropy plus the L2 penalty; without, it is a fixed random
    projection of the output. The error of a parameter is
    ``||a - n|| / max(||a|| + ||n||, 1e-6)`` over the checked entries, so
    gradients that are essentially zero are compared absolutely.

    Args:
        graph: Network or layer stack in double precision
        inputs: Input accepted by ``graph.forward``
        tolerance: Pass threshold on the largest error
        labels: Optional integer class labels
        l2_lambda: L2 coefficient used with labels
        epsilon: Finite-difference step
        seed: Seed passed to every forward pass (fixes dropout masks)
        mode: "train" or "infer"
        max_entries: Check at most this many random entries per parameter
        rng: Generator for the projection and entry sampling
    """
    rng = rng or np.random.default_rng(0)
    params = graph.parameters()
    probe = graph.forward(inputs, mode, seed)
    projection = rng.standard_normal(probe.shape)
    targets = one_hot(labels, probe.shape[1], np.float64) if labels is not None else None

    def evaluate() -> Tuple[float, np.ndarray]:
        out = graph.forward(inputs, mode, seed)
        if targets is None:
            return float(np.sum(out * projection)), projection.astype(out.dtype)
        return softmax_xent_loss(out, targets, params, l2_lambda)

    params.zero_grad()
    _, dout = evaluate()
    graph.backward(dout)
    if targets is not None:
        add_l2_gradient(params, l2_lambda)
    analytic = {p.name: p.grad.copy() for p in params if p.trainable}

    report = GradientCheckReport(tolerance=tolerance)
    for p in params:
        if not p.trainable:
            continue
        flat = p.values.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        numeric = np.zeros(entries.shape[0])
        for k, index in enumerate(entries):
            original = flat[index]
            flat[index] = original + epsilon
            plus, _ = evaluate()
            flat[index] = original - epsilon
            minus, _ = evaluate()
            flat[index] = original
            numeric[k] = (plus - minus) / (2.0 * epsilon)
        exact = analytic[p.name].reshape(-1)[entries]
        scale = max(np.linalg.norm(exact) + np.linalg.norm(numeric), 1e-6)
        report.per_parameter[p.name] = float(np.linalg.norm(exact - numeric) / scale)
    logger.debug("Gradient check: max relative error %.3e", report.max_relative_error)
    return report
