"""The s-Perceptron: n paraneurons over a complete undirected graph.

Each paraneuron j sees the raw input through its own directed weights (column
j of ``W``) and the cyclic input differences through edge weights shared with
every other paraneuron (row/column j of the symmetric ``V``)::

    x_d = x - roll(x, -1)                  # x_i - x_{i+1}, plus x_n - x_1
    y   = relu(x_d @ V) + relu(x @ W) [+ b]     clamped at 0
    logits[k] = mean(y[k*g:(k+1)*g]),  g = n // class_count
    probs = softmax(logits)

``V`` is never stored; it is ``(V_raw + V_raw.T) / 2`` so any update to the
unconstrained ``V_raw`` keeps the edge weights symmetric.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadHeaderError,
    InputTooShortError,
    ModelTruncatedError,
    NonFiniteParameterError,
    NotSquareError,
    ShapeMismatchError,
    TooFewOutputsError,
    VersionMismatchError,
)

MODEL_MAGIC = b"SPCT"
MODEL_VERSION = 1
_FLAG_BIAS = 0x1


@dataclass(frozen=True)
class ModelConfig:
    n: int = 784
    class_count: int = 10
    bias_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.n < self.class_count:
            raise ValueError(
                f"n={self.n} paraneurons cannot feed {self.class_count} classes"
            )

    @property
    def group_size(self) -> int:
        return self.n // self.class_count


@dataclass
class ModelParams:
    W: np.ndarray
    V_raw: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def V(self) -> np.ndarray:
        return symmetrize(self.V_raw)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.W.copy(),
            self.V_raw.copy(),
            None if self.bias is None else self.bias.copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "V_raw": self.V_raw}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())


@dataclass
class ForwardTrace:
    x: np.ndarray
    x_d: np.ndarray
    a_v: np.ndarray
    a_w: np.ndarray
    y: np.ndarray
    pooled: np.ndarray
    probs: np.ndarray
    pre_clamp: Optional[np.ndarray] = None  # only kept when a bias is present


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded symmetric-uniform init on [-1/sqrt(n), 1/sqrt(n)]."""
    n = config.n
    limit = np.sqrt(1.0 / n)
    rng = np.random.default_rng(config.seed)
    W = rng.uniform(-limit, limit, size=(n, n))
    V_raw = rng.uniform(-limit, limit, size=(n, n))
    bias = np.zeros(n) if config.bias_enabled else None
    return ModelParams(W, V_raw, bias)


def zero_params(config: ModelConfig) -> ModelParams:
    n = config.n
    return ModelParams(
        np.zeros((n, n)), np.zeros((n, n)),
        np.zeros(n) if config.bias_enabled else None,
    )


def cyclic_difference(x: np.ndarray) -> np.ndarray:
    """``x[i] - x[i+1]`` along the last axis, wrapping ``x[n-1] - x[0]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise InputTooShortError(f"need at least 2 inputs, got {x.shape[-1]}")
    return x - np.roll(x, -1, axis=-1)


def symmetrize(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSquareError(f"expected a square matrix, got shape {M.shape}")
    # (M + M.T) / 2 is exactly symmetric in IEEE arithmetic since + commutes
    return (M + M.T) / 2.0


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def pool(y: np.ndarray, class_count: int) -> np.ndarray:
    """Means of ``class_count`` adjacent groups of ``n // class_count`` outputs.

    The trailing ``n % class_count`` outputs are not used.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    if n < class_count:
        raise TooFewOutputsError(f"{n} outputs cannot fill {class_count} groups")
    g = n // class_count
    used = y[..., : g * class_count]
    return used.reshape(*y.shape[:-1], class_count, g).mean(axis=-1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def pooled_probabilities(y: np.ndarray, class_count: int) -> np.ndarray:
    return softmax(pool(y, class_count))


def check_shapes(x: np.ndarray, params: ModelParams, config: ModelConfig):
    n = config.n
    if x.shape[-1] != n:
        raise ShapeMismatchError(f"input length {x.shape[-1]} != n={n}")
    if params.W.shape != (n, n) or params.V_raw.shape != (n, n):
        raise ShapeMismatchError(
            f"weights {params.W.shape}/{params.V_raw.shape} do not match n={n}"
        )
    if config.bias_enabled:
        if params.bias is None or params.bias.shape != (n,):
            raise ShapeMismatchError("bias_enabled but bias missing or mis-shaped")
    elif params.bias is not None:
        raise ShapeMismatchError("bias present but bias_enabled is off")


def forward(x, params: ModelParams, config: ModelConfig, *, check: bool = True) -> ForwardTrace:
    """Evaluate one input (shape (n,)) or a batch (shape (B, n)).

    ``check=False`` skips the shape and finiteness validation; the training
    loops use it on parameters they already own.
    """
    x = np.asarray(x, dtype=np.float64)
    if check:
        check_shapes(x, params, config)
        if not params.all_finite():
            raise NonFiniteParameterError("parameters contain NaN or inf")
    x_d = cyclic_difference(x)
    a_v = x_d @ symmetrize(params.V_raw)
    a_w = x @ params.W
    y = relu(a_v) + relu(a_w)
    pre_clamp = None
    if params.bias is not None:
        pre_clamp = y + params.bias
        y = np.maximum(pre_clamp, 0.0)
    pooled = pool(y, config.class_count)
    probs = softmax(pooled)
    return ForwardTrace(x, x_d, a_v, a_w, y, pooled, probs, pre_clamp)


def predict(x, params: ModelParams, config: ModelConfig):
    """Class index (or array of indices for a batch); ties go to the lowest class."""
    probs = forward(x, params, config).probs
    return np.argmax(probs, axis=-1)


def parameter_count(config: ModelConfig, convention: str = "paper") -> int:
    """Number of trainable parameters.

    ``paper`` counts n^2 directed weights plus n^2/2 edge weights (floored for
    odd n) and no bias, which is how the 921,984 figure for n=784 arises.
    ``free`` counts the true degrees of freedom of a symmetric matrix,
    n(n+1)/2, and adds the bias when enabled.
    """
    n = config.n
    if convention == "paper":
        return n * n + (n * n) // 2
    if convention == "free":
        return n * n + n * (n + 1) // 2 + (n if config.bias_enabled else 0)
    raise ValueError(f"unknown convention {convention!r}")


# -- model file ---------------------------------------------------------------
# "SPCT" | u8 version | <u32 n | <u32 class_count | <u32 flags |
# W (n*n <f8, row-major) | V_raw (n*n <f8) | bias (n <f8, if flags & 1)

_HEADER = struct.Struct("<4sBIII")


def model_to_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    check_shapes(np.zeros(config.n), params, config)
    if not params.all_finite():
        raise NonFiniteParameterError("refusing to save non-finite parameters")
    flags = _FLAG_BIAS if config.bias_enabled else 0
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, config.n, config.class_count, flags)]
    for arr in params.arrays().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes, seed: int = 0) -> tuple[ModelParams, ModelConfig]:
    if len(data) < 5 or data[:4] != MODEL_MAGIC:
        raise BadHeaderError("not an s-Perceptron model file (bad magic)")
    if data[4] != MODEL_VERSION:
        raise VersionMismatchError(f"model format version {data[4]}, expected {MODEL_VERSION}")
    if len(data) < _HEADER.size:
        raise ModelTruncatedError("model header is truncated")
    _, _, n, class_count, flags = _HEADER.unpack_from(data)
    if flags & ~_FLAG_BIAS:
        raise BadHeaderError(f"unknown flag bits 0x{flags:x}")
    try:
        config = ModelConfig(n, class_count, bool(flags & _FLAG_BIAS), seed)
    except ValueError as exc:
        raise BadHeaderError(str(exc)) from None
    sizes = [n * n, n * n] + ([n] if config.bias_enabled else [])
    expected = _HEADER.size + 8 * sum(sizes)
    if len(data) < expected:
        raise ModelTruncatedError(f"model file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise BadHeaderError(f"{len(data) - expected} unexpected trailing bytes")
    arrays = []
    offset = _HEADER.size
    for size in sizes:
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64)
        arrays.append(arr)
        offset += 8 * size
    W = arrays[0].reshape(n, n)
    V_raw = arrays[1].reshape(n, n)
    bias = arrays[2] if config.bias_enabled else None
    return ModelParams(W, V_raw, bias), config


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(params: ModelParams, config: ModelConfig, path):
    atomic_write_bytes(path, model_to_bytes(params, config))


def load_model(path) -> tuple[ModelParams, ModelConfig]:
    return model_from_bytes(Path(path).read_bytes())
