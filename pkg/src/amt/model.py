"""Frame-wise 1-D CNN over CQT vectors, written directly in numpy.

Layout inside the network is channel-last: a batch of feature maps has
shape ``(batch, length, channels)``. Convolutions are "valid" with stride
one and are computed as im2col matrix products; pooling is non-overlapping
max pooling that drops any remainder.

Inputs are raw (linear) CQT magnitudes; the network applies
``log1p(log_gain * x)`` itself so that feature files stay linear.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AMTM"
CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7
LOGIT_CLIP = 30.0


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    n_input: int = 216
    convs: Tuple[Tuple[int, int], ...] = ((25, 32), (5, 64))  # (kernel width, filters)
    pool: int = 3
    hidden: int = 256
    n_output: int = 72
    dropout: float = 0.25
    log_gain: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(tuple(int(v) for v in c) for c in self.convs))
        self.feature_lengths()

    def feature_lengths(self) -> List[int]:
        """Sequence length after each conv+pool stage, starting with the input."""
        lengths = [self.n_input]
        for k, _ in self.convs:
            conv_len = lengths[-1] - k + 1
            if conv_len < self.pool:
                raise ValueError(f"architecture collapses: length {lengths[-1]} "
                                 f"cannot take kernel {k} and pool {self.pool}")
            lengths.append(conv_len // self.pool)
        return lengths

    @property
    def flat_size(self) -> int:
        return self.feature_lengths()[-1] * self.convs[-1][1]

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        channels = 1
        for i, (k, f) in enumerate(self.convs):
            shapes += [(f"conv{i}.w", (f, channels, k)), (f"conv{i}.b", (f,))]
            channels = f
        shapes += [("dense0.w", (self.flat_size, self.hidden)), ("dense0.b", (self.hidden,)),
                   ("dense1.w", (self.hidden, self.n_output)), ("dense1.b", (self.n_output,))]
        return shapes


@dataclass
class ModelParams:
    arch: Architecture
    tensors: Dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.seed)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _fans(shape) -> Tuple[int, int]:
    if len(shape) == 3:  # (filters, channels, kernel)
        f, c, k = shape
        return c * k, f * k
    return shape[0], shape[1]


def init_model(arch: Architecture = Architecture(), seed: int = 0,
               dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(arch, tensors, seed)


def glorot_bound(shape) -> float:
    fan_in, fan_out = _fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


# -- forward / backward -------------------------------------------------------

def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.arch.n_input:
        raise ValueError(f"expected features of shape (B, {params.arch.n_input}), got {x.shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray, train: bool, rng):
    arch = params.arch
    dtype = params.dtype
    batch = x.shape[0]
    h = np.log1p(arch.log_gain * np.maximum(x, 0)).astype(dtype)[:, :, None]
    convs = []
    for i, (k, f) in enumerate(arch.convs):
        w = params[f"conv{i}.w"]
        channels = h.shape[2]
        cols = sliding_window_view(h, k, axis=1)  # (B, L', C, k)
        conv_len = cols.shape[1]
        cols = cols.reshape(batch * conv_len, channels * k)
        z = (cols @ w.reshape(f, channels * k).T + params[f"conv{i}.b"]).reshape(batch, conv_len, f)
        active = z > 0
        a = z * active
        n_pool = conv_len // arch.pool
        windows = a[:, :n_pool * arch.pool].reshape(batch, n_pool, arch.pool, f)
        arg = windows.argmax(axis=2)
        h = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]
        convs.append((cols, active, arg, conv_len, channels))

    flat = h.reshape(batch, -1)
    z0 = flat @ params["dense0.w"] + params["dense0.b"]
    active0 = z0 > 0
    a0 = z0 * active0
    keep = None
    if train and arch.dropout > 0:
        keep = (rng.random(a0.shape) >= arch.dropout).astype(dtype) / dtype.type(1.0 - arch.dropout)
        a0 = a0 * keep
    logits = a0 @ params["dense1.w"] + params["dense1.b"]
    probs = 1.0 / (1.0 + np.exp(-np.clip(logits.astype(np.float64), -LOGIT_CLIP, LOGIT_CLIP)))
    cache = (convs, flat, active0, keep, a0, h.shape)
    return probs, cache


def forward(params: ModelParams, batch: np.ndarray, train: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sigmoid pitch probabilities, shape (B, n_output).

    In train mode dropout draws its mask from ``rng``; otherwise it is the
    identity and the call is deterministic.
    """
    batch = _check_input(params, batch)
    if train and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    return _forward(params, batch, train, rng)[0]


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))


def _backward(params: ModelParams, cache, probs, labels) -> Dict[str, np.ndarray]:
    arch = params.arch
    dtype = params.dtype
    convs, flat, active0, keep, a0, pooled_shape = cache
    batch = probs.shape[0]
    y = np.asarray(labels, dtype=np.float64)
    # d(loss)/d(logit); zero where the probability clamp is active
    live = (probs > PROB_CLAMP) & (probs < 1 - PROB_CLAMP)
    dlogits = ((probs - y) * live / probs.size).astype(dtype)

    grads = {}
    grads["dense1.w"] = a0.T @ dlogits
    grads["dense1.b"] = dlogits.sum(axis=0)
    da0 = dlogits @ params["dense1.w"].T
    if keep is not None:
        da0 *= keep
    dz0 = da0 * active0
    grads["dense0.w"] = flat.T @ dz0
    grads["dense0.b"] = dz0.sum(axis=0)
    dh = (dz0 @ params["dense0.w"].T).reshape(pooled_shape)

    for i in reversed(range(len(arch.convs))):
        k, f = arch.convs[i]
        cols, active, arg, conv_len, channels = convs[i]
        n_pool = dh.shape[1]
        da = np.zeros((batch, conv_len, f), dtype=dtype)
        windows = da[:, :n_pool * arch.pool].reshape(batch, n_pool, arch.pool, f)
        np.put_along_axis(windows, arg[:, :, None, :], dh[:, :, None, :], axis=2)
        dz = (da * active).reshape(batch * conv_len, f)
        w = params[f"conv{i}.w"]
        grads[f"conv{i}.w"] = (dz.T @ cols).reshape(f, channels, k)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i == 0:
            break
        dcols = (dz @ w.reshape(f, channels * k)).reshape(batch, conv_len, channels, k)
        dh = np.zeros((batch, conv_len + k - 1, channels), dtype=dtype)
        for j in range(k):
            dh[:, j:j + conv_len, :] += dcols[:, :, :, j]
    return {name: grads[name] for name, _ in arch.param_shapes()}


def loss_and_grads(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
                   rng: Optional[np.random.Generator] = None):
    """Train-mode forward pass followed by exact backpropagation.

    Returns ``(loss, probs, grads)``. Without ``rng`` dropout is disabled,
    which is what the gradient checks use.
    """
    batch = _check_input(params, batch)
    labels = np.asarray(labels)
    if labels.shape != (batch.shape[0], params.arch.n_output):
        raise ValueError(f"labels shape {labels.shape} does not match batch")
    probs, cache = _forward(params, batch, rng is not None, rng)
    return bce_loss(probs, labels), probs, _backward(params, cache, probs, labels)


def backward(params: ModelParams, batch: np.ndarray, labels: np.ndarray,
             rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    return loss_and_grads(params, batch, labels, rng)[2]


# -- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(t) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t) for k, t in params.tensors.items()})


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState,
              hyper: AdamConfig = AdamConfig()) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * (g * g)
        step = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        params.tensors[name] -= step.astype(params.tensors[name].dtype)
    return params, state


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    threshold: float = 0.5
    seed: int = 0
    adam: AdamConfig = AdamConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    seconds: float


@dataclass
class TrainHistory:
    initial_loss: float = float("nan")
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.epochs])


def predict_proba(params: ModelParams, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    features = np.asarray(features)
    out = np.empty((features.shape[0], params.arch.n_output))
    for lo in range(0, features.shape[0], batch_size):
        out[lo:lo + batch_size] = forward(params, features[lo:lo + batch_size])
    return out


def predict(params: ModelParams, features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary label matrix: 1 where the eval-mode probability is strictly above threshold."""
    return (predict_proba(params, features) > threshold).astype(np.uint8)


def _exact_match(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.all(pred == labels, axis=1))) if len(labels) else 0.0


def _eval_loss(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return bce_loss(predict_proba(params, x), y)


def train(train_set: Tuple[np.ndarray, np.ndarray], val_set: Tuple[np.ndarray, np.ndarray],
          config: TrainConfig = TrainConfig(), arch: Architecture = Architecture(),
          dtype=np.float32) -> Tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam with early stopping on validation subset accuracy.

    Returns the parameters of the best validation epoch together with the
    full history.
    """
    x_train, y_train = (np.asarray(a) for a in train_set)
    x_val, y_val = (np.asarray(a) for a in val_set)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")

    init_seq, run_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = init_model(arch, int(init_seq.generate_state(1)[0]), dtype=dtype)
    params.seed = config.seed
    rng = np.random.default_rng(run_seq)
    state = AdamState.zeros_like(params)

    history = TrainHistory(initial_loss=_eval_loss(params, x_train, y_train))
    best = params.copy()
    best_acc = -1.0
    wait = 0
    n = len(x_train)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, _, grads = loss_and_grads(params, x_train[idx], y_train[idx], rng)
            adam_step(params, grads, state, config.adam)
            total += loss * idx.size
        train_acc = _exact_match(predict(params, x_train, config.threshold), y_train)
        val_acc = _exact_match(predict(params, x_val, config.threshold), y_val)
        rec = EpochRecord(epoch, total / n, train_acc, val_acc, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f (%.1fs)",
                 epoch, rec.loss, train_acc, val_acc, rec.seconds)

        if val_acc > best_acc:
            best_acc, best, wait = val_acc, params.copy(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                break
    return best, history


# -- checkpoints --------------------------------------------------------------

def _pack_arch(arch: Architecture) -> bytes:
    out = struct.pack("<IIIIdd", arch.n_input, arch.n_output, arch.pool, arch.hidden,
                      arch.dropout, arch.log_gain)
    out += struct.pack("<I", len(arch.convs))
    for k, f in arch.convs:
        out += struct.pack("<II", k, f)
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def save_model(params: ModelParams, path, state: Optional[AdamState] = None) -> None:
    """Write an AMTM checkpoint. Tensors are stored as little-endian float32."""
    shapes = params.arch.param_shapes()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IIQ", CHECKPOINT_VERSION, 1 if state is not None else 0, params.seed)
    out += _pack_arch(params.arch)
    out += struct.pack("<I", len(shapes))
    for name, shape in shapes:
        encoded = name.encode()
        out += struct.pack("<B", len(encoded)) + encoded
        out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    for name, _ in shapes:
        out += np.ascontiguousarray(params[name], dtype="<f4").tobytes()
    if state is not None:
        out += struct.pack("<Q", state.step)
        for moments in (state.m, state.v):
            for name, _ in shapes:
                out += np.ascontiguousarray(moments[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_model(path, with_state: bool = False):
    """Read an AMTM checkpoint; returns params, or (params, state) if asked."""
    r = _Reader(Path(path).read_bytes())
    if r.raw(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an AMTM checkpoint")
    version, flags, seed = r.take("<IIQ")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n_input, n_output, pool, hidden, dropout, log_gain = r.take("<IIIIdd")
    (n_convs,) = r.take("<I")
    convs = tuple(r.take("<II") for _ in range(n_convs))
    try:
        arch = Architecture(n_input, convs, pool, hidden, n_output, dropout, log_gain)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

    (n_tensors,) = r.take("<I")
    stored = []
    for _ in range(n_tensors):
        (name_len,) = r.take("<B")
        name = r.raw(name_len).decode()
        (ndim,) = r.take("<B")
        stored.append((name, tuple(r.take(f"<{ndim}I"))))
    if stored != arch.param_shapes():
        raise CheckpointError(f"{path}: tensor table does not match the architecture")

    def tensors():
        return {name: np.frombuffer(r.raw(4 * math.prod(shape)), dtype="<f4")
                .reshape(shape).astype(np.float32) for name, shape in stored}

    params = ModelParams(arch, tensors(), seed)
    state = None
    if flags & 1:
        (step,) = r.take("<Q")
        state = AdamState(tensors(), tensors(), step)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return (params, state) if with_state else params
