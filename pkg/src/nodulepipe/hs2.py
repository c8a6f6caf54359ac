"""Small conv+FC classifier separating nodule patches from tissue look-alikes.

Two 3x3 convolutions (pad 1, ReLU, 2x2 max pool) followed by three ReLU
fully-connected layers and a 2-way softmax. Forward, backprop, and SGD
training are implemented directly on numpy arrays: parameters live in
float32, all arithmetic runs in float64 so gradients are finite-difference
checkable, and every step is deterministic given the seed.

Class index 0 is tissue, index 1 is nodule.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError

LABELS = ("tissue", "nodule")

MODEL_MAGIC = b"HS2M"
MODEL_VERSION = 1

DEFAULT_IN_SIZE = 48
DEFAULT_CONV_CHANNELS = (30, 50)
DEFAULT_FC_SIZES = (2048, 1024, 512)

PARAM_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b",
    "out_w", "out_b",
)


@dataclass(frozen=True)
class Prediction:
    """Softmax output for one patch."""

    p_nodule: float
    label: str

    @property
    def p_tissue(self) -> float:
        return 1.0 - self.p_nodule


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings. The decay schedule divides the rate by 10 every
    lr_decay_epochs; the full-scale run uses 2000 epochs, the desk-scale
    default is 50."""

    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 500

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr_decay_epochs < 1:
            raise ValidationError(f"lr_decay_epochs must be >= 1, got {self.lr_decay_epochs}")


@dataclass
class Hs2Model:
    """Weights and biases of the classifier, float32, He-initialized."""

    in_size: int
    conv_channels: tuple[int, int]
    fc_sizes: tuple[int, int, int]
    rng_seed: int
    params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def flat_features(self) -> int:
        quarter = self.in_size // 4
        return self.conv_channels[1] * quarter * quarter

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv_channels
        f1, f2, f3 = self.fc_sizes
        return {
            "conv1_w": (c1, 1, 3, 3), "conv1_b": (c1,),
            "conv2_w": (c2, c1, 3, 3), "conv2_b": (c2,),
            "fc1_w": (f1, self.flat_features), "fc1_b": (f1,),
            "fc2_w": (f2, f1), "fc2_b": (f2,),
            "fc3_w": (f3, f2), "fc3_b": (f3,),
            "out_w": (2, f3), "out_b": (2,),
        }


def initialize(
    seed: int,
    in_size: int = DEFAULT_IN_SIZE,
    conv_channels: tuple[int, int] = DEFAULT_CONV_CHANNELS,
    fc_sizes: tuple[int, int, int] = DEFAULT_FC_SIZES,
) -> Hs2Model:
    """Build a model with He (fan-in) weight scaling and zero biases."""
    if in_size < 4 or in_size % 4 != 0:
        raise ValidationError(f"input side must be a positive multiple of 4, got {in_size}")
    model = Hs2Model(
        in_size=in_size,
        conv_channels=tuple(conv_channels),
        fc_sizes=tuple(fc_sizes),
        rng_seed=seed,
    )
    rng = np.random.default_rng(seed)
    for name, shape in model.param_shapes().items():
        if name.endswith("_b"):
            model.params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = math.sqrt(2.0 / fan_in)
            model.params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return model


# -- layer primitives (float64 compute) --------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (N, C, H, W) -> (N*H*W, C*9) for 3x3 kernels at pad 1, stride 1;
    # one row per output position keeps the convolution a single GEMM
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv_forward(x, w, b):
    n, c, h, width = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    out2d = cols @ w.reshape(f, -1).T + b
    out = out2d.reshape(n, h, width, f).transpose(0, 3, 1, 2)
    return out, cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    n, c, h, width = x_shape
    f = w.shape[0]
    dout2d = dout.transpose(0, 2, 3, 1).reshape(n * h * width, f)
    db = dout2d.sum(axis=0)
    dwr = dout2d.T @ cols  # (F, C*9)
    if not need_dx:
        return None, dwr.reshape(w.shape), db
    dcols = dout2d @ w.reshape(f, -1)  # (N*P, C*9)
    dsq = np.ascontiguousarray(
        dcols.reshape(n, h, width, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    )  # (N, C, H, W, 3, 3)
    dxp = np.zeros((n, c, h + 2, width + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + h, kj : kj + width] += dsq[:, :, :, :, ki, kj]
    return dxp[:, :, 1 : h + 1, 1 : width + 1], dwr.reshape(w.shape), db


def _pool_forward(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = xr.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    dxr = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: Hs2Model, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != model.in_size or x.shape[2] != model.in_size:
        raise ValidationError(
            f"expected (n, {model.in_size}, {model.in_size}) input grids, got {np.shape(images)}"
        )
    if not np.isfinite(x).all():
        raise ValidationError("input grid contains non-finite values")
    return x[:, None]  # (N, 1, H, W)


def _float64_params(model: Hs2Model) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in model.params.items()}


def _forward_batch(model: Hs2Model, x: np.ndarray, keep_cache: bool = False, params=None):
    p = _float64_params(model) if params is None else params
    a1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
    r1 = np.maximum(a1, 0.0)
    p1, idx1 = _pool_forward(r1)
    a2, cols2 = _conv_forward(p1, p["conv2_w"], p["conv2_b"])
    r2 = np.maximum(a2, 0.0)
    p2, idx2 = _pool_forward(r2)
    flat = p2.reshape(x.shape[0], -1)

    h1 = flat @ p["fc1_w"].T + p["fc1_b"]
    z1 = np.maximum(h1, 0.0)
    h2 = z1 @ p["fc2_w"].T + p["fc2_b"]
    z2 = np.maximum(h2, 0.0)
    h3 = z2 @ p["fc3_w"].T + p["fc3_b"]
    z3 = np.maximum(h3, 0.0)
    logits = z3 @ p["out_w"].T + p["out_b"]
    probs = _softmax(logits)
    if not keep_cache:
        return probs, None
    cache = dict(
        p=p, x=x, cols1=cols1, a1=a1, p1=p1, idx1=idx1, cols2=cols2, a2=a2,
        idx2=idx2, p2shape=p2.shape, flat=flat, h1=h1, z1=z1, h2=h2, z2=z2,
        h3=h3, z3=z3, probs=probs,
    )
    return probs, cache


def _loss_and_grads(model: Hs2Model, images, labels, params=None):
    x = _check_batch(model, images)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],) or not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be a 1-D array of 0 (tissue) / 1 (nodule)")
    if x.shape[0] == 0:
        raise ValidationError("batch must be non-empty")
    probs, cache = _forward_batch(model, x, keep_cache=True, params=params)
    n = x.shape[0]
    eps_guard = probs[np.arange(n), y]
    loss = float(-np.log(eps_guard).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    p = cache["p"]
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = dlogits.T @ cache["z3"]
    grads["out_b"] = dlogits.sum(axis=0)
    dz3 = dlogits @ p["out_w"]
    dh3 = dz3 * (cache["h3"] > 0)
    grads["fc3_w"] = dh3.T @ cache["z2"]
    grads["fc3_b"] = dh3.sum(axis=0)
    dz2 = dh3 @ p["fc3_w"]
    dh2 = dz2 * (cache["h2"] > 0)
    grads["fc2_w"] = dh2.T @ cache["z1"]
    grads["fc2_b"] = dh2.sum(axis=0)
    dz1 = dh2 @ p["fc2_w"]
    dh1 = dz1 * (cache["h1"] > 0)
    grads["fc1_w"] = dh1.T @ cache["flat"]
    grads["fc1_b"] = dh1.sum(axis=0)
    dflat = dh1 @ p["fc1_w"]

    dp2 = dflat.reshape(cache["p2shape"])
    dr2 = _pool_backward(dp2, cache["idx2"], cache["a2"].shape)
    da2 = dr2 * (cache["a2"] > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
        da2, cache["cols2"], p["conv2_w"], cache["p1"].shape
    )
    dr1 = _pool_backward(dp1, cache["idx1"], cache["a1"].shape)
    da1 = dr1 * (cache["a1"] > 0)
    # input gradient of the first conv is never consumed
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
        da1, cache["cols1"], p["conv1_w"], cache["x"].shape, need_dx=False
    )
    return loss, grads


# -- public operations --------------------------------------------------------

def forward(model: Hs2Model, image) -> Prediction:
    """Classify one normalized grid; deterministic."""
    x = _check_batch(model, image)
    if x.shape[0] != 1:
        raise ValidationError(f"forward takes a single grid, got {x.shape[0]}")
    probs, _ = _forward_batch(model, x)
    p_nodule = float(probs[0, 1])
    return Prediction(p_nodule=p_nodule, label=LABELS[int(np.argmax(probs[0]))])


def predict_proba(model: Hs2Model, images) -> np.ndarray:
    """Nodule probability for a batch of grids."""
    x = _check_batch(model, images)
    probs, _ = _forward_batch(model, x)
    return probs[:, 1]


def backward(model: Hs2Model, images, labels) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy over the batch."""
    _, grads = _loss_and_grads(model, images, labels)
    return grads


def batch_loss(model: Hs2Model, images, labels) -> float:
    """Mean cross-entropy of the batch under the current parameters."""
    x = _check_batch(model, images)
    y = np.asarray(labels, dtype=np.int64)
    probs, _ = _forward_batch(model, x)
    return float(-np.log(probs[np.arange(x.shape[0]), y]).mean())


def _balanced_indices(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Oversample the minority class to a 1:1 ratio (with replacement)."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValidationError("training dataset must contain both classes")
    if len(pos) == len(neg):
        return np.concatenate([neg, pos])
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(minority, size=len(majority) - len(minority), replace=True)
    return np.concatenate([majority, minority, extra])


def train(model: Hs2Model, images, labels, config: TrainConfig) -> tuple[Hs2Model, list[float]]:
    """Mini-batch SGD with step-decayed learning rate; updates the model in
    place and returns it with the per-epoch mean loss history."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ValidationError("dataset must be (n, h, w) images with n labels")
    rng = np.random.default_rng(config.seed)
    indices = _balanced_indices(labels, rng)

    # one float64 working copy across all batches; snapshot to float32 at the end
    working = _float64_params(model)
    history: list[float] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_epochs)
        order = rng.permutation(indices)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads = _loss_and_grads(model, images[batch], labels[batch], params=working)
            if lr != 0.0:
                for name, grad in grads.items():
                    working[name] -= lr * grad
            total += loss * len(batch)
            count += len(batch)
        epoch_loss = total / count
        if not np.isfinite(epoch_loss):
            raise ValidationError(f"training diverged at epoch {epoch} (loss={epoch_loss})")
        history.append(epoch_loss)
    for name in model.params:
        model.params[name] = working[name].astype(np.float32)
    return model, history


# -- detector-head loss functions ---------------------------------------------

def loss_bce(p: float, target: int) -> float:
    """Binary cross entropy -[t ln p + (1-t) ln(1-p)]; p must lie in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValidationError(f"BCE probability must lie in (0, 1), got {p}")
    if target not in (0, 1):
        raise ValidationError(f"BCE target must be 0 or 1, got {target}")
    return float(-(target * math.log(p) + (1 - target) * math.log(1.0 - p)))


def loss_smooth_l1(x: float) -> float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = abs(float(x))
    return 0.5 * ax * ax if ax < 1.0 else ax - 0.5


# -- serialization -------------------------------------------------------------

def save_model(model: Hs2Model) -> bytes:
    """Pack the model as magic, version, seed, architecture, then each
    parameter array (shape header + little-endian float32 data)."""
    chunks = [struct.pack("<4sIq", MODEL_MAGIC, MODEL_VERSION, model.rng_seed)]
    chunks.append(
        struct.pack(
            "<6I",
            model.in_size,
            *model.conv_channels,
            *model.fc_sizes,
        )
    )
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated model data")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise FormatError("truncated model data")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out


def load_model(data: bytes) -> Hs2Model:
    r = _Reader(data)
    magic, version, seed = r.take("<4sIq")
    if magic != MODEL_MAGIC:
        raise FormatError(f"not a classifier model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise FormatError(
            f"unsupported model format version {version}; this build reads version {MODEL_VERSION}"
        )
    in_size, c1, c2, f1, f2, f3 = r.take("<6I")
    model = Hs2Model(
        in_size=in_size,
        conv_channels=(c1, c2),
        fc_sizes=(f1, f2, f3),
        rng_seed=seed,
    )
    expected_shapes = model.param_shapes()
    for name in PARAM_NAMES:
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        if shape != expected_shapes[name]:
            raise FormatError(
                f"parameter {name} has shape {shape}, expected {expected_shapes[name]}"
            )
        raw = r.take_bytes(4 * int(np.prod(shape)))
        model.params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after model payload")
    return model
