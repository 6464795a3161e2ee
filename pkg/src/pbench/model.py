"""One-hidden-layer softmax MLP trained by plain mini-batch gradient descent.

logits = W2 @ relu(W1 @ x + b1) + b2 on the flattened grid. Training runs in
float32 on one thread; ``gradient_check`` uses float64. The output layer starts
at zero so the first forward pass predicts the uniform distribution.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .manifest import FeatureGrid

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PBM1"
_DIMS = struct.Struct("<HHII")
PRNG_NAME = "numpy.PCG64"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 256
    epochs: int = 20
    learning_rate: float = 0.0075
    batch_size: int = 64
    seed: int = 1
    class_weighting: str = "none"

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("hidden, epochs and batch_size must be positive")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if self.class_weighting != "none":
            raise ValueError(f"unsupported class weighting {self.class_weighting!r}")

    @classmethod
    def from_mapping(cls, values, base: "TrainConfig | None" = None) -> "TrainConfig":
        kw = {}
        for key, conv in (("hidden", int), ("epochs", int), ("learning_rate", float),
                          ("batch_size", int), ("seed", int), ("class_weighting", str)):
            if key in values:
                kw[key] = conv(values[key])
        return replace(base or cls(), **kw)


@dataclass(eq=False)
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    class_order: tuple[str, ...]
    rows: int
    cols: int
    train_meta: dict = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return int(self.W1.shape[0])

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]


def init_params(rows: int, cols: int, hidden: int, class_order: Sequence[str],
                rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    d = rows * cols
    a = math.sqrt(6.0 / (d + hidden))
    W1 = rng.uniform(-a, a, size=(hidden, d)).astype(dtype)
    k = len(class_order)
    return ModelParams(W1, np.zeros(hidden, dtype), np.zeros((k, hidden), dtype), np.zeros(k, dtype),
                       tuple(class_order), rows, cols)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(arrays: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. (W1, b1, W2, b2)."""
    W1, b1, W2, b2 = arrays
    pre = X @ W1.T + b1
    h = np.maximum(pre, 0)
    p = _softmax(h @ W2.T + b2)
    n = X.shape[0]
    loss = -np.log(np.maximum(p[np.arange(n), y], np.finfo(p.dtype).tiny)).mean()
    g = p.copy()
    g[np.arange(n), y] -= 1
    g /= n
    gW2 = g.T @ h
    gb2 = g.sum(axis=0)
    gh = (g @ W2) * (pre > 0)
    gW1 = gh.T @ X
    gb1 = gh.sum(axis=0)
    return float(loss), [gW1, gb1, gW2, gb2]


def _stack(grids: Sequence[FeatureGrid] | np.ndarray) -> np.ndarray:
    if isinstance(grids, np.ndarray):
        arr = grids
    else:
        arr = np.stack([g.values for g in grids]) if len(grids) else np.zeros((0, 1, 1), np.float32)
    return arr.reshape(arr.shape[0], -1).astype(np.float32, copy=False)


def train(grids: Sequence[FeatureGrid] | np.ndarray, labels: Sequence[str], cfg: TrainConfig,
          class_order: Sequence[str] | None = None) -> ModelParams:
    if len(grids) == 0:
        raise TrainingError("empty training set")
    if len(grids) != len(labels):
        raise TrainingError("grids and labels differ in length")
    order = tuple(class_order) if class_order is not None else tuple(sorted(set(labels)))
    index = {c: i for i, c in enumerate(order)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise TrainingError(f"labels not in class order: {unknown}")
    if len(set(labels)) < 2:
        raise TrainingError("training needs at least two classes present")
    if isinstance(grids, np.ndarray):
        rows, cols = grids.shape[1], grids.shape[2]
    else:
        rows, cols = grids[0].rows, grids[0].cols
    X = _stack(grids)
    y = np.array([index[c] for c in labels], dtype=np.int64)

    rng = np.random.Generator(np.random.PCG64(cfg.seed & 0xFFFFFFFFFFFFFFFF))
    params = init_params(rows, cols, cfg.hidden, order, rng)
    arrays = params.arrays()
    epoch_losses = []
    with np.errstate(over="ignore", invalid="ignore"):  # divergence surfaces as TrainingError
        _sgd(arrays, X, y, cfg, rng, epoch_losses)
    final_loss, _ = loss_and_grads(arrays, X, y)
    if not math.isfinite(final_loss):
        raise TrainingError(f"loss diverged (non-finite) in epoch {cfg.epochs}")
    params.train_meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "hidden": cfg.hidden,
        "prng": PRNG_NAME,
        "final_train_loss": round(final_loss, 8),
        "epoch_losses": [round(v, 8) for v in epoch_losses],
    }
    return params


def _sgd(arrays, X, y, cfg: TrainConfig, rng: np.random.Generator, epoch_losses: list) -> None:
    lr = np.float32(cfg.learning_rate)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(arrays, X[batch], y[batch])
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            total += loss * len(batch)
            for a, g in zip(arrays, grads):
                a -= lr * g
        epoch_losses.append(total / len(y))
        log.debug("epoch %d loss %.6f", epoch, epoch_losses[-1])


def predict_proba(params: ModelParams, grids: Sequence[FeatureGrid] | np.ndarray) -> np.ndarray:
    X = _stack(grids)
    if X.shape[1] != params.W1.shape[1]:
        raise ValueError(f"input has {X.shape[1]} cells, model expects {params.rows}x{params.cols}")
    h = np.maximum(X @ params.W1.T + params.b1, 0)
    return _softmax((h @ params.W2.T + params.b2).astype(np.float64))


def predict_many(params: ModelParams, grids: Sequence[FeatureGrid] | np.ndarray) -> list[str]:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return [params.class_order[i] for i in predict_proba(params, grids).argmax(axis=1)]


def predict(params: ModelParams, grid: FeatureGrid) -> tuple[str, np.ndarray]:
    if (grid.rows, grid.cols) != (params.rows, params.cols):
        raise ValueError(f"grid is {grid.rows}x{grid.cols}, model expects {params.rows}x{params.cols}")
    p = predict_proba(params, [grid])[0]
    return params.class_order[int(p.argmax())], p


# -- gradient check ----------------------------------------------------------

GradFn = Callable[[Sequence[np.ndarray], np.ndarray, np.ndarray], tuple[float, list[np.ndarray]]]


def gradient_check(cfg: TrainConfig, grids: Sequence[FeatureGrid] | np.ndarray, labels: Sequence[str],
                   h: float = 1e-5, grad_fn: GradFn = loss_and_grads) -> float:
    """Max relative error between ``grad_fn`` and central differences of the loss.

    Runs in float64 on randomly initialised parameters (including the output
    layer, so every block receives a nonzero gradient).
    """
    order = tuple(sorted(set(labels)))
    index = {c: i for i, c in enumerate(order)}
    X = _stack(grids).astype(np.float64)
    y = np.array([index[c] for c in labels])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    d, k = X.shape[1], len(order)
    arrays = [
        rng.uniform(-1, 1, (cfg.hidden, d)) * math.sqrt(6.0 / (d + cfg.hidden)),
        rng.uniform(-0.1, 0.1, cfg.hidden),
        rng.uniform(-1, 1, (k, cfg.hidden)) * math.sqrt(6.0 / (k + cfg.hidden)),
        rng.uniform(-0.1, 0.1, k),
    ]
    _, analytic = grad_fn(arrays, X, y)
    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        gflat = np.asarray(ga, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, _ = loss_and_grads(arrays, X, y)
            flat[i] = old - h
            down, _ = loss_and_grads(arrays, X, y)
            flat[i] = old
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


# -- checkpoint --------------------------------------------------------------

def save_checkpoint(params: ModelParams) -> bytes:
    meta = dict(params.train_meta)
    meta["class_order"] = list(params.class_order)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _DIMS.pack(params.rows, params.cols, params.hidden, len(params.class_order))]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays()]
    parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def load_checkpoint(data: bytes) -> ModelParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic, expected PBM1")
    rows, cols, hidden, k = _DIMS.unpack_from(data, 4)
    d = rows * cols
    off = 4 + _DIMS.size
    shapes = [(hidden, d), (hidden,), (k, hidden), (k,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise ValueError("truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
        off += 4 * n
    (blob_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + blob_len != len(data):
        raise ValueError("checkpoint length does not match its metadata header")
    meta = json.loads(data[off:].decode("utf-8"))
    order = tuple(meta.pop("class_order"))
    if len(order) != k:
        raise ValueError("class_order length does not match checkpoint dims")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("checkpoint holds non-finite parameters")
    return ModelParams(*arrays, class_order=order, rows=rows, cols=cols, train_meta=meta)
