"""Dense reconstruction autoencoder written directly against numpy.

The network maps a flattened ``F*w`` window through symmetric ReLU hidden
layers back to ``F*w`` values (identity output layer). Training uses Adam on
shuffled mini-batches, a reduce-on-plateau learning-rate schedule, and early
stopping on a held-out validation split.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import DataError, NumericError, substream
from .preprocess import NormStats, WindowSet

log = logging.getLogger(__name__)

MODEL_FORMAT = "qcpd-model"
MODEL_VERSION = 1


class DenseAutoencoder:
    def __init__(self, layer_sizes: Sequence[int], weights: Sequence[np.ndarray],
                 biases: Sequence[np.ndarray], dropout_rate: float = 0.0):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or layer_sizes[0] != layer_sizes[-1]:
            raise DataError(f"layer sizes must start and end with the input size, got {layer_sizes}")
        if layer_sizes != layer_sizes[::-1]:
            raise DataError(f"layer sizes must be symmetric about the bottleneck, got {layer_sizes}")
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(weights):
            raise DataError("need one weight matrix and bias vector per layer transition")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (layer_sizes[i], layer_sizes[i + 1]) or b.shape != (layer_sizes[i + 1],):
                raise DataError(f"layer {i} has weight {W.shape} / bias {b.shape}, "
                                f"expected {(layer_sizes[i], layer_sizes[i + 1])}")
        if not 0 <= dropout_rate < 1:
            raise DataError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.layer_sizes = layer_sizes
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.dropout_rate = float(dropout_rate)

    @classmethod
    def create(cls, input_dim: int, hidden: Sequence[int] = (128, 32), dropout_rate: float = 0.1,
               seed: int = 0) -> "DenseAutoencoder":
        """Kaiming-uniform initialised autoencoder ``input -> hidden... -> mirror -> input``."""
        hidden = list(hidden)
        sizes = [input_dim, *hidden, *hidden[-2::-1], input_dim]
        rng = substream(seed, 0)
        weights, biases = [], []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in = sizes[i]
            gain = 2.0 if i < n_layers - 1 else 1.0  # ReLU layers vs linear output
            bound = math.sqrt(3.0 * gain / fan_in)
            weights.append(rng.uniform(-bound, bound, (sizes[i], sizes[i + 1])))
            biases.append(np.zeros(sizes[i + 1]))
        return cls(sizes, weights, biases, dropout_rate)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "DenseAutoencoder":
        return DenseAutoencoder(self.layer_sizes, [W.copy() for W in self.weights],
                                [b.copy() for b in self.biases], self.dropout_rate)


def _check_input(model: DenseAutoencoder, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"expected input of width {model.input_dim}, got shape {x.shape}")
    return x


ROW_BLOCK = 64


def _infer(model: DenseAutoencoder, x: np.ndarray) -> np.ndarray:
    """Dropout-free forward pass whose per-row result does not depend on the batch.

    BLAS picks kernels by matrix shape, so the same row can round differently
    inside batches of different sizes. Every product here is evaluated on
    zero-padded blocks of exactly ``ROW_BLOCK`` rows, which makes streaming
    (one tick) and batch scoring agree bit for bit.
    """
    n, d = x.shape
    padded = -(-n // ROW_BLOCK) * ROW_BLOCK
    h = np.zeros((padded, d))
    h[:n] = x
    h = h.reshape(-1, ROW_BLOCK, d)
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h.reshape(padded, -1)[:n]


def _forward(model: DenseAutoencoder, x: np.ndarray, rng: Optional[np.random.Generator]):
    """Training forward pass returning the output and the per-layer cache for backprop."""
    inputs, pre, masks = [], [], []
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ W + b
        if i == last:
            out = z
            break
        pre.append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if rng is not None and model.dropout_rate > 0:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        masks.append(mask)
    return out, (inputs, pre, masks)


def forward(model: DenseAutoencoder, window_flat: np.ndarray, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Reconstruct one flat window (1-D) or a batch of them (2-D).

    Dropout is only active with ``training=True``; it then needs ``rng``.
    """
    x = _check_input(model, window_flat)
    if training and rng is None:
        raise DataError("training-mode forward needs an rng for dropout")
    out = _forward(model, x, rng)[0] if training else _infer(model, x)
    return out[0] if np.ndim(window_flat) == 1 else out


def loss_mse(model: DenseAutoencoder, batch: np.ndarray) -> float:
    """Mean squared reconstruction error over the batch and all coordinates."""
    x = _check_input(model, batch)
    if x.shape[0] == 0:
        raise DataError("empty batch")
    out = _infer(model, x)
    return float(np.mean((out - x) ** 2))


def loss_and_grads(model: DenseAutoencoder, batch: np.ndarray,
                   rng: Optional[np.random.Generator] = None) -> tuple[float, list[np.ndarray]]:
    """MSE loss and its gradients, ordered like :meth:`DenseAutoencoder.params`."""
    x = _check_input(model, batch)
    n, d = x.shape
    if n == 0:
        raise DataError("empty batch")
    out, (inputs, pre, masks) = _forward(model, x, rng)
    diff = out - x
    loss = float(np.mean(diff * diff))
    g = diff * (2.0 / (n * d))
    grads: list[np.ndarray] = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ model.weights[i].T
        if masks[i - 1] is not None:
            g = g * masks[i - 1]
        g = g * (pre[i - 1] > 0)
    return loss, grads


class Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_floor: float = 1e-6
    lr_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 5
    max_epochs: int = 20
    batch_size: int = 512
    dropout: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0
    min_delta: float = 1e-8

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.lr_init:
            raise DataError("need 0 < lr_floor <= lr_init")
        if not 0 <= self.dropout < 1:
            raise DataError("dropout must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise DataError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise DataError("max_epochs and batch_size must be positive")


@dataclass
class TrainReport:
    epochs_run: int = 0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_val_loss: float = float("nan")
    best_epoch: int = 0
    final_lr: float = float("nan")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class PlateauSchedule:
    """Reduce-on-plateau learning rate plus early stopping, driven by validation loss.

    The loss measured before the first epoch is the initial best, so an epoch
    counts as non-improving unless it beats every earlier value by more than
    ``min_delta``.
    """

    def __init__(self, cfg: TrainConfig, initial_loss: float = float("inf")):
        self.cfg = cfg
        self.lr = cfg.lr_init
        self.best = initial_loss
        self.plateau_wait = 0
        self.stop_wait = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch; return ``(improved, should_stop)``."""
        if val_loss < self.best - self.cfg.min_delta:
            self.best = val_loss
            self.plateau_wait = self.stop_wait = 0
            return True, False
        self.plateau_wait += 1
        self.stop_wait += 1
        if self.plateau_wait >= self.cfg.plateau_patience:
            self.lr = max(self.lr * self.cfg.lr_factor, self.cfg.lr_floor)
            self.plateau_wait = 0
        return False, self.stop_wait >= self.cfg.early_stop_patience


Windows = Union[np.ndarray, WindowSet]


def _take(windows: Windows, idx: np.ndarray) -> np.ndarray:
    if isinstance(windows, WindowSet):
        return windows.take(idx)
    return np.asarray(windows)[idx]


def _eval_loss(model: DenseAutoencoder, windows: Windows, idx: np.ndarray, chunk: int = 8192) -> float:
    total = 0.0
    for start in range(0, len(idx), chunk):
        x = _take(windows, idx[start:start + chunk])
        total += float(np.sum((_infer(model, x) - x) ** 2))
    return total / (len(idx) * model.input_dim)


def train(model: DenseAutoencoder, windows: Windows, cfg: TrainConfig = TrainConfig()
          ) -> tuple[DenseAutoencoder, TrainReport]:
    """Fit ``model`` (a copy of it) to reconstruct ``windows``; return the best-validation weights."""
    n = len(windows)
    if n < 2:
        raise DataError(f"need at least 2 windows to train, got {n}")
    model = model.copy()
    model.dropout_rate = cfg.dropout
    split_rng = substream(cfg.seed, 1)
    perm = split_rng.permutation(n)
    n_val = min(max(1, int(round(cfg.val_fraction * n))), n - 1)
    val_idx, train_idx = np.sort(perm[:n_val]), perm[n_val:]

    shuffle_rng = substream(cfg.seed, 2)
    dropout_rng = substream(cfg.seed, 3)
    params = model.params()
    opt = Adam(params)

    report = TrainReport()
    report.initial_val_loss = _eval_loss(model, windows, val_idx)
    schedule = PlateauSchedule(cfg, report.initial_val_loss)
    best = model.copy()
    report.best_val_loss = report.initial_val_loss

    for epoch in range(1, cfg.max_epochs + 1):
        lr = schedule.lr
        order = train_idx[shuffle_rng.permutation(train_idx.shape[0])]
        running, count = 0.0, 0
        for start in range(0, order.shape[0], cfg.batch_size):
            batch = _take(windows, order[start:start + cfg.batch_size])
            loss, grads = loss_and_grads(model, batch, dropout_rng)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            opt.step(params, grads, lr)
            running += loss * batch.shape[0]
            count += batch.shape[0]
        val = _eval_loss(model, windows, val_idx)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(running / max(count, 1))
        report.val_loss.append(val)
        report.lr.append(lr)
        report.epochs_run = epoch
        improved, stop = schedule.update(val)
        if improved:
            best = model.copy()
            report.best_val_loss = val
            report.best_epoch = epoch
        log.info("epoch %d train=%.6g val=%.6g lr=%.3g", epoch, report.train_loss[-1], val, lr)
        if stop:
            report.stopped_early = True
            break
    report.final_lr = schedule.lr
    return best, report


def grid_search(windows: Windows, cfg: TrainConfig = TrainConfig(),
                hidden_sizes: Sequence[int] = (64, 128, 256),
                bottlenecks: Sequence[int] = (16, 32, 64)):
    """Train one model per (hidden, bottleneck) pair; keep the lowest validation loss.

    Returns ``(model, report, table)`` where ``table`` lists every candidate.
    """
    input_dim = _take(windows, np.arange(1)).shape[1]
    best = None
    table = []
    for hidden in hidden_sizes:
        for bottleneck in bottlenecks:
            init = DenseAutoencoder.create(input_dim, (hidden, bottleneck), cfg.dropout, cfg.seed)
            model, report = train(init, windows, cfg)
            table.append({"hidden": hidden, "bottleneck": bottleneck, "val_loss": report.best_val_loss})
            if best is None or report.best_val_loss < best[1].best_val_loss:
                best = (model, report)
    return best[0], best[1], table


@dataclass
class ModelBundle:
    """A trained model together with the normalisation it was trained under."""

    model: DenseAutoencoder
    stats: NormStats
    window: int
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.stats.mu.shape[0]


def save_model(path, bundle: ModelBundle) -> Path:
    path = Path(path)
    m = bundle.model
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": m.layer_sizes,
        "dropout_rate": m.dropout_rate,
        "activation": "relu",
        "output_activation": "identity",
        "window": bundle.window,
        "n_features": bundle.n_features,
        "norm": bundle.stats.to_dict(),
        "weights": [W.tolist() for W in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "meta": bundle.meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_model(path) -> ModelBundle:
    path = Path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {doc.get('version')} (expected {MODEL_VERSION})")
    try:
        model = DenseAutoencoder(
            doc["layer_sizes"],
            [np.array(W, dtype=np.float64) for W in doc["weights"]],
            [np.array(b, dtype=np.float64) for b in doc["biases"]],
            doc["dropout_rate"],
        )
        stats = NormStats.from_dict(doc["norm"])
        window = int(doc["window"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"corrupt model file {path}: {exc}") from exc
    if model.input_dim != stats.mu.shape[0] * window:
        raise DataError(f"corrupt model file {path}: input width {model.input_dim} != F*w")
    return ModelBundle(model, stats, window, doc.get("meta", {}))
