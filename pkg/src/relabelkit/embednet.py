"""Dense embedding / classifier network with analytic gradients.

The network is a stack of affine layers with a hidden activation. The last
layer is linear and either emits an embedding (``head="embedding"``) or a
single logit squashed by a sigmoid (``head="sigmoid_classifier"``).

Weights are stored row-major as ``(out_dim, in_dim)`` so a layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

PROB_EPS = 1e-12

HEADS = ("embedding", "sigmoid_classifier")
ACTIVATIONS = ("relu", "tanh")
OPTIMIZERS = ("adam", "sgd")
LOSS_KINDS = ("bce", "contrastive")


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    embed_dim: int = 8
    activation: str = "relu"
    head: str = "embedding"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"all layer dimensions must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def output_dim(self) -> int:
        return 1 if self.head == "sigmoid_classifier" else self.embed_dim

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    fine_tune_learning_rate: float = 1e-4
    fine_tune_epochs: int = 50
    batch_size: int = 1
    validation_fraction: float = 0.2
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        # 0 is allowed here: fine-tuning with a zero rate freezes the weights
        if self.fine_tune_learning_rate < 0:
            raise ValueError("fine_tune_learning_rate must be >= 0")
        if self.epochs < 0 or self.fine_tune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


class NetParams:
    """Weights and biases of one network, plus the config that shaped them."""

    def __init__(self, config: NetConfig, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.config = config
        sizes = config.layer_sizes
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ValueError("number of layers does not match the config")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if np.shape(w) != (sizes[i + 1], sizes[i]) or np.shape(b) != (sizes[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W{(sizes[i + 1], sizes[i])} b{(sizes[i + 1],)}, "
                    f"got W{np.shape(w)} b{np.shape(b)}")
        # one contiguous buffer; weights/biases are views into it
        self.flat = np.concatenate(
            [np.ravel(np.asarray(a, dtype=np.float64)) for pair in zip(weights, biases)
             for a in pair])
        views = unflatten(config, self.flat)
        self.weights = views[0::2]
        self.biases = views[1::2]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.config, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def equals(self, other: "NetParams") -> bool:
        return self.config == other.config and np.array_equal(self.flat, other.flat)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetParams":
        config = NetConfig(**data["config"])
        layers = data["layers"]
        return cls(config,
                   [np.array(layer["weight"], dtype=np.float64).reshape(-1, s)
                    for layer, s in zip(layers, config.layer_sizes[:-1])],
                   [np.array(layer["bias"], dtype=np.float64) for layer in layers])

    def save(self, path, extra: dict | None = None):
        data = self.to_dict()
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NetParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def unflatten(config: NetConfig, flat: np.ndarray) -> list[np.ndarray]:
    """Split a flat vector into W0, b0, W1, b1, ... views."""
    sizes = config.layer_sizes
    out, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        out.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        out.append(flat[pos:pos + fan_out])
        pos += fan_out
    if pos != flat.size:
        raise ValueError(f"flat parameter vector has {flat.size} values, expected {pos}")
    return out


def init_params(config: NetConfig) -> NetParams:
    """Glorot-uniform weights, zero biases, seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetParams(config, weights, biases)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    # the boolean relu mask multiplies as 0/1
    return z > 0 if kind == "relu" else 1.0 - a * a


def _as_batch(params: NetParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.config.input_dim:
        raise ValueError(
            f"dimension mismatch: network expects {params.config.input_dim} "
            f"features, got shape {x.shape}")
    return X, single


def _forward_logits(params: NetParams, X: np.ndarray, check: bool = True):
    """Return the final-layer pre-activation and the per-layer cache.

    ``check=False`` skips the finiteness test for callers that validate the
    resulting loss and gradient themselves.
    """
    kind = params.config.activation
    h = X
    cache = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if i == last:
            cache.append((h, z, None))
            h = z
        else:
            a = _act(z, kind)
            cache.append((h, z, a))
            h = a
    if check and not np.isfinite(h).all():
        raise FloatingPointError("non-finite value in network forward pass")
    return h, cache


def forward(params: NetParams, x) -> np.ndarray:
    """Embedding, or sigmoid probability for a classifier head.

    Accepts one feature vector or a 2-D batch; the output has matching rank.
    A classifier returns shape ``(1,)`` for a single vector and ``(n,)`` for a
    batch.
    """
    X, single = _as_batch(params, x)
    out, _ = _forward_logits(params, X)
    if params.config.head == "sigmoid_classifier":
        out = np.clip(sigmoid(out[:, 0]), PROB_EPS, 1.0 - PROB_EPS)
        return out if not single else out[:1]
    return out[0] if single else out


def embed(params: NetParams, X) -> np.ndarray:
    X, _ = _as_batch(params, X)
    return _forward_logits(params, X)[0]


def grad_buffer(params: NetParams):
    """Reusable ``(flat, views)`` gradient storage for :func:`backprop`."""
    flat = np.empty_like(params.flat)
    return flat, unflatten(params.config, flat)


def _backward(params: NetParams, cache, grad_out: np.ndarray, buffer=None) -> np.ndarray:
    """Gradient of every parameter as one flat vector aligned with ``params.flat``."""
    kind = params.config.activation
    gflat, views = buffer if buffer is not None else grad_buffer(params)
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        h_in, z, a = cache[i]
        if a is not None:
            g = g * _act_grad(z, a, kind)
        np.matmul(g.T, h_in, out=views[2 * i])
        np.add.reduce(g, axis=0, out=views[2 * i + 1])
        if i > 0:
            g = g @ params.weights[i]
    return gflat


def bce_loss(prob, label) -> float:
    """Binary cross-entropy of one probability (clamped to [1e-12, 1-1e-12])."""
    p = float(np.clip(prob, PROB_EPS, 1.0 - PROB_EPS))
    return -(label * np.log(p) + (1 - label) * np.log(1.0 - p))


def _bce_from_logits(z: np.ndarray, y: np.ndarray):
    # softplus(z) - y*z, computed without overflow
    losses = np.logaddexp(0.0, z) - y * z
    return losses, sigmoid(z) - y


def contrastive_terms(diff: np.ndarray, same: np.ndarray, margin: float):
    """Per-pair contrastive loss and its gradient w.r.t. the first embedding.

    ``diff`` is ``u - v`` with one row per pair. Same-class pairs cost
    ``d**2``; different-class pairs cost ``max(0, margin - d)**2``.
    """
    sq = np.add.reduce(diff * diff, axis=1)
    d = np.sqrt(sq)
    hinge = np.maximum(margin - d, 0.0)
    losses = np.where(same, sq, hinge * hinge)
    # at d == 0 the push direction is undefined; use the zero subgradient
    ratio = np.divide(hinge, d, out=np.zeros(d.shape), where=d > 0)
    coef = np.where(same, 2.0, -2.0 * ratio)
    return losses, coef[:, None] * diff


def backprop(params: NetParams, batch, loss_kind: str, margin: float = 1.0, buffer=None):
    """Summed loss over ``batch`` and its gradient for every parameter.

    ``batch`` is ``(X, y)`` for ``"bce"`` and ``(Xa, Xb, same)`` for
    ``"contrastive"``. Both branches of a contrastive pair go through the same
    parameters, so the returned gradient is the sum of the branch gradients.
    The reduction is a plain sum: a duplicated sample doubles the gradient.

    Returns ``(loss, grad)`` where ``grad`` is flat and aligned with
    ``params.flat``; ``unflatten(params.config, grad)`` gives per-layer views.
    Passing a :func:`grad_buffer` reuses its storage for ``grad``.
    """
    if loss_kind == "bce":
        X, y = batch
        X, _ = _as_batch(params, X)
        if len(X) == 0:
            raise ValueError("empty batch")
        if params.config.head != "sigmoid_classifier":
            raise ValueError("bce loss requires a sigmoid_classifier head")
        z, cache = _forward_logits(params, X, check=False)
        losses, dz = _bce_from_logits(z[:, 0], np.asarray(y, dtype=np.float64))
        gflat = _backward(params, cache, dz[:, None], buffer)
    elif loss_kind == "contrastive":
        Xa, Xb, same = batch
        Xa, _ = _as_batch(params, Xa)
        Xb, _ = _as_batch(params, Xb)
        if len(Xa) == 0 or len(Xa) != len(Xb):
            raise ValueError("contrastive batch needs equal, non-empty branches")
        n = len(Xa)
        E, cache = _forward_logits(params, np.concatenate([Xa, Xb]), check=False)
        losses, gu = contrastive_terms(E[:n] - E[n:], np.asarray(same, dtype=bool), margin)
        gflat = _backward(params, cache, np.concatenate([gu, -gu]), buffer)
    else:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    loss = float(np.add.reduce(losses))
    # any inf/nan component makes the squared norm non-finite
    if not (math.isfinite(loss) and math.isfinite(gflat @ gflat)):
        raise FloatingPointError("non-finite loss or gradient")
    return loss, gflat


def mean_loss(params: NetParams, batch, loss_kind: str, margin: float = 1.0) -> float:
    if loss_kind == "bce":
        X, y = batch
        X, _ = _as_batch(params, X)
        z, _ = _forward_logits(params, X)
        losses, _ = _bce_from_logits(z[:, 0], np.asarray(y, dtype=np.float64))
    else:
        Xa, Xb, same = batch
        diff = embed(params, Xa) - embed(params, Xb)
        losses, _ = contrastive_terms(diff, np.asarray(same, dtype=bool), margin)
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, flat: np.ndarray, grad: np.ndarray):
        flat -= self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, flat: np.ndarray, grad: np.ndarray):
        # in-place with preallocated scratch; same operation order as the textbook form
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
            self._s = np.empty_like(flat)
            self._d = np.empty_like(flat)
        s, d = self._s, self._d
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        self.m *= self.beta1
        self.m += np.multiply(1.0 - self.beta1, grad, out=s)
        self.v *= self.beta2
        np.multiply(1.0 - self.beta2, grad, out=s)
        self.v += np.multiply(s, grad, out=s)
        np.divide(self.v, c2, out=d)
        np.sqrt(d, out=d)
        d += self.eps
        np.divide(self.m, c1, out=s)
        s *= self.lr
        s /= d
        flat -= s


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def fit(params: NetParams, *, lr: float, epochs: int, optimizer: str,
        rng: np.random.Generator,
        epoch_batches: Callable[[np.random.Generator, int], list],
        loss_kind: str,
        train_loss: Callable[[NetParams, list], float],
        val_loss: Callable[[NetParams], float | None],
        margin: float = 1.0) -> tuple[NetParams, TrainingLog]:
    """Generic mini-batch loop with lowest-validation-loss checkpointing.

    The starting parameters count as epoch 0. Without a validation set the
    last epoch wins. Gradients are averaged over each mini-batch.
    """
    params = params.copy()
    log = TrainingLog()
    opt = make_optimizer(optimizer, lr)
    buffer = grad_buffer(params)

    best = params.copy()
    v0 = val_loss(params)
    best_val = np.inf if v0 is None else v0
    log.records.append({"epoch": 0, "train_loss": train_loss(params, None), "val_loss": v0})
    for epoch in range(1, epochs + 1):
        batches = epoch_batches(rng, epoch)
        for batch in batches:
            _, grad = backprop(params, batch, loss_kind, margin, buffer)
            if len(batch[0]) > 1:
                grad /= len(batch[0])
            opt.step(params.flat, grad)
        tl = train_loss(params, batches)
        vl = val_loss(params)
        log.records.append({"epoch": epoch, "train_loss": tl, "val_loss": vl})
        if vl is None or vl < best_val:
            best_val = np.inf if vl is None else vl
            best = params.copy()
            log.best_epoch = epoch
    if not best.is_finite():
        raise FloatingPointError("training produced non-finite parameters")
    return best, log


def split_validation(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified train/validation index split.

    Each class gives ``round(fraction * n_class)`` samples to validation, but
    always keeps at least one for training.
    """
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = min(int(round(fraction * len(idx))), len(idx) - 1)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=int)), np.sort(np.array(val_idx, dtype=int))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _classifier_fit(params: NetParams, X, y, config: TrainConfig, lr: float, epochs: int,
                    seed_offset: int) -> tuple[NetParams, TrainingLog]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if X.ndim != 2 or X.shape[1] != params.config.input_dim:
        raise ValueError(
            f"shape mismatch: network expects {params.config.input_dim} features, "
            f"data has shape {X.shape}")
    if params.config.head != "sigmoid_classifier":
        raise ValueError("classifier training requires a sigmoid_classifier head")
    rng = np.random.default_rng([config.seed, seed_offset])
    notes = []
    if len(np.unique(y)) < 2:
        msg = "training data contains a single class"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
    tr, va = split_validation(y, config.validation_fraction, rng)
    Xtr, ytr = X[tr], y[tr]
    val_batch = (X[va], y[va]) if len(va) else None

    def epoch_batches(rng, epoch):
        return [(Xtr[b], ytr[b]) for b in _minibatches(len(Xtr), config.batch_size, rng)]

    best, log = fit(
        params, lr=lr, epochs=epochs, optimizer=config.optimizer, rng=rng,
        epoch_batches=epoch_batches, loss_kind="bce",
        train_loss=lambda p, _: mean_loss(p, (Xtr, ytr), "bce"),
        val_loss=lambda p: None if val_batch is None else mean_loss(p, val_batch, "bce"))
    log.warnings.extend(notes)
    return best, log


def train(config: TrainConfig, net: NetConfig, X, y) -> tuple[NetParams, TrainingLog]:
    """Train a classifier from scratch with binary cross-entropy."""
    if net.head != "sigmoid_classifier":
        net = replace(net, head="sigmoid_classifier")
    return _classifier_fit(init_params(net), X, y, config,
                           config.learning_rate, config.epochs, seed_offset=0)


def fine_tune(params: NetParams, config: TrainConfig, X, y) -> tuple[NetParams, TrainingLog]:
    """Continue training from ``params`` at the fine-tuning rate and epoch budget."""
    return _classifier_fit(params, X, y, config, config.fine_tune_learning_rate,
                           config.fine_tune_epochs, seed_offset=1)


def predict_proba(params: NetParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return forward(params, X)
