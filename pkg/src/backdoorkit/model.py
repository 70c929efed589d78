"""Victim classifier: a small conv net with a relu penultimate layer.

Architecture: two conv blocks (3x3, same padding, relu, 2x2 maxpool), a relu
hidden dense layer whose activations are the penultimate vector, and a final
dense layer producing logits. Training is plain Adam over shuffled minibatches,
fully determined by the seed.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ModelError(Exception):
    pass


class TrainingError(ModelError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    conv_filters: tuple = (8, 16)
    kernel: int = 3
    hidden: int = 64
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.hidden < self.classes:
            raise ModelError("need classes >= 2 and hidden width >= classes")
        if self.height % 4 or self.width % 4 or self.height < 4 or self.width < 4:
            raise ModelError("height/width must be positive multiples of 4 (two 2x2 pools)")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ModelError("kernel must be odd and positive")
        if len(self.conv_filters) != 2 or min(self.conv_filters) < 1 or self.channels < 1:
            raise ModelError("need two positive conv filter counts and >= 1 channel")

    @property
    def flat_features(self):
        return (self.height // 4) * (self.width // 4) * self.conv_filters[1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ModelError("epochs and batch_size must be >= 1")


PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "dense1_w", "dense1_b", "dense2_w", "dense2_b")


@dataclass
class ModelParams:
    arch: ArchConfig
    params: dict
    provenance: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()},
                           dict(self.provenance))

    def weight_hash(self):
        h = hashlib.sha256()
        for name in PARAM_ORDER:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(arch):
    """Deterministically initialized model: He-uniform for relu layers,
    Glorot-uniform for the final linear layer."""
    rng = np.random.Generator(np.random.PCG64(arch.seed))
    k = arch.kernel
    f1, f2 = arch.conv_filters
    params = {
        "conv1_w": _he_uniform(rng, (k, k, arch.channels, f1), k * k * arch.channels),
        "conv1_b": np.zeros(f1),
        "conv2_w": _he_uniform(rng, (k, k, f1, f2), k * k * f1),
        "conv2_b": np.zeros(f2),
        "dense1_w": _he_uniform(rng, (arch.flat_features, arch.hidden), arch.flat_features),
        "dense1_b": np.zeros(arch.hidden),
        "dense2_w": _glorot_uniform(rng, (arch.hidden, arch.classes), arch.hidden, arch.classes),
        "dense2_b": np.zeros(arch.classes),
    }
    return ModelParams(arch, params)


def forward_tape(params, x, batch):
    """Tape forward pass; `params` maps names to Tensors, `x` is a Tensor.

    Returns (logits, penultimate) Tensors so callers can attach losses and
    differentiate with respect to parameters or the input.
    """
    h = ad.relu(ad.add(ad.conv2d(x, params["conv1_w"]), params["conv1_b"]))
    h = ad.maxpool2(h)
    h = ad.relu(ad.add(ad.conv2d(h, params["conv2_w"]), params["conv2_b"]))
    h = ad.maxpool2(h)
    h = ad.reshape(h, (batch, -1))
    penult = ad.relu(ad.add(ad.matmul(h, params["dense1_w"]), params["dense1_b"]))
    logits = ad.add(ad.matmul(penult, params["dense2_w"]), params["dense2_b"])
    return logits, penult


def forward(model, images):
    """Forward pass on a real-valued batch (N, H, W, C) in [0, 1].

    Returns (logits, penultimate activations) as arrays.
    """
    x = np.asarray(images, dtype=np.float64)
    arch = model.arch
    if x.ndim != 4 or x.shape[1:] != (arch.height, arch.width, arch.channels):
        raise ModelError(f"batch shape {x.shape} does not match arch "
                         f"(N, {arch.height}, {arch.width}, {arch.channels})")
    pt = {k: ad.Tensor(v, op=k) for k, v in model.params.items()}
    logits, penult = forward_tape(pt, ad.Tensor(x, op="images"), x.shape[0])
    return logits.data, penult.data


def predict(model, images, batch_size=256):
    """Argmax class predictions, evaluated in batches."""
    x = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, x.shape[0], batch_size):
        logits, _ = forward(model, x[i:i + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def accuracy(model, images, labels, batch_size=256):
    preds = predict(model, images, batch_size=batch_size)
    return float(np.mean(preds == np.asarray(labels)))


def _to_real(images):
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0
    return np.asarray(images, dtype=np.float64)


def _run_epochs(model, images, labels, cfg, epoch_hook=None):
    x = _to_real(images)
    y = np.asarray(labels, dtype=np.intp)
    if x.shape[0] == 0:
        raise TrainingError("empty dataset")
    if y.min() < 0 or y.max() >= model.arch.classes:
        raise TrainingError("label out of range for arch.classes")
    params = {k: v.copy() for k, v in model.params.items()}
    state = ad.AdamState(lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = x.shape[0]
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            pt = {k: ad.Tensor(v, op=k) for k, v in params.items()}
            try:
                logits, _ = forward_tape(pt, ad.Tensor(xb, op="images"), xb.shape[0])
                loss = ad.softmax_cross_entropy(logits, yb)
                ad.backward(loss)
            except ad.NonFiniteError as e:
                raise TrainingError(f"non-finite loss at epoch {epoch}, sample offset {start}: {e}")
            grads = {k: pt[k].grad if pt[k].grad is not None else np.zeros_like(params[k])
                     for k in params}
            params = ad.adam_step(params, grads, state)
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        trained = ModelParams(model.arch, params, dict(model.provenance))
        if epoch_hook is not None and epoch_hook(epoch, trained):
            return trained, epoch_losses
    return ModelParams(model.arch, params, dict(model.provenance)), epoch_losses


def dataset_loss(model, images, labels, batch_size=256):
    """Mean cross-entropy of the model on a labelled set."""
    x = _to_real(images)
    y = np.asarray(labels, dtype=np.intp)
    total = 0.0
    for i in range(0, x.shape[0], batch_size):
        logits, _ = forward(model, x[i:i + batch_size])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total += -logp[np.arange(len(logits)), y[i:i + batch_size]].sum()
    return float(total / x.shape[0])


def pretrain(model, bundle, cfg):
    """Train a clean baseline on `bundle.train`; returns (model, val accuracy)."""
    trained, _ = _run_epochs(model, bundle.train.images, bundle.train.labels, cfg)
    val_acc = accuracy(trained, _to_real(bundle.val.images), bundle.val.labels)
    trained.provenance = {
        "dataset": bundle.name,
        "phase": "pretrain",
        "epochs": cfg.epochs,
        "accuracy": val_acc,
        "seed": cfg.seed,
    }
    return trained, val_acc


@dataclass
class RetrainResult:
    model: ModelParams
    epoch_losses: list
    epoch_asr: list
    epochs_run: int


def retrain(model, dataset, cfg, asr_eval=None, stop_asr=None):
    """Fine-tune from the given weights on a mixed (clean + poisoned) dataset.

    `dataset` is anything with .images and .labels. `asr_eval` is an optional
    (triggered_images, target) pair; when present the attack success rate is
    recorded after every epoch, and training stops early once it reaches
    `stop_asr`.
    """
    asr_log = []

    def hook(epoch, current):
        if asr_eval is None:
            return False
        triggered, target = asr_eval
        preds = predict(current, _to_real(triggered))
        rate = float(np.mean(preds == target))
        asr_log.append(rate)
        return stop_asr is not None and rate >= stop_asr

    trained, losses = _run_epochs(model, dataset.images, dataset.labels, cfg, epoch_hook=hook)
    trained.provenance = {
        "dataset": model.provenance.get("dataset", "unknown"),
        "phase": "retrain",
        "epochs": len(losses),
        "accuracy": model.provenance.get("accuracy", -1.0),
        "seed": cfg.seed,
    }
    return RetrainResult(trained, losses, asr_log, len(losses))
