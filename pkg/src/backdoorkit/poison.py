"""Poisoned training/validation set construction for both attack families.

Poisoned samples are relabeled *copies* mixed back into the full training set;
clean samples stay byte-identical. Sample selection is a seeded draw without
replacement with the pollution-rate denominators: source-class size for
single-target, the whole training set for universal/injection-all.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data_io import Dataset
from .stego import lsb_embed, StegoConfig


class PoisonError(Exception):
    pass


@dataclass(frozen=True)
class PoisonSpec:
    mode: str  # "single-target" | "universal" | "injection-all"
    target: int
    rate: float
    source: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("single-target", "universal", "injection-all"):
            raise PoisonError(f"unknown poison mode {self.mode!r}")
        if not 0 < self.rate <= 1:
            raise PoisonError(f"pollution rate must be in (0, 1], got {self.rate}")
        if self.mode == "single-target":
            if self.source < 0:
                raise PoisonError("single-target mode needs a source label")
            if self.source == self.target:
                raise PoisonError("source class must differ from the target class")


@dataclass
class PoisonedDataset:
    images: np.ndarray        # uint8 mixed samples (clean originals + poisoned copies)
    labels: np.ndarray        # assigned labels
    original_labels: np.ndarray
    provenance: np.ndarray    # "clean" | "poisoned" per sample
    poisoned_val: Dataset     # triggered validation set (labels = original labels)
    target: int
    spec: PoisonSpec

    @property
    def poisoned_count(self):
        return int(np.sum(self.provenance == "poisoned"))


def apply_additive_trigger(image, trigger):
    """out = clip(image + perturbation, 0, 1) on the real scale, honoring the mask."""
    x = np.asarray(image, dtype=np.float64)
    pert = trigger.perturbation
    if x.shape[-3:] != pert.shape:
        raise PoisonError(f"image shape {x.shape} does not match trigger shape {pert.shape}")
    if trigger.mask is not None:
        pert = pert * trigger.mask[:, :, None]
    return np.clip(x + pert, 0.0, 1.0)


def _apply_trigger_bytes(images, trigger, stego_cfg=None):
    """Apply either trigger family to a byte image stack, returning bytes."""
    from .stego import BytePayload
    if isinstance(trigger, BytePayload):
        cfg = stego_cfg or StegoConfig()
        return np.stack([lsb_embed(img, trigger, cfg) for img in images])
    real = apply_additive_trigger(images.astype(np.float64) / 255.0, trigger)
    return np.rint(real * 255.0).astype(np.uint8)


def _mix(train, chosen_idx, triggered_images, target):
    n = len(train)
    images = np.concatenate([train.images, triggered_images])
    labels = np.concatenate([train.labels, np.full(len(chosen_idx), target, dtype=np.int64)])
    original = np.concatenate([train.labels, train.labels[chosen_idx]])
    provenance = np.concatenate([np.full(n, "clean", dtype=object),
                                 np.full(len(chosen_idx), "poisoned", dtype=object)])
    return images, labels, original, provenance


def poison_single_target(bundle, payload, stego_cfg, spec):
    """Steganographic single-target poisoning: a seeded fraction of the source
    class is embedded, relabeled to the target, and mixed back in. The poisoned
    validation set embeds every source-class validation image."""
    if spec.mode != "single-target":
        raise PoisonError("spec.mode must be 'single-target'")
    train = bundle.train
    src_idx = np.flatnonzero(train.labels == spec.source)
    if src_idx.size == 0:
        raise PoisonError(f"no samples of source class {spec.source}")
    if spec.rate * src_idx.size < 1:
        raise PoisonError(f"rate {spec.rate} selects no samples from a class of {src_idx.size}")
    count = math.ceil(spec.rate * src_idx.size)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    chosen = src_idx[rng.choice(src_idx.size, size=count, replace=False)]
    triggered = _apply_trigger_bytes(train.images[chosen], payload, stego_cfg)
    images, labels, original, provenance = _mix(train, chosen, triggered, spec.target)

    val_src = np.flatnonzero(bundle.val.labels == spec.source)
    val_images = _apply_trigger_bytes(bundle.val.images[val_src], payload, stego_cfg)
    poisoned_val = Dataset(val_images, bundle.val.labels[val_src])
    return PoisonedDataset(images, labels, original, provenance, poisoned_val,
                           spec.target, spec)


def poison_universal(bundle, trigger, spec, stego_cfg=None):
    """Universal poisoning: an epsilon fraction of the whole training set, any
    label, gets the trigger and the target label. The poisoned validation set
    is the entire clean validation set with the trigger applied."""
    if spec.mode != "universal":
        raise PoisonError("spec.mode must be 'universal'")
    train = bundle.train
    count = int(round(spec.rate * len(train)))
    if count < 1:
        raise PoisonError(f"rate {spec.rate} selects no samples from {len(train)}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    chosen = rng.choice(len(train), size=count, replace=False)
    triggered = _apply_trigger_bytes(train.images[chosen], trigger, stego_cfg)
    images, labels, original, provenance = _mix(train, chosen, triggered, spec.target)

    val_images = _apply_trigger_bytes(bundle.val.images, trigger, stego_cfg)
    poisoned_val = Dataset(val_images, bundle.val.labels.copy())
    return PoisonedDataset(images, labels, original, provenance, poisoned_val,
                           spec.target, spec)


def poison_injection_all(bundle, triggers, rate, seed=0, stego_cfg=None):
    """One distinct trigger per class, each poisoning a disjoint seeded draw of
    the whole training set toward its own class."""
    classes = bundle.classes
    if len(triggers) != classes:
        raise PoisonError(f"need one trigger per class: {len(triggers)} != {classes}")
    train = bundle.train
    per_class = int(round(rate * len(train)))
    if per_class < 1:
        raise PoisonError(f"rate {rate} selects no samples from {len(train)}")
    if per_class * classes > len(train):
        raise PoisonError("disjoint per-class draws exceed the training set")
    rng = np.random.Generator(np.random.PCG64(seed))
    pool = rng.permutation(len(train))
    images = [train.images]
    labels = [train.labels]
    original = [train.labels]
    provenance = [np.full(len(train), "clean", dtype=object)]
    val_images = []
    val_labels = []
    val_targets = []
    for c in range(classes):
        chosen = pool[c * per_class:(c + 1) * per_class]
        triggered = _apply_trigger_bytes(train.images[chosen], triggers[c], stego_cfg)
        images.append(triggered)
        labels.append(np.full(per_class, c, dtype=np.int64))
        original.append(train.labels[chosen])
        provenance.append(np.full(per_class, "poisoned", dtype=object))
        vt = _apply_trigger_bytes(bundle.val.images, triggers[c], stego_cfg)
        val_images.append(vt)
        val_labels.append(bundle.val.labels.copy())
        val_targets.append(np.full(len(bundle.val), c, dtype=np.int64))
    poisoned_val = Dataset(np.concatenate(val_images), np.concatenate(val_labels))
    out = PoisonedDataset(np.concatenate(images), np.concatenate(labels),
                          np.concatenate(original), np.concatenate(provenance),
                          poisoned_val, -1,
                          PoisonSpec("injection-all", target=0, rate=rate, seed=seed))
    out.val_targets = np.concatenate(val_targets)
    return out
