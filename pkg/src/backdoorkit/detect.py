"""Backdoor detection by per-class trigger reverse-engineering and MAD
anomaly scoring over the recovered mask norms.

For each candidate target label, a (mask, pattern) pair is optimized so that
blended inputs (1 - m) * x + m * pattern classify as that label on a clean
sample set, while a dynamically weighted L1 penalty shrinks the mask. Labels
whose recovered mask is anomalously small on the MAD scale are flagged.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import forward_tape


class DetectError(Exception):
    pass


MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


@dataclass(frozen=True)
class DetectConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.1
    lambda_init: float = 1e-3
    feasibility: float = 0.95   # required blended-attack success
    patience: int = 5           # feasible checks before the penalty doubles
    sample_count: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.sample_count < 2:
            raise DetectError("invalid detection budget")
        if not 0 < self.feasibility <= 1:
            raise DetectError("feasibility must be in (0, 1]")


@dataclass
class ReversedTrigger:
    mask: np.ndarray        # (H, W) in [0, 1]
    pattern: np.ndarray     # (H, W, C) in [0, 1]
    l1_norm: float
    feasible: bool
    trace: list = field(default_factory=list)

    def validate(self):
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise DetectError("mask entries outside [0, 1]")
        if abs(float(self.mask.sum()) - self.l1_norm) > 1e-9:
            raise DetectError("stored L1 norm inconsistent with the mask")


@dataclass
class DetectionReport:
    l1_norms: np.ndarray
    anomaly_indices: np.ndarray
    flagged: tuple
    triggers: list


def blend(images, mask, pattern):
    """(1 - m) * x + m * pattern, broadcasting the mask over channels."""
    m = mask[None, :, :, None]
    return (1.0 - m) * images + m * pattern[None, :, :, :]


def _squash(t):
    half = ad.Tensor(0.5)
    return ad.add(ad.mul(ad.tanh(t), half), half)


def reverse_trigger(model, target, clean_images, cfg=DetectConfig()):
    """Reverse-engineer a minimal blended trigger that forces `target`.

    Returns the smallest-mask feasible state seen; when feasibility was never
    reached within the budget the final state is returned flagged infeasible.
    """
    x = np.asarray(clean_images)
    x = x.astype(np.float64) / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)
    if x.ndim != 4:
        raise DetectError(f"expected a batch of images, got shape {x.shape}")
    n, h, w, c = x.shape
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    wm = rng.normal(-1.1, 0.05, size=(h, w))
    wp = rng.normal(0.0, 0.5, size=(h, w, c))
    adam = ad.AdamState(lr=cfg.lr)
    lam = cfg.lambda_init
    y = np.full(cfg.batch_size, target, dtype=np.intp)
    best = None
    feasible_streak = 0
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        hits = 0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < cfg.batch_size:
                yb = np.full(idx.size, target, dtype=np.intp)
            else:
                yb = y
            wmt = ad.Tensor(wm, op="mask_w")
            wpt = ad.Tensor(wp, op="pattern_w")
            mask = _squash(wmt)
            pattern = _squash(wpt)
            xb = ad.Tensor(x[idx])
            m3 = ad.reshape(mask, (1, h, w, 1))
            blended = ad.add(ad.mul(ad.sub(ad.Tensor(1.0), m3), xb),
                             ad.mul(m3, ad.reshape(pattern, (1, h, w, c))))
            pt = {k: ad.Tensor(v) for k, v in model.params.items()}
            logits, _ = forward_tape(pt, blended, idx.size)
            loss = ad.add(ad.softmax_cross_entropy(logits, yb),
                          ad.mul(ad.Tensor(lam), ad.tsum(mask)))
            ad.backward(loss)
            new = ad.adam_step({"wm": wm, "wp": wp},
                               {"wm": wmt.grad, "wp": wpt.grad}, adam)
            wm, wp = new["wm"], new["wp"]
            hits += int(np.sum(logits.data.argmax(axis=1) == target))
            seen += idx.size
        success = hits / seen
        mask_now = (np.tanh(wm) + 1.0) / 2.0
        l1_now = float(mask_now.sum())
        trace.append((epoch, success, l1_now, lam))
        if success >= cfg.feasibility:
            if best is None or l1_now < best[2]:
                best = (mask_now.copy(), ((np.tanh(wp) + 1.0) / 2.0).copy(), l1_now)
            feasible_streak += 1
            if feasible_streak >= cfg.patience:
                lam = min(lam * 2.0, 1e4)
                feasible_streak = 0
        else:
            lam = max(lam / 2.0, 1e-7)
            feasible_streak = 0
    if best is not None:
        mask_b, pattern_b, l1_b = best
        return ReversedTrigger(mask_b, pattern_b, l1_b, True, trace)
    mask_now = (np.tanh(wm) + 1.0) / 2.0
    return ReversedTrigger(mask_now, ((np.tanh(wp) + 1.0) / 2.0), float(mask_now.sum()),
                           False, trace)


def mad_anomaly(l1_norms):
    """Median-absolute-deviation anomaly index per label.

    Zero deviation makes indices 0 at the median and infinite elsewhere;
    the all-equal case is therefore all zeros.
    """
    x = np.asarray(l1_norms, dtype=np.float64)
    if x.size < 3:
        raise DetectError("need at least 3 labels for anomaly scoring")
    med = np.median(x)
    dev = np.abs(x - med)
    mad = MAD_CONSISTENCY * np.median(dev)
    if mad == 0.0:
        return np.where(dev == 0.0, 0.0, np.inf)
    return dev / mad


def detect_backdoor(model, clean_images, clean_labels, cfg=DetectConfig(), keep_triggers=True):
    """Per-label reverse engineering, then one-sided MAD flagging: a label is
    flagged when its anomaly index exceeds 2 on the small-norm side."""
    labels = np.asarray(clean_labels)
    x = np.asarray(clean_images)
    if x.shape[0] != labels.shape[0] or x.shape[0] == 0:
        raise DetectError("clean set shapes inconsistent or empty")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    take = min(cfg.sample_count, x.shape[0])
    idx = rng.permutation(x.shape[0])[:take]
    sample = x[idx]
    if np.unique(labels[idx]).size < 2:
        raise DetectError("clean sample set must span multiple source classes")
    classes = model.arch.classes
    triggers = []
    norms = np.empty(classes)
    for label in range(classes):
        sub = DetectConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                           lambda_init=cfg.lambda_init, feasibility=cfg.feasibility,
                           patience=cfg.patience, sample_count=cfg.sample_count,
                           seed=cfg.seed * 1000 + label)
        rt = reverse_trigger(model, label, sample, sub)
        triggers.append(rt)
        norms[label] = rt.l1_norm
    indices = mad_anomaly(norms)
    median = np.median(norms)
    flagged = tuple(int(i) for i in range(classes)
                    if indices[i] > ANOMALY_THRESHOLD and norms[i] < median)
    return DetectionReport(norms, indices, flagged, triggers if keep_triggers else [])
