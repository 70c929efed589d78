"""Attack success rate, functionality, activation reports, and the block
structural-similarity scores used to quantify trigger invisibility.

The similarity index splits the (channel-averaged) image into non-overlapping
blocks, computes Gaussian-weighted luminance/contrast/structure factors per
block, and averages their product over blocks. The perceptual score of an
image pair equals that index computed on same-frame pairs (no geometric
alignment applies to additive or bit-plane triggers).
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import predict, forward


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class SsimConfig:
    block: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    window_sigma: float = 1.5
    window_radius: int = 5    # hard cutoff: 11x11 window
    grayscale: bool = True

    def __post_init__(self):
        if self.block < 2 or self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise MetricError("invalid similarity config")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self):
        return self.c2 / 2.0


def default_ssim_config(image):
    """Byte images score on the 0..255 range, real images on 0..1."""
    rng = 255.0 if np.asarray(image).dtype == np.uint8 else 1.0
    return SsimConfig(dynamic_range=rng)


def _to_gray(image, cfg):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=2) if cfg.grayscale else x.reshape(x.shape[0], -1)
    if x.ndim == 2:
        return x
    raise MetricError(f"expected HxW or HxWxC image, got shape {x.shape}")


def _block_weights(bh, bw, cfg):
    cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
    yy, xx = np.mgrid[0:bh, 0:bw]
    w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * cfg.window_sigma ** 2))
    w[(np.abs(yy - cy) > cfg.window_radius) | (np.abs(xx - cx) > cfg.window_radius)] = 0.0
    return w / w.sum()


def ssim(x, y, cfg=None):
    """Mean block similarity of two equal-shape images."""
    xa, ya = np.asarray(x), np.asarray(y)
    if xa.shape != ya.shape:
        raise MetricError(f"shape mismatch {xa.shape} vs {ya.shape}")
    if cfg is None:
        cfg = default_ssim_config(xa)
    gx, gy = _to_gray(xa, cfg), _to_gray(ya, cfg)
    h, w = gx.shape
    scores = []
    for by in range(0, h, cfg.block):
        for bx in range(0, w, cfg.block):
            bxs = gx[by:by + cfg.block, bx:bx + cfg.block]
            bys = gy[by:by + cfg.block, bx:bx + cfg.block]
            wts = _block_weights(bxs.shape[0], bxs.shape[1], cfg)
            mx = float((wts * bxs).sum())
            my = float((wts * bys).sum())
            vx = float((wts * (bxs - mx) ** 2).sum())
            vy = float((wts * (bys - my) ** 2).sum())
            cov = float((wts * (bxs - mx) * (bys - my)).sum())
            sx, sy = math.sqrt(max(vx, 0.0)), math.sqrt(max(vy, 0.0))
            lum = (2 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1)
            con = (2 * sx * sy + cfg.c2) / (vx + vy + cfg.c2)
            stru = (cov + cfg.c3) / (sx * sy + cfg.c3)
            scores.append((lum ** cfg.alpha) * (con ** cfg.beta) * (stru ** cfg.gamma))
    return float(np.mean(scores))


def pass_score(x, y, cfg=None):
    """Perceptual similarity of same-frame pairs; equals the block index."""
    return ssim(x, y, cfg)


def attack_success_rate(model, triggered_images, target, batch_size=256):
    """Fraction of triggered inputs classified as the attack target."""
    imgs = np.asarray(triggered_images)
    if imgs.shape[0] == 0:
        raise MetricError("empty triggered set")
    x = imgs.astype(np.float64) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float64)
    preds = predict(model, x, batch_size=batch_size)
    return float(np.mean(preds == target))


def functionality(model, images, labels, batch_size=256):
    """Top-1 accuracy on the clean validation set."""
    imgs = np.asarray(images)
    if imgs.shape[0] == 0:
        raise MetricError("empty validation set")
    x = imgs.astype(np.float64) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float64)
    preds = predict(model, x, batch_size=batch_size)
    return float(np.mean(preds == np.asarray(labels)))


def activation_report(model, clean_images, triggered_images, position, batch_size=256):
    """Mean penultimate activation at one position, clean set vs triggered set."""
    out = []
    for imgs in (clean_images, triggered_images):
        imgs = np.asarray(imgs)
        if imgs.shape[0] == 0:
            raise MetricError("empty image set")
        x = imgs.astype(np.float64) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float64)
        acts = []
        for i in range(0, x.shape[0], batch_size):
            _, pen = forward(model, x[i:i + batch_size])
            acts.append(pen[:, position])
        out.append(float(np.concatenate(acts).mean()))
    return out[0], out[1]


@dataclass
class PairCell:
    source: int
    target: int
    functionality: float | None
    attack_success: float | None
    error: str | None = None


def sweep_pairs(run_attack, pairs):
    """Run an attack callable over (source, target) pairs with per-cell
    failure isolation. `run_attack(source, target)` returns (functionality,
    attack success rate)."""
    cells = {}
    for source, target in pairs:
        if source == target:
            raise MetricError(f"diagonal pair ({source}, {target}) not allowed")
        try:
            func, asr = run_attack(source, target)
            cells[(source, target)] = PairCell(source, target, float(func), float(asr))
        except Exception as e:  # cell-level isolation by contract
            cells[(source, target)] = PairCell(source, target, None, None, error=str(e))
    return cells


def all_pairs(classes):
    return [(s, t) for s in range(classes) for t in range(classes) if s != t]
