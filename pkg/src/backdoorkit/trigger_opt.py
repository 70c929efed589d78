"""Additive trigger synthesis by anchor-neuron amplification under L2, L0, or
L-infinity regularization.

All three generators freeze the victim model and optimize only the input
noise. L2 and L-infinity run a two-phase schedule (amplify the anchor
activation, then shrink the norm with a decaying learning rate) over a tanh
change of variables that keeps pixels in (0, 1) without per-step projection.
L0 instead runs saliency-map pixel elimination in raw pixel space with
clipping, fixing the least-contributing pixel each round until the requested
pixel budget remains.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .model import forward_tape


class TriggerOptimizationError(Exception):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AnchorSpec:
    positions: tuple
    scale: float = 10.0
    layer: str = "penultimate"
    initial_activations: tuple | None = None

    def __post_init__(self):
        if len(self.positions) < 1:
            raise TriggerOptimizationError("need at least one anchor position")
        if self.scale <= 0:
            raise TriggerOptimizationError("scale factor must be positive")


@dataclass(frozen=True)
class OptSchedule:
    phase1_activation_weight: float = 1.0    # theta while amplifying
    phase2_activation_weight: float = 0.001  # theta while shrinking the norm
    norm_weight: float = 1.0                 # lambda
    phase1_iteration_cap: int = 2000
    phase2_iteration_cap: int = 30000
    lr: float = 0.1
    lr_decay: float = 0.95
    lr_decay_every: int = 100
    lr_floor: float = 0.01
    linf_threshold_init: float = 1.0
    linf_threshold_decay: float = 0.9
    linf_threshold_floor: float = 0.01
    l0_inner_steps: int = 30
    min_amplification: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if min(self.phase1_activation_weight, self.phase2_activation_weight,
               self.norm_weight, self.lr, self.linf_threshold_init) <= 0:
            raise TriggerOptimizationError("schedule weights must be positive")
        if not (0 < self.lr_decay < 1 and 0 < self.linf_threshold_decay < 1):
            raise TriggerOptimizationError("decay factors must lie in (0, 1)")
        if min(self.phase1_iteration_cap, self.phase2_iteration_cap,
               self.lr_decay_every, self.l0_inner_steps) < 1:
            raise TriggerOptimizationError("iteration counts must be >= 1")


@dataclass
class AdditiveTrigger:
    perturbation: np.ndarray          # (H, W, C) real-valued, [0, 1] scale
    mask: np.ndarray | None           # (H, W) binary, L0 only
    norm_kind: str                    # "l2" | "l0" | "linf"
    norm_value: float
    log: list
    stats: dict = None

    def recomputed_norm(self):
        pert = self.perturbation
        if self.norm_kind == "l2":
            return float(np.sqrt(np.sum(pert * pert)))
        if self.norm_kind == "l0":
            return float(np.count_nonzero(np.any(pert != 0.0, axis=2)))
        return float(np.max(np.abs(pert)))

    def validate(self):
        if self.mask is not None:
            outside = self.perturbation[self.mask == 0]
            if outside.size and np.any(outside != 0.0):
                raise TriggerOptimizationError("nonzero trigger entries outside the mask")
        if abs(self.recomputed_norm() - self.norm_value) > 1e-9:
            raise TriggerOptimizationError(
                f"stored norm {self.norm_value} inconsistent with tensor "
                f"({self.recomputed_norm()})")


def find_anchor(model, target, count=1, scale=10.0):
    """Positions of the largest final-layer weights toward the target class,
    descending; ties break toward the lower index."""
    w = model.params["dense2_w"]
    if not 0 <= target < w.shape[1]:
        raise TriggerOptimizationError(f"target {target} out of range")
    if not 1 <= count <= w.shape[0]:
        raise TriggerOptimizationError(f"anchor count {count} out of range 1..{w.shape[0]}")
    order = np.argsort(-w[:, target], kind="stable")
    return AnchorSpec(positions=tuple(int(i) for i in order[:count]), scale=scale)


def box_constrain(w):
    """Map any real tensor into (0, 1) via (tanh(w) + 1) / 2."""
    return (np.tanh(np.asarray(w, dtype=np.float64)) + 1.0) / 2.0


def box_unconstrain(x):
    """Inverse map; defined for x strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise TriggerOptimizationError("box_unconstrain needs values strictly in (0, 1)")
    return np.arctanh(2.0 * x - 1.0)


def _image_shape(model):
    a = model.arch
    return (a.height, a.width, a.channels)


def _anchor_activations(model, image):
    """Penultimate activations of a single image, as a tape with leaf `w`."""
    pt = {k: ad.Tensor(v, op=k) for k, v in model.params.items()}
    logits, pen = forward_tape(pt, image, 1)
    return logits, pen


def _initial_noise(model, anchor, schedule):
    """Seeded Gaussian start; redrawn while the anchor is dead at the start."""
    rng = np.random.Generator(np.random.PCG64(schedule.seed))
    shape = (1,) + _image_shape(model)
    for _ in range(8):
        alpha0 = np.clip(rng.normal(0.5, 0.25, size=shape), 0.02, 0.98)
        pt = {k: ad.Tensor(v) for k, v in model.params.items()}
        _, pen = forward_tape(pt, ad.Tensor(alpha0), 1)
        acts = pen.data[0, list(anchor.positions)]
        if float(acts.min()) > 1e-3:
            break
    return alpha0, acts.copy()


def _tanh_phase_run(model, anchor, schedule, norm_term, stop_fn, log):
    """Shared two-phase loop for the L2 and L-infinity generators.

    `norm_term(alpha_tensor, state)` returns the regularization Tensor for the
    current iteration; `stop_fn(alpha_array, activations, state)` decides
    phase-2 termination. `state` is a mutable dict both callbacks share.
    """
    alpha0, init_acts = _initial_noise(model, anchor, schedule)
    targets = anchor.scale * init_acts
    w = box_unconstrain(alpha0)
    adam = ad.AdamState(lr=schedule.lr)
    positions = list(anchor.positions)
    state = {"rho_trace": [], "phase2_iterations": 0, "targets": targets}
    log.append(f"initial_activation={init_acts.tolist()}")
    log.append(f"target_activation={targets.tolist()}")

    theta = schedule.phase1_activation_weight
    phase = 1
    acts = init_acts
    alpha_arr = alpha0
    it = 0
    while True:
        it += 1
        wt = ad.Tensor(w, op="w")
        half = ad.Tensor(0.5)
        alpha = ad.add(ad.mul(ad.tanh(wt), half), half)
        pt = {k: ad.Tensor(v) for k, v in model.params.items()}
        _, pen = forward_tape(pt, alpha, 1)
        gap = ad.sub(ad.take_last(pen, positions), ad.Tensor(targets[None, :]))
        loss = ad.add(ad.mul(ad.Tensor(theta), ad.l2_norm(gap)),
                      ad.mul(ad.Tensor(schedule.norm_weight), norm_term(alpha, state)))
        ad.backward(loss)
        new = ad.adam_step({"w": w}, {"w": wt.grad}, adam)
        w = new["w"]
        alpha_arr = box_constrain(w)
        acts = pen.data[0, positions]

        if phase == 1:
            reached = bool(np.all(acts >= targets))
            if reached or it >= schedule.phase1_iteration_cap:
                ratio = float(np.min(acts / np.maximum(init_acts, 1e-12)))
                if ratio < schedule.min_amplification:
                    raise TriggerOptimizationError(
                        "anchor activation failed to amplify within the phase-1 cap",
                        {"iterations": it, "activation": acts.tolist(),
                         "initial": init_acts.tolist(), "ratio": ratio})
                log.append(f"phase1_end_iteration={it} activation={acts.tolist()}")
                phase = 2
                theta = schedule.phase2_activation_weight
                phase2_start = it
        else:
            state["phase2_iterations"] = it - phase2_start
            if (it - phase2_start) % schedule.lr_decay_every == 0:
                adam.lr = max(adam.lr * schedule.lr_decay, schedule.lr_floor)
            if stop_fn(alpha_arr[0], acts, state):
                log.append(f"phase2_end_iteration={it} activation={acts.tolist()}")
                return alpha_arr[0], acts, init_acts, state, it
            if it - phase2_start >= schedule.phase2_iteration_cap:
                raise TriggerOptimizationError(
                    "norm target not reached within the phase-2 cap",
                    {"iterations": it, "activation": acts.tolist(),
                     "norm_state": {k: v for k, v in state.items() if k != "rho_trace"}})


def gen_trigger_l2(model, anchor, schedule=OptSchedule(), stop_norm=5.0):
    """Amplify the anchor, then shrink the Euclidean norm to `stop_norm`."""
    if stop_norm <= 0:
        raise TriggerOptimizationError("stop_norm must be positive")
    log = [f"kind=l2 stop_norm={stop_norm} seed={schedule.seed}"]

    def norm_term(alpha, state):
        return ad.l2_norm(alpha)

    def stop_fn(alpha, acts, state):
        return float(np.sqrt(np.sum(alpha * alpha))) <= stop_norm

    pert, acts, init_acts, state, iters = _tanh_phase_run(
        model, anchor, schedule, norm_term, stop_fn, log)
    norm = float(np.sqrt(np.sum(pert * pert)))
    log.append(f"iterations={iters} achieved_norm={norm}")
    return AdditiveTrigger(pert, None, "l2", norm, log,
                           stats={"iterations": iters,
                                  "initial_activation": init_acts.tolist(),
                                  "final_activation": acts.tolist()})


def gen_trigger_linf(model, anchor, schedule=OptSchedule(), stop_threshold=0.12):
    """Amplify the anchor, then iteratively shrink the exceedance threshold by
    the decay factor whenever every pixel is below it."""
    if stop_threshold <= 0:
        raise TriggerOptimizationError("stop_threshold must be positive")
    log = [f"kind=linf stop_threshold={stop_threshold} seed={schedule.seed}"]
    rho_box = {"rho": schedule.linf_threshold_init}

    def norm_term(alpha, state):
        return ad.hinge_above(alpha, rho_box["rho"])

    def stop_fn(alpha, acts, state):
        rho = rho_box["rho"]
        if float(alpha.max()) < rho:
            if rho <= stop_threshold:
                return True
            rho *= schedule.linf_threshold_decay
            rho_box["rho"] = rho
            state["rho_trace"].append(rho)
            if rho < schedule.linf_threshold_floor and not np.all(acts >= state["targets"]):
                raise TriggerOptimizationError(
                    "threshold underflow before the activation target was met",
                    {"rho": rho, "activation": acts.tolist()})
        return False

    pert, acts, init_acts, state, iters = _tanh_phase_run(
        model, anchor, schedule, norm_term, stop_fn, log)
    norm = float(np.max(np.abs(pert)))
    log.append(f"iterations={iters} achieved_norm={norm} "
               f"rho_trace={['%.6f' % r for r in state['rho_trace']]}")
    return AdditiveTrigger(pert, None, "linf", norm, log,
                           stats={"iterations": iters,
                                  "initial_activation": init_acts.tolist(),
                                  "final_activation": acts.tolist(),
                                  "rho_trace": list(state["rho_trace"]),
                                  "final_rho": rho_box["rho"]})


def _l0_loss_grad(model, alpha, positions, targets):
    """f = sum(z - A[anchor]); returns (f value, activations, grad wrt alpha)."""
    at = ad.Tensor(alpha, op="alpha")
    pt = {k: ad.Tensor(v) for k, v in model.params.items()}
    _, pen = forward_tape(pt, at, 1)
    gap = ad.sub(ad.Tensor(targets[None, :]), ad.take_last(pen, positions))
    f = ad.tsum(gap)
    ad.backward(f)
    grad = at.grad if at.grad is not None else np.zeros_like(alpha)
    return float(f.data), pen.data[0, positions], grad


def gen_trigger_l0(model, anchor, schedule=OptSchedule(), keep_pixels=16):
    """Saliency-map pixel elimination: per round, a masked inner optimization
    of the activation loss, then fix the pixel whose accumulated change
    contributed least to the loss reduction (ties to the lowest index).
    The returned trigger is the optimized pattern restricted to the mask."""
    h, w, c = _image_shape(model)
    if not 1 <= keep_pixels <= h * w:
        raise TriggerOptimizationError(f"keep_pixels must be in 1..{h * w}")
    log = [f"kind=l0 keep_pixels={keep_pixels} seed={schedule.seed}"]
    alpha0_full, init_acts = _initial_noise(model, anchor, schedule)
    targets = anchor.scale * init_acts
    positions = list(anchor.positions)
    log.append(f"initial_activation={init_acts.tolist()}")
    mask = np.ones((h, w), dtype=np.uint8)
    alpha0 = alpha0_full.copy()
    lr = schedule.lr
    flat_order = np.arange(h * w).reshape(h, w)

    alpha = alpha0
    rounds = h * w - keep_pixels
    for _ in range(rounds):
        alpha = alpha0.copy()
        m3 = mask[None, :, :, None]
        for _ in range(schedule.l0_inner_steps):
            _, _, grad = _l0_loss_grad(model, alpha, positions, targets)
            alpha = alpha - lr * m3 * grad
        delta = alpha - alpha0
        _, _, grad = _l0_loss_grad(model, alpha, positions, targets)
        score = (delta[0] * grad[0]).sum(axis=2)
        score = np.where(mask == 1, score, -np.inf)
        j = int(np.argmax(score))
        mask[np.unravel_index(j, (h, w))] = 0
        alpha0 = np.clip(alpha, 0.0, 1.0)

    # final masked re-optimization so the stored trigger (zero outside the
    # mask) is itself the optimized pattern
    alpha = np.clip(alpha0, 0.0, 1.0) * mask[None, :, :, None]
    m3 = mask[None, :, :, None]
    acts = init_acts
    for _ in range(schedule.l0_inner_steps):
        _, acts, grad = _l0_loss_grad(model, alpha, positions, targets)
        alpha = np.clip(alpha - lr * m3 * grad, 0.0, 1.0)
    alpha = alpha * m3
    _, acts, _ = _l0_loss_grad(model, alpha, positions, targets)

    pert = alpha[0]
    norm = float(np.count_nonzero(np.any(pert != 0.0, axis=2)))
    log.append(f"rounds={rounds} achieved_norm={norm} final_activation={acts.tolist()}")
    return AdditiveTrigger(pert, mask, "l0", norm, log,
                           stats={"rounds": rounds,
                                  "initial_activation": init_acts.tolist(),
                                  "final_activation": acts.tolist()})
