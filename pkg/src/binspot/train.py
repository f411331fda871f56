"""Binarization-aware distillation training.

One step processes one batch as follows: a single frozen-teacher forward
caches the per-block representations, then for each runtime variant
(ascending) the student runs a quantized forward, its cross-entropy and
frequency-split distillation losses are computed, and the backward pass
accumulates gradients scaled by that variant's weight 1/2^(delta-1). Only
after all variants contribute does one SGD-with-momentum update fire, and
binarizer ratios are clamped back into their allowed band.

Everything is seeded and iterated in fixed order, so identical
configurations produce bitwise-identical metrics streams.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .binarize import RATIO_MAX, RATIO_MIN
from .data import FeatureDataset
from .model import ThinnableFsmn
from .wavelet import freq_distill_loss_and_grads


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the training loop (desk-scale defaults)."""

    epochs: int = 30
    base_lr: float = 0.05
    momentum: float = 0.9
    gamma: float = 0.01  # distillation weight
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def variant_weight(delta: int) -> float:
    return 1.0 / 2.0 ** (delta - 1)


def total_loss(ce_per_delta: dict, fid_per_delta: dict, gamma: float) -> float:
    """Variant-weighted sum of task and distillation losses."""
    if set(ce_per_delta) != set(fid_per_delta):
        missing = set(ce_per_delta) ^ set(fid_per_delta)
        raise ValueError(f"loss entries missing for deltas {sorted(missing)}")
    tot = 0.0
    for delta in sorted(ce_per_delta):
        tot += variant_weight(delta) * (ce_per_delta[delta] + gamma * fid_per_delta[delta])
    return tot


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over the batch and its gradient w.r.t. logits (stable)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    loss = float(-np.mean(log_probs[np.arange(n), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class SGD:
    """SGD with momentum over a ParamStore; update order is name-sorted."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store, lr: float) -> None:
        for name in sorted(store.params):
            g = store.grads.get(name)
            if g is None and self.weight_decay == 0.0 and name not in self.velocity:
                continue  # nothing would change
            g = np.zeros_like(store.params[name]) if g is None else g
            if self.weight_decay:
                g = g + self.weight_decay * store.params[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            store.params[name] -= lr * v

    def state_dict(self) -> dict:
        return {"v." + k: v for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict) -> None:
        self.velocity = {
            k[2:]: np.asarray(v, dtype=np.float64)
            for k, v in state.items()
            if k.startswith("v.")
        }


def clamp_binarizer_ratios(store) -> None:
    for name, value in store.params.items():
        if name.endswith(".ratio"):
            np.clip(value, RATIO_MIN, RATIO_MAX, out=value)


def distill_pairs(student_trace, teacher_trace):
    """Uniform layer mapping: student block i*delta <-> teacher block i*delta."""
    missing = [l for l in student_trace.executed if l not in teacher_trace.reps]
    if missing:
        raise ValueError(f"teacher trace lacks blocks {missing}")
    teacher_sel = {l: teacher_trace.reps[l] for l in student_trace.executed}
    return student_trace.reps, teacher_sel


def train_step(
    model: ThinnableFsmn,
    teacher: ThinnableFsmn | None,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    opt: SGD,
    lr: float,
    gamma: float,
) -> dict:
    """One jointly-accumulated update across all runtime variants."""
    teacher_trace = None
    if teacher is not None and gamma > 0:
        _, teacher_trace = teacher.forward(batch_x, 1, mode="float")
    model.store.zero_grads()
    ce_per, fid_per = {}, {}
    for delta in model.config.delta_set:
        logits, trace = model.forward(
            batch_x, delta, mode=model.default_mode(),
            train_stats=True, update_running=True,
        )
        ce, g_logits = softmax_cross_entropy(logits, batch_y)
        w = variant_weight(delta)
        fid = 0.0
        rep_grads = None
        if teacher_trace is not None:
            student_reps, teacher_reps = distill_pairs(trace, teacher_trace)
            fid, fid_grads = freq_distill_loss_and_grads(student_reps, teacher_reps)
            rep_grads = {l: (w * gamma) * g for l, g in fid_grads.items()}
        model.backward(trace, w * g_logits, rep_grads)
        ce_per[delta] = ce
        fid_per[delta] = fid
    loss_tot = total_loss(ce_per, fid_per, gamma)
    opt.step(model.store, lr)
    clamp_binarizer_ratios(model.store)
    return {"loss_total": loss_tot, "ce": ce_per, "fid": fid_per, "lr": lr}


def evaluate(model: ThinnableFsmn, dataset: FeatureDataset, delta: int = 1,
             batch_size: int = 256, mode: str | None = None) -> float:
    """Argmax accuracy on a dataset for one runtime variant."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        xb = dataset.features[lo : lo + batch_size]
        yb = dataset.labels[lo : lo + batch_size]
        logits, _ = model.forward(xb, delta, mode=mode)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return correct / len(dataset)


def metrics_header(delta_set) -> str:
    cols = ["step", "lr", "loss_total"]
    for d in delta_set:
        cols += [f"loss_ce_d{d}", f"loss_fid_d{d}"]
    return ",".join(cols)


def metrics_line(step: int, metrics: dict, delta_set) -> str:
    parts = [str(step), f"{metrics['lr']:.17g}", f"{metrics['loss_total']:.17g}"]
    for d in delta_set:
        parts += [f"{metrics['ce'][d]:.17g}", f"{metrics['fid'][d]:.17g}"]
    return ",".join(parts)


def parameter_hash(model: ThinnableFsmn) -> str:
    """Order-stable digest of all parameters and normalization state."""
    h = hashlib.sha256()
    for name in sorted(model.store.params):
        h.update(name.encode())
        h.update(model.store.params[name].tobytes())
    for name in sorted(model.store.state):
        h.update(name.encode())
        h.update(model.store.state[name].tobytes())
    return h.hexdigest()


def run_training(
    model: ThinnableFsmn,
    teacher: ThinnableFsmn | None,
    train_ds: FeatureDataset,
    cfg: TrainConfig,
    metrics_fh=None,
) -> list[dict]:
    """Full loop: seeded batch order, per-step cosine schedule, metrics stream."""
    opt = SGD(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    n = len(train_ds)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    if metrics_fh is not None:
        metrics_fh.write(metrics_header(model.config.delta_set) + "\n")
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            metrics = train_step(
                model, teacher,
                train_ds.features[idx], train_ds.labels[idx],
                opt, lr, cfg.gamma,
            )
            if metrics_fh is not None:
                metrics_fh.write(
                    metrics_line(step, metrics, model.config.delta_set) + "\n"
                )
            history.append(metrics)
            step += 1
    return history
