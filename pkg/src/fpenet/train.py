"""Loss, optimizer, schedule, augmentation and the training loop."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import channel_means
from .errors import DataError, DivergenceError
from .graph import forward, predict
from .metrics import ConfusionMatrix, miou
from .tensor import GradTape, Tensor, backward, record

IGNORE_INDEX = 255


@dataclass(frozen=True)
class PolySchedule:
    init_lr: float = 0.0005
    power: float = 0.9
    max_epoch: int = 400


def poly_lr(s, epoch):
    if not 0 <= epoch <= s.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {s.max_epoch}]")
    return s.init_lr * (1 - epoch / s.max_epoch) ** s.power


def cross_entropy_loss(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean softmax cross-entropy over the non-ignored pixels."""
    z = logits.data
    n, c, h, w = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DataError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        b, y, x = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"label {labels[b, y, x]} at (n={b}, y={y}, x={x}) outside [0, {c})")
    count = int(valid.sum())
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = np.where(valid, logsum - picked, 0.0)
    loss = nll.sum() / max(count, 1)

    def grad_fn(g):
        prob = np.exp(shifted - logsum[:, None])
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (prob - onehot) * valid[:, None] * (g / max(count, 1))
        return (grad.astype(z.dtype),)

    return record(Tensor(np.asarray(loss, dtype=z.dtype)), (logits,), grad_fn, "cross_entropy")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0001


def adam_step(state, params, grads=None, lr=0.0005):
    """One bias-corrected Adam update with coupled L2 decay.

    ``params`` maps names to tensors; ``grads`` maps the same names to
    arrays and defaults to each tensor's ``.grad``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at step {t}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_prob: float = 0.5
    rotation: tuple = (-10.0, 10.0)
    scale: tuple = (0.5, 1.75)
    mean: tuple = None
    ignore_index: int = IGNORE_INDEX


def _inverse_coords(h, w, flip, angle, scale):
    """Source (y, x) for every output pixel of flip -> scale/rotate about the centre."""
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = (yy - cy) / scale, (xx - cx) / scale
    a = math.radians(angle)
    ca, sa = math.cos(a), math.sin(a)
    sy = cy + ca * dy - sa * dx
    sx = cx + sa * dy + ca * dx
    if flip:
        sx = (w - 1) - sx
    return sy, sx


def apply_transform(image, labels, flip=False, angle=0.0, scale=1.0, policy=AugmentationPolicy()):
    """Deterministic geometric transform; image bilinear, labels nearest."""
    c, h, w = image.shape
    fill = image.mean(axis=(1, 2))
    if flip and angle == 0 and scale == 1:
        out_img, out_lab = image[:, :, ::-1].copy(), labels[:, ::-1].copy()
    elif not flip and angle == 0 and scale == 1:
        out_img, out_lab = image.copy(), labels.copy()
    else:
        sy, sx = _inverse_coords(h, w, flip, angle, scale)
        tol = 1e-6
        inside = (sy >= -tol) & (sy <= h - 1 + tol) & (sx >= -tol) & (sx <= w - 1 + tol)
        syc, sxc = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
        y0, x0 = np.floor(syc).astype(np.intp), np.floor(sxc).astype(np.intp)
        y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
        ty, tx = (syc - y0)[None], (sxc - x0)[None]
        top = image[:, y0, x0] + tx * (image[:, y0, x1] - image[:, y0, x0])
        bot = image[:, y1, x0] + tx * (image[:, y1, x1] - image[:, y1, x0])
        out_img = top + ty * (bot - top)
        out_img = np.where(inside[None], out_img, fill[:, None, None]).astype(image.dtype)

        ny = np.floor(sy + 0.5).astype(np.intp)
        nx = np.floor(sx + 0.5).astype(np.intp)
        near = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        out_lab = np.where(near, labels[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)], policy.ignore_index)
        out_lab = out_lab.astype(labels.dtype)
    if policy.mean is not None:
        out_img = out_img - np.asarray(policy.mean, dtype=image.dtype)[:, None, None]
    return out_img, out_lab


def augment(image, labels, policy, rng):
    flip = bool(rng.random() < policy.flip_prob)
    angle = float(rng.uniform(*policy.rotation))
    scale = float(rng.uniform(*policy.scale))
    return apply_transform(image, labels, flip, angle, scale, policy)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    miou: float

    def line(self):
        return f"{self.epoch}\t{self.lr:.6g}\t{self.loss:.6f}\t{self.miou:.4f}"


@dataclass
class TrainResult:
    log: list
    state: AdamState

    def lines(self):
        return [r.line() for r in self.log]


def evaluate(g, samples, batch_size=8, ignore_index=IGNORE_INDEX):
    cm = ConfusionMatrix(g.cfg.num_classes, ignore_index=ignore_index)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([img for img, _ in chunk])
        y = np.stack([lab for _, lab in chunk])
        cm.update(predict(g, x), y)
    return cm


def train_step(g, params, state, x, y, lr, ignore_index=IGNORE_INDEX):
    with GradTape() as tape:
        logits = forward(g, x, mode="train")
        loss = cross_entropy_loss(ops.bilinear_upsample_x2(logits), y, ignore_index)
    value = float(loss.item())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {state.step + 1}")
    backward(tape, loss, params.values())
    adam_step(state, params, lr=lr)
    return value


def train(
    g,
    dataset,
    epochs,
    schedule=None,
    policy=None,
    seed=0,
    batch_size=8,
    val_set=None,
    weight_decay=0.0001,
    ignore_index=IGNORE_INDEX,
    on_epoch=None,
):
    """Train ``g`` in place; returns the per-epoch log.

    ``policy=None`` disables augmentation. Validation mIoU is measured on
    ``val_set`` (the training set when omitted).
    """
    if not dataset:
        raise DataError("training set is empty")
    schedule = schedule or PolySchedule(max_epoch=max(epochs, 1))
    rng = np.random.default_rng(seed)
    params = OrderedDict(g.parameters())
    state = AdamState(weight_decay=weight_decay)
    g.input_mean = channel_means(dataset)
    log = []
    for epoch in range(epochs):
        lr = poly_lr(schedule, epoch)
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start : start + batch_size]]
            if policy is not None:
                batch = [augment(img, lab, policy, rng) for img, lab in batch]
            x = np.stack([img for img, _ in batch]).astype(np.float32)
            y = np.stack([lab for _, lab in batch])
            try:
                losses.append(train_step(g, params, state, x, y, lr, ignore_index))
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {start // batch_size}: {exc}") from None
        _, score, _ = miou(evaluate(g, val_set if val_set is not None else dataset, batch_size, ignore_index))
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), score)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(log, state)
