"""Central finite-difference checks for every primitive and both composites."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import FpeConfig, MeuConfig, fpe_forward, init_fpe, init_meu, meu_forward
from .ops import BatchNormState, ConvSpec
from .tensor import GradTape, Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-5
KINK = 1e-3
# smallest |pre-activation| tolerated inside composites; >> STEP times layer gain
COMPOSITE_KINK = 1e-4


@dataclass
class CheckResult:
    op: str
    shapes: tuple
    max_rel_error: float
    worst: tuple  # (input index, flat element index)

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_kink(a, rng, margin=KINK):
    """Resample entries closer than ``margin`` to zero."""
    a = np.array(a, dtype=np.float64)
    bad = np.abs(a) < margin
    while bad.any():
        a[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(a) < margin
    return a


def relative_error(analytic, numeric, floor=1e-3):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps exactly-zero gradients (e.g. ignored pixels) from
    turning round-off into huge relative errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check(name, fn, arrays, rng, step=STEP):
    """Compare tape gradients of ``sum(fn(*inputs) * r)`` with central differences."""
    leaves = [_leaf(a) for a in arrays]
    with GradTape() as tape:
        out = fn(*leaves)
    r = rng.normal(size=out.shape)

    def objective(values):
        return float((fn(*[Tensor(v) for v in values]).data * r).sum())

    with tape:
        loss = ops.weighted_total(out, r)
    backward(tape, loss, leaves)

    worst_err, worst = 0.0, (0, 0)
    values = [leaf.data.copy() for leaf in leaves]
    for k, leaf in enumerate(leaves):
        flat = values[k].reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective(values)
            flat[i] = orig - step
            down = objective(values)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        err = relative_error(leaf.grad.reshape(-1), numeric)
        i = int(np.argmax(err))
        if err[i] > worst_err:
            worst_err, worst = float(err[i]), (k, i)
    return CheckResult(name, tuple(a.shape for a in arrays), worst_err, worst)


def _conv_case(spec, shape, bias=False):
    def make(rng):
        x = rng.normal(size=shape)
        w = rng.normal(size=spec.weight_shape)
        arrays = [x, w] + ([rng.normal(size=spec.out_channels)] if bias else [])
        return (lambda x, w, *b: ops.conv2d(x, w, b[0] if b else None, spec)), arrays

    return make


def _bn_case(mode):
    def make(rng):
        s = BatchNormState(3, dtype=np.float64)
        s.running_mean = rng.normal(size=3)
        s.running_var = rng.uniform(0.5, 2.0, size=3)

        def fn(x, gamma, beta):
            s.gamma, s.beta = gamma, beta
            return ops.batch_norm(x, s, mode)

        return fn, [rng.normal(size=(2, 3, 3, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]

    return make


def _fpe_case(cfg, shape):
    def make(rng):
        params = init_fpe(cfg, rng, dtype=np.float64)
        x = rng.normal(size=shape)
        return (lambda x: fpe_forward(x, params, cfg, "train")), [x]

    return make


def _meu_case(cfg, high_shape, low_shape):
    def make(rng):
        params = init_meu(cfg, rng, dtype=np.float64)
        if params.sa is not None:
            params.sa.bias.data = np.array([0.5])
        if params.ca is not None:
            params.ca.bias.data = np.full(cfg.out_channels, 0.5)
        return (lambda h, l: meu_forward(h, l, params, cfg, "train")), [
            rng.normal(size=high_shape),
            rng.normal(size=low_shape),
        ]

    return make


def _ce_case(rng):
    from .train import cross_entropy_loss

    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return (lambda z: cross_entropy_loss(z, labels)), [rng.normal(size=(2, 4, 3, 3))]


CASES = {
    "conv2d": _conv_case(ConvSpec(3, 4, kernel=3, padding=1), (2, 3, 5, 5), bias=True),
    "conv2d_strided": _conv_case(ConvSpec(3, 4, kernel=3, stride=2, padding=1), (1, 3, 7, 6)),
    "conv2d_dilated": _conv_case(ConvSpec(2, 3, kernel=3, dilation=2, padding=2), (1, 2, 6, 6)),
    "conv2d_depthwise": _conv_case(ConvSpec(4, 4, kernel=3, dilation=3, padding=3, groups=4), (2, 4, 8, 9)),
    "conv2d_depthwise_strided": _conv_case(ConvSpec(4, 4, kernel=3, stride=2, dilation=2, padding=2, groups=4), (1, 4, 9, 9)),
    "conv2d_grouped": _conv_case(ConvSpec(4, 6, kernel=3, padding=1, groups=2), (1, 4, 5, 5)),
    "conv2d_pointwise": _conv_case(ConvSpec(5, 3, kernel=1, has_bias=True), (2, 5, 4, 4), bias=True),
    "batch_norm_train": _bn_case("train"),
    "batch_norm_infer": _bn_case("infer"),
    "relu": lambda rng: (ops.relu, [away_from_kink(rng.normal(size=(1, 8, 9, 9)), rng)]),
    "add": lambda rng: (ops.add, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))]),
    "mul_broadcast_channel": lambda rng: (ops.mul_broadcast, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))]),
    "mul_broadcast_spatial": lambda rng: (ops.mul_broadcast, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 1, 4, 4))]),
    "concat_channels": lambda rng: (lambda a, b: ops.concat_channels([a, b]), [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))]),
    "split_channels": lambda rng: (
        lambda x: ops.concat_channels(ops.split_channels(x, 4)[::-1]),
        [rng.normal(size=(1, 8, 3, 3))],
    ),
    "global_avg_pool": lambda rng: (ops.global_avg_pool, [rng.normal(size=(2, 3, 4, 5))]),
    "channel_mean": lambda rng: (ops.channel_mean, [rng.normal(size=(2, 3, 4, 5))]),
    "bilinear_upsample_x2": lambda rng: (ops.bilinear_upsample_x2, [rng.normal(size=(1, 2, 3, 4))]),
    "cross_entropy": _ce_case,
    "fpe": _fpe_case(FpeConfig(4, 4, expansion=4, branches=4), (1, 4, 7, 7)),
    "fpe_stride2": _fpe_case(FpeConfig(4, 8, expansion=2, branches=2, stride=2), (1, 4, 8, 8)),
    "meu": _meu_case(MeuConfig(4, 3, 4), (2, 4, 3, 3), (2, 3, 6, 6)),
}

# group name -> case names, for --op selection
GROUPS = {}
for _name in CASES:
    _base = _name
    for _prefix in ("conv2d", "batch_norm", "mul_broadcast", "fpe"):
        if _name.startswith(_prefix):
            _base = _prefix
    GROUPS.setdefault(_base, []).append(_name)


def kink_distance(fn, arrays):
    """Smallest |pre-activation| over every ReLU evaluated by ``fn``."""
    with GradTape() as tape:
        fn(*[_leaf(a) for a in arrays])
    dists = [np.abs(inputs[0].data).min() for op, _, inputs, _ in tape.records if op == "relu"]
    return min(dists, default=np.inf)


def draw_case(case, rng, attempts=50):
    """Draw inputs whose internal ReLUs all sit at least ``COMPOSITE_KINK`` from zero."""
    for _ in range(attempts):
        fn, arrays = case(rng)
        if kink_distance(fn, arrays) >= COMPOSITE_KINK:
            return fn, arrays
    raise RuntimeError(f"no kink-free draw in {attempts} attempts")


def run(names=None, seed=0, cases=None):
    cases = cases or CASES
    if names is None:
        names = list(cases)
    results = []
    for name in names:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        fn, arrays = draw_case(cases[name], rng)
        results.append(check(name, fn, arrays, rng))
    return results


def resolve(op):
    if op in CASES:
        return [op]
    if op in GROUPS:
        return GROUPS[op]
    raise KeyError(op)
