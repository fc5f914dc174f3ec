"""Static cost model: parameters, multiply-accumulates, receptive fields, shapes.

Works from a :class:`ModelConfig` alone; nothing is built or executed.
Convolution cost is counted in multiply-accumulates (MACs).  BN, ReLU,
additions, products, pooling and upsampling are counted as one operation
per output element and kept in a separate ``elementwise`` column.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .ops import ConvSpec

CONVENTION = (
    "macs = multiply-accumulates of convolutions (FLOPs ~ 2*macs); "
    "elementwise = BN/ReLU/add/mul/pool/upsample, one op per output element"
)


@dataclass
class LayerCost:
    name: str
    shape: tuple  # (c, h, w)
    params: int = 0
    macs: int = 0
    elementwise: int = 0
    rf: Fraction = Fraction(1)
    jump: Fraction = Fraction(1)
    spatial: bool = True  # False for convs applied to globally pooled vectors


@dataclass
class CostReport:
    rows: list
    input_size: tuple
    convention: str = CONVENTION
    totals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.totals = {
            "params": sum(r.params for r in self.rows),
            "macs": sum(r.macs for r in self.rows),
            "elementwise": sum(r.elementwise for r in self.rows),
        }

    @property
    def params(self):
        return self.totals["params"]

    @property
    def macs(self):
        return self.totals["macs"]

    @property
    def spatial_macs(self):
        return sum(r.macs for r in self.rows if r.spatial)

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


class _Walker:
    def __init__(self):
        self.rows = []

    def emit(self, row):
        self.rows.append(row)
        return row

    def conv(self, name, spec, src, bn=False, act=False, spatial=True):
        c, h, w = src.shape
        assert c == spec.in_channels, (name, c, spec.in_channels)
        oh, ow = spec.output_hw(h, w)
        kh, kw = spec.kernel
        cin_g = spec.in_channels // spec.groups
        n_out = spec.out_channels * oh * ow
        params = cin_g * spec.out_channels * kh * kw + (spec.out_channels if spec.has_bias else 0)
        params += 2 * spec.out_channels if bn else 0
        macs = n_out * cin_g * kh * kw
        elementwise = n_out * (int(spec.has_bias) + int(bn) + int(act))
        eff = spec.dilation * (max(kh, kw) - 1) + 1
        rf = src.rf + (eff - 1) * src.jump
        return self.emit(
            LayerCost(name, (spec.out_channels, oh, ow), params, macs, elementwise, rf, src.jump * spec.stride, spatial)
        )

    def elementwise(self, name, shape, ops_per_element, rf, jump, spatial=True):
        c, h, w = shape
        return self.emit(LayerCost(name, shape, 0, 0, ops_per_element * c * h * w, rf, jump, spatial))

    def fpe(self, name, cfg, src):
        e = self.conv(f"{name}.expand", cfg.expand_spec(), src, bn=True, act=True)
        width = cfg.branch_width
        sub = LayerCost("", (width,) + e.shape[1:], rf=e.rf, jump=e.jump)
        outs = []
        for i in range(cfg.branches):
            if cfg.cascade and i > 0:
                self.elementwise(f"{name}.cascade{i}", sub.shape, 1, max(sub.rf, outs[-1].rf), sub.jump)
            outs.append(self.conv(f"{name}.branch{i}", cfg.branch_spec(i), sub, bn=True, act=True))
        # receptive field per branch, no cascade path (the analytic block figure)
        merged = LayerCost("", (cfg.expanded,) + outs[0].shape[1:], rf=max(o.rf for o in outs), jump=outs[0].jump)
        out = self.conv(f"{name}.project", cfg.project_spec(), merged, bn=True)
        if cfg.residual:
            out = self.elementwise(f"{name}.residual", out.shape, 1, max(out.rf, src.rf), out.jump)
        return out

    def meu(self, name, cfg, high, low):
        hp = self.conv(f"{name}.high", cfg.high_spec(), high, bn=True)
        lp = self.conv(f"{name}.low", cfg.low_spec(), low, bn=True)
        c, hl, wl = lp.shape
        weighted_low = lp
        if cfg.use_channel_attention:
            pooled = self.elementwise(f"{name}.ca_pool", hp.shape, 1, hp.rf, hp.jump)
            vec = LayerCost("", (c, 1, 1), rf=pooled.rf, jump=pooled.jump)
            ca = self.conv(f"{name}.ca", cfg.ca_spec(), vec, act=True, spatial=False)
            weighted_low = self.elementwise(f"{name}.ca_mul", lp.shape, 1, max(lp.rf, ca.rf), lp.jump)
        up_jump = hp.jump / 2
        up = self.elementwise(f"{name}.upsample", (c, hl, wl), 1, hp.rf + hp.jump, up_jump)
        weighted_high = up
        if cfg.use_spatial_attention:
            squeezed = self.elementwise(f"{name}.sa_mean", (1, hl, wl), c, lp.rf, lp.jump)
            sa = self.conv(f"{name}.sa", cfg.sa_spec(), squeezed, act=True)
            weighted_high = self.elementwise(f"{name}.sa_mul", up.shape, 1, max(up.rf, sa.rf), up.jump)
        return self.elementwise(
            f"{name}.fuse", (c, hl, wl), 1, max(weighted_low.rf, weighted_high.rf), min(weighted_low.jump, weighted_high.jump)
        )

    def combine(self, name, cfg, first, last):
        c, h, w = last.shape
        rf, jump = max(first.rf, last.rf), last.jump
        if cfg.skip_combine == "concat":
            return self.emit(LayerCost(name, (first.shape[0] + c, h, w), rf=rf, jump=jump))
        return self.elementwise(name, last.shape, 1, rf, jump)


def cost_report(cfg, input_size=None):
    h, w = input_size or cfg.input_size
    cfg = cfg.with_input(h, w)
    c1, c2, c3 = cfg.stage_channels
    wk = _Walker()
    src = LayerCost("input", (3, h, w))
    first = wk.conv("stage1.conv", ConvSpec(3, c1, kernel=(3, 3), stride=2, padding=1), src, bn=True, act=True)
    stages = cfg.stage_blocks()
    last = wk.fpe("stage1.block0", stages[0][0], first)
    stage_out = [last]
    feed = wk.combine("stage1.skip", cfg, first, last) if cfg.long_skip else last
    for s, blocks in ((2, stages[1]), (3, stages[2])):
        outs = []
        prev = feed
        for j, b in enumerate(blocks):
            prev = wk.fpe(f"stage{s}.block{j}", b, prev)
            outs.append(prev)
        stage_out.append(outs[-1])
        if s == 2:
            feed = wk.combine("stage2.skip", cfg, outs[0], outs[-1]) if cfg.long_skip else outs[-1]

    if cfg.decoder == "meu":
        m2, m1 = cfg.meu_configs()
        d2 = wk.meu("decoder2", m2, stage_out[2], stage_out[1])
        d1 = wk.meu("decoder1", m1, d2, stage_out[0])
        wk.conv("classifier", ConvSpec(c2, cfg.num_classes, kernel=(1, 1), has_bias=True), d1)
    else:
        cls = wk.conv("classifier", ConvSpec(c3, cfg.num_classes, kernel=(1, 1), has_bias=True), stage_out[2])
        u = wk.elementwise("decoder2", (cls.shape[0], cls.shape[1] * 2, cls.shape[2] * 2), 1, cls.rf + cls.jump, cls.jump / 2)
        wk.elementwise("decoder1", (u.shape[0], u.shape[1] * 2, u.shape[2] * 2), 1, u.rf + u.jump, u.jump / 2)
    return CostReport(wk.rows, (h, w))


def count_params(cfg):
    return cost_report(cfg)


def count_macs(cfg, input_size=None):
    return cost_report(cfg, input_size)


def conv_macs(spec, h, w):
    oh, ow = spec.output_hw(h, w)
    kh, kw = spec.kernel
    return oh * ow * spec.out_channels * (spec.in_channels // spec.groups) * kh * kw


def separable_saving(channels_in, channels_out, kernel=3, size=(8, 8)):
    """Standard-conv MACs divided by depthwise+pointwise MACs (exact)."""
    h, w = size
    pad = kernel // 2
    standard = conv_macs(ConvSpec(channels_in, channels_out, kernel=kernel, padding=pad), h, w)
    depthwise = conv_macs(ConvSpec(channels_in, channels_in, kernel=kernel, padding=pad, groups=channels_in), h, w)
    pointwise = conv_macs(ConvSpec(channels_in, channels_out, kernel=1), h, w)
    return Fraction(standard, depthwise + pointwise)


def receptive_field(layers):
    """Compose ``(kernel, stride, dilation)`` layers from a single pixel.

    Returns ``(rf, jump)`` after the last layer.
    """
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += (d * (k - 1) + 1 - 1) * jump
        jump *= s
    return rf, jump


def receptive_field_table(cfg):
    """``(layer name, cumulative rf, jump)`` per convolution, plus stage summaries."""
    rep = cost_report(cfg)
    table = [(r.name, r.rf, r.jump) for r in rep.rows if r.macs or r.name.endswith("skip")]
    summary = {}
    for r in rep.rows:
        stage = r.name.split(".", 1)[0]
        summary[stage] = max(summary.get(stage, 0), r.rf)
    summary["network"] = rep.rows[-1].rf
    return table, summary


def shape_table(cfg, input_size=None):
    """Rows of ``(name, operator, channels, (h, w))`` in the layout of the architecture table."""
    h, w = input_size or cfg.input_size
    cfg = cfg.with_input(h, w)
    c1, c2, c3 = cfg.stage_channels
    rep = cost_report(cfg)

    def hw(name):
        return rep.row(name).shape[1:]

    if cfg.decoder == "meu":
        dec2 = ("decoder2", "MEU", c3, hw("decoder2.fuse"))
        dec1 = ("decoder1", "MEU", c2, hw("decoder1.fuse"))
        final = ("final", "1x1 Conv", cfg.num_classes, hw("classifier"))
    else:
        dec2 = ("decoder2", "Bilinear x2", cfg.num_classes, hw("decoder2"))
        dec1 = ("decoder1", "Bilinear x2", cfg.num_classes, hw("decoder1"))
        final = ("final", "1x1 Conv", cfg.num_classes, hw("decoder1"))
    return [
        ("stage1", "3x3 Conv + FPE (k=1) x1", c1, hw("stage1.block0.project")),
        ("stage2", f"FPE (k={cfg.expansion}) x{cfg.p}", c2, hw(f"stage2.block{cfg.p - 1}.project")),
        ("stage3", f"FPE (k={cfg.expansion}) x{cfg.q}", c3, hw(f"stage3.block{cfg.q - 1}.project")),
        dec2,
        dec1,
        final,
    ]


def _fmt_rf(v):
    return str(v) if Fraction(v).denominator == 1 else f"{float(v):.1f}"


def format_report(rep, machine=False):
    lines = []
    if machine:
        for r in rep.rows:
            shape = "x".join(map(str, r.shape))
            lines.append(f"{r.name}\t{shape}\t{r.params}\t{r.macs}\t{_fmt_rf(r.rf)}")
        t = rep.totals
        lines.append(f"total\t-\t{t['params']}\t{t['macs']}\t{_fmt_rf(rep.rows[-1].rf)}")
        lines.append(f"total_elementwise\t-\t0\t{t['elementwise']}\t-")
        return "\n".join(lines) + "\n"
    h, w = rep.input_size
    lines.append(f"# input {h}x{w}; {rep.convention}")
    lines.append(f"{'layer':<28} {'output':>14} {'params':>9} {'macs':>13} {'elementwise':>12} {'rf':>6}")
    for r in rep.rows:
        shape = "x".join(map(str, r.shape))
        lines.append(f"{r.name:<28} {shape:>14} {r.params:>9} {r.macs:>13} {r.elementwise:>12} {_fmt_rf(r.rf):>6}")
    t = rep.totals
    lines.append(
        f"TOTAL params={t['params']} ({t['params'] / 1e6:.2f}M) macs={t['macs']} ({t['macs'] / 1e9:.2f}G) "
        f"flops(2*macs)={2 * t['macs'] / 1e9:.2f}G elementwise={t['elementwise'] / 1e9:.2f}G"
    )
    return "\n".join(lines) + "\n"


def format_shape_table(rows):
    out = [f"{'Name':<10} {'Operator':<26} {'Channel':>7} {'Output size':>12}"]
    for name, op, ch, (h, w) in rows:
        out.append(f"{name:<10} {op:<26} {ch:>7} {f'{h}x{w}':>12}")
    return "\n".join(out) + "\n"
