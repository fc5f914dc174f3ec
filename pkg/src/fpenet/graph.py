"""Assembly and execution of the full encoder-decoder network."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import ConvLayer, fpe_forward, init_fpe, init_meu, make_conv, meu_forward
from .errors import DimensionError
from .ops import ConvSpec
from .tensor import Tensor


@dataclass
class Node:
    name: str
    kind: str
    cfg: object
    inputs: tuple
    params: object = None

    def named_layers(self):
        if self.params is None:
            return
        if isinstance(self.params, ConvLayer):
            yield self.name, self.params
        else:
            for sub, layer in self.params.named_layers():
                yield f"{self.name}.{sub}", layer


class LayerGraph:
    """Topologically ordered nodes plus a registry of named parameters."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.nodes = []
        self._by_name = {}
        # per-channel mean subtracted from every input image
        self.input_mean = np.zeros(3, dtype=np.float32)

    def add(self, node):
        if node.name in self._by_name:
            raise ValueError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src != "input" and src not in self._by_name:
                raise ValueError(f"node {node.name!r} consumes {src!r} before it exists")
        self.nodes.append(node)
        self._by_name[node.name] = node
        return node.name

    def node(self, name):
        return self._by_name[name]

    def layers(self):
        for node in self.nodes:
            yield from node.named_layers()

    def parameters(self):
        """Learnable tensors keyed by dotted path, in build order."""
        reg = OrderedDict()
        for prefix, layer in self.layers():
            for name, t in layer.named_parameters(prefix):
                reg[name] = t
        return reg

    def bn_states(self):
        reg = OrderedDict()
        for prefix, layer in self.layers():
            for name, s in layer.named_bn(prefix):
                reg[name] = s
        return reg

    def state_arrays(self):
        """Everything persisted in a weight file: parameters then BN running statistics."""
        out = OrderedDict((k, t.data) for k, t in self.parameters().items())
        for k, s in self.bn_states().items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        out["input.mean"] = self.input_mean
        return out

    def load_state_arrays(self, arrays):
        params = self.parameters()
        states = self.bn_states()
        for k, arr in arrays.items():
            if k == "input.mean":
                self.input_mean = np.array(arr, dtype=np.float32)
            elif k in params:
                params[k].data = np.array(arr, dtype=params[k].dtype)
            else:
                base, stat = k.rsplit(".", 1)
                setattr(states[base], stat, np.array(arr, dtype=np.float32))

    def num_parameters(self):
        return sum(t.size for t in self.parameters().values())


def build(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    g = LayerGraph(cfg)
    c1, c2, c3 = cfg.stage_channels
    stage_blocks = cfg.stage_blocks()

    stem = make_conv(ConvSpec(3, c1, kernel=(3, 3), stride=2, padding=1), rng, True, dtype)
    first = g.add(Node("stage1.conv", "conv_bn_relu", stem.spec, ("input",), stem))
    b = stage_blocks[0][0]
    last = g.add(Node("stage1.block0", "fpe", b, (first,), init_fpe(b, rng, dtype)))
    stage_out = [last]
    feed = _long_skip(g, cfg, "stage1", first, last)

    for s, blocks in ((2, stage_blocks[1]), (3, stage_blocks[2])):
        prev = feed
        names = []
        for j, b in enumerate(blocks):
            prev = g.add(Node(f"stage{s}.block{j}", "fpe", b, (prev,), init_fpe(b, rng, dtype)))
            names.append(prev)
        stage_out.append(names[-1])
        if s == 2:
            feed = _long_skip(g, cfg, "stage2", names[0], names[-1])

    if cfg.decoder == "meu":
        m2, m1 = cfg.meu_configs()
        d2 = g.add(Node("decoder2", "meu", m2, (stage_out[2], stage_out[1]), init_meu(m2, rng, dtype)))
        d1 = g.add(Node("decoder1", "meu", m1, (d2, stage_out[0]), init_meu(m1, rng, dtype)))
        cls = make_conv(ConvSpec(c2, cfg.num_classes, kernel=(1, 1), has_bias=True), rng, False, dtype)
        g.add(Node("classifier", "conv", cls.spec, (d1,), cls))
    else:
        cls = make_conv(ConvSpec(c3, cfg.num_classes, kernel=(1, 1), has_bias=True), rng, False, dtype)
        c = g.add(Node("classifier", "conv", cls.spec, (stage_out[2],), cls))
        u = g.add(Node("decoder2", "upsample", None, (c,)))
        g.add(Node("decoder1", "upsample", None, (u,)))
    return g


def _long_skip(g, cfg, stage, first, last):
    if not cfg.long_skip:
        return last
    kind = "concat" if cfg.skip_combine == "concat" else "add"
    return g.add(Node(f"{stage}.skip", kind, None, (first, last)))


def forward(g, x, mode="infer", taps=None):
    """Run the graph; returns logits at half the input resolution.

    In train mode BN layers use batch statistics and update their running
    estimates; gradients are recorded on whatever :class:`GradTape` is
    active. ``taps``, if given, receives every node output by name.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = g.cfg
    expect = (3, cfg.height, cfg.width)
    if x.data.ndim != 4:
        raise DimensionError(f"input must be rank 4, got {x.shape}", axis="rank")
    for axis, got, want in zip(("channels", "height", "width"), x.shape[1:], expect):
        if got != want:
            raise DimensionError(f"input {axis} is {got}, config expects {want}", axis=axis)

    if np.any(g.input_mean):
        x = Tensor(x.data - g.input_mean.astype(x.dtype)[None, :, None, None])
    values = {"input": x}
    for node in g.nodes:
        args = [values[i] for i in node.inputs]
        if node.kind == "conv_bn_relu":
            y = node.params(args[0], mode, act=True)
        elif node.kind == "fpe":
            y = fpe_forward(args[0], node.params, node.cfg, mode)
        elif node.kind == "meu":
            y = meu_forward(args[0], args[1], node.params, node.cfg, mode)
        elif node.kind == "conv":
            y = node.params(args[0], mode)
        elif node.kind == "add":
            y = ops.add(*args)
        elif node.kind == "concat":
            y = ops.concat_channels(args)
        elif node.kind == "upsample":
            y = ops.bilinear_upsample_x2(args[0])
        else:
            raise ValueError(f"unknown node kind {node.kind!r}")
        values[node.name] = y
    if taps is not None:
        taps.update(values)
    return values[g.nodes[-1].name]


def labels_from_logits(logits):
    """Upsample logits x2 and take the per-pixel argmax (lowest index wins ties)."""
    up = ops.bilinear_upsample_x2(logits if isinstance(logits, Tensor) else Tensor(logits))
    return np.argmax(up.data, axis=1)


def predict(g, x):
    return labels_from_logits(forward(g, x, mode="infer"))
