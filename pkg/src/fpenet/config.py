"""Model configuration record and its key=value text format.

Example::

    # final configuration
    p=3
    q=9
    classes=19
    input=1024x512
    dilations=1,2,4,8
    decoder=meu

``input`` is ``HxW``.  Flags (``add``, ``longskip``, ``ca``, ``sa``) take
``on``/``off``.  ``skip`` selects how the long skip merges the first and
last block outputs of a stage: ``concat`` (default) or ``add``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .blocks import FpeConfig, MeuConfig, default_dilations
from .errors import ConfigError

DOWNSAMPLE = 8


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 19
    p: int = 3
    q: int = 9
    branches: int = 4
    dilations: tuple = None
    stage_channels: tuple = (16, 32, 64)
    inter_branch_add: bool = True
    long_skip: bool = True
    skip_combine: str = "concat"
    meu_channel_attention: bool = True
    meu_spatial_attention: bool = True
    decoder: str = "meu"
    input_size: tuple = (1024, 512)
    expansion: int = field(default=4, repr=False)

    def __post_init__(self):
        if self.dilations is None:
            object.__setattr__(self, "dilations", default_dilations(self.branches))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError(f"classes must be positive, got {self.num_classes}")
        if self.p < 1 or self.q < 1:
            raise ConfigError(f"p and q must be >= 1, got p={self.p} q={self.q}")
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ConfigError(f"channels must be three positive integers, got {self.stage_channels}")
        h, w = self.input_size
        if h < 1 or w < 1 or h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ConfigError(
                f"input {h}x{w} violates rule: height and width must be divisible by {DOWNSAMPLE} "
                "(total downsampling rate)"
            )
        if self.decoder not in ("meu", "bilinear"):
            raise ConfigError(f"decoder must be 'meu' or 'bilinear', got {self.decoder!r}")
        if self.skip_combine not in ("concat", "add"):
            raise ConfigError(f"skip must be 'concat' or 'add', got {self.skip_combine!r}")
        # builds every block config once so divisibility errors surface here
        self.stage_blocks()

    @property
    def height(self):
        return self.input_size[0]

    @property
    def width(self):
        return self.input_size[1]

    def skip_channels(self, stage_index):
        c = self.stage_channels[stage_index]
        return 2 * c if (self.long_skip and self.skip_combine == "concat") else c

    def stage_blocks(self):
        """FPE configs per stage: ``[[stage1], [stage2...], [stage3...]]``."""
        c1, c2, c3 = self.stage_channels
        stage1 = [FpeConfig(c1, c1, expansion=1, branches=1, dilations=(1,), stride=1, inter_branch_add=False)]
        stages = [stage1]
        for idx, (count, c_out) in enumerate(((self.p, c2), (self.q, c3))):
            c_in = self.skip_channels(idx)
            blocks = []
            for j in range(count):
                blocks.append(
                    FpeConfig(
                        c_in if j == 0 else c_out,
                        c_out,
                        expansion=self.expansion,
                        branches=self.branches,
                        dilations=self.dilations,
                        stride=2 if j == 0 else 1,
                        inter_branch_add=self.inter_branch_add,
                    )
                )
            stages.append(blocks)
        return stages

    def meu_configs(self):
        c1, c2, c3 = self.stage_channels
        ca, sa = self.meu_channel_attention, self.meu_spatial_attention
        return (
            MeuConfig(c3, c2, c3, ca, sa),
            MeuConfig(c3, c1, c2, ca, sa),
        )

    def with_input(self, h, w):
        return replace(self, input_size=(h, w))


_FLAG_WORDS = {"on": True, "off": False}


def _flag(value, lineno, key):
    try:
        return _FLAG_WORDS[value.lower()]
    except KeyError:
        raise ConfigError(f"line {lineno}: {key} must be 'on' or 'off', got {value!r}") from None


def _int(value, lineno, key):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} must be an integer, got {value!r}") from None


def _int_list(value, lineno, key):
    return tuple(_int(v.strip(), lineno, key) for v in value.split(","))


def parse_size(text, lineno=None):
    where = f"line {lineno}: " if lineno else ""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"{where}size must look like HxW, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"{where}size must look like HxW, got {text!r}") from None


def parse_config(text):
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: syntax error, expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not value:
            raise ConfigError(f"line {lineno}: syntax error, empty value for {key!r}")
        if key in ("p", "q", "branches"):
            kw[key] = _int(value, lineno, key)
        elif key == "classes":
            kw["num_classes"] = _int(value, lineno, key)
        elif key == "dilations":
            kw["dilations"] = _int_list(value, lineno, key)
        elif key == "channels":
            kw["stage_channels"] = _int_list(value, lineno, key)
        elif key == "input":
            kw["input_size"] = parse_size(value, lineno)
        elif key == "add":
            kw["inter_branch_add"] = _flag(value, lineno, key)
        elif key == "longskip":
            kw["long_skip"] = _flag(value, lineno, key)
        elif key == "ca":
            kw["meu_channel_attention"] = _flag(value, lineno, key)
        elif key == "sa":
            kw["meu_spatial_attention"] = _flag(value, lineno, key)
        elif key == "decoder":
            kw["decoder"] = value.lower()
        elif key == "skip":
            kw["skip_combine"] = value.lower()
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if "dilations" in kw and "branches" not in kw:
        kw["branches"] = len(kw["dilations"])
    return ModelConfig(**kw)


def format_config(cfg):
    onoff = lambda b: "on" if b else "off"  # noqa: E731
    lines = [
        f"p={cfg.p}",
        f"q={cfg.q}",
        f"classes={cfg.num_classes}",
        f"branches={cfg.branches}",
        "dilations=" + ",".join(map(str, cfg.dilations)),
        "channels=" + ",".join(map(str, cfg.stage_channels)),
        f"input={cfg.height}x{cfg.width}",
        f"add={onoff(cfg.inter_branch_add)}",
        f"longskip={onoff(cfg.long_skip)}",
        f"skip={cfg.skip_combine}",
        f"ca={onoff(cfg.meu_channel_attention)}",
        f"sa={onoff(cfg.meu_spatial_attention)}",
        f"decoder={cfg.decoder}",
    ]
    return "\n".join(lines) + "\n"
