"""Network building blocks.

A DWR (dilation-wise residual) block extracts multi-scale context in two
steps: a 3x3 conv + BN + ReLU produces widened "region" features, which
are split into groups and filtered by depthwise 3x3 convolutions with one
dilation rate per group, then concatenated, normalized, merged back down
by a pointwise conv and added to the block input.  An SIR (simple inverted
residual) block keeps only the expand conv + BN + ReLU + pointwise
projection for the low stage.  The probe block is the receptive-field
demand variant: every dilation branch consumes the entire region output so
the pointwise merge weights reveal how much each receptive field is used.

Every block is a stateless function of (params, input); each one is the
literal composition of engine ops, declared alongside its parameter list
so construction, counting, and execution all share one definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ConvSpec, ShapeError, Tape, Var
from .params import ParamVars


@dataclass(frozen=True)
class NonlinearitySwitches:
    """Ablation toggles for the DWR/probe pipeline; defaults are the baseline."""

    rr_relu: bool = True            # off = "sitch 1"
    rr_bn: bool = True              # off = "sitch 2"
    sr_bn: bool = True              # off = "sitch 3"
    sr_relu_after_bn: bool = False  # on = "sitch 4"
    bn_after_pointwise: bool = False  # on = "sitch 5"


DEFAULT_DILATIONS = {2: (1, 3), 3: (1, 3, 5)}
DEFAULT_BRANCH_RATIO = {2: (2, 1), 3: (2, 1, 1)}


def _split_by_ratio(total: int, ratio: tuple[int, ...]) -> tuple[int, ...]:
    denom = sum(ratio)
    if total % denom:
        raise ShapeError(f"width {total} not divisible into ratio {ratio}")
    unit = total // denom
    return tuple(unit * r for r in ratio)


@dataclass(frozen=True)
class DWRConfig:
    channels: int
    in_channels: int
    branch_count: int = 3
    dilations: tuple[int, ...] = ()
    branch_ratio: tuple[int, ...] = ()
    rr_expansion: float = 1.5
    stride: int = 1
    switches: NonlinearitySwitches = field(default_factory=NonlinearitySwitches)

    def __post_init__(self):
        if self.branch_count not in (2, 3):
            raise ShapeError(f"branch_count must be 2 or 3, got {self.branch_count}")
        if not self.dilations:
            object.__setattr__(self, "dilations", DEFAULT_DILATIONS[self.branch_count])
        if not self.branch_ratio:
            object.__setattr__(self, "branch_ratio", DEFAULT_BRANCH_RATIO[self.branch_count])
        if len(self.dilations) != self.branch_count or len(self.branch_ratio) != self.branch_count:
            raise ShapeError("dilations/branch_ratio length must equal branch_count")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.channels:
            raise ShapeError("in_channels may differ from channels only when stride == 2")
        rw = self.rr_expansion * self.channels
        if abs(rw - round(rw)) > 1e-9:
            raise ShapeError(f"rr_expansion {self.rr_expansion} * {self.channels} is not integral")
        _split_by_ratio(int(round(rw)), self.branch_ratio)

    @property
    def rr_width(self) -> int:
        return int(round(self.rr_expansion * self.channels))

    @property
    def group_widths(self) -> tuple[int, ...]:
        return _split_by_ratio(self.rr_width, self.branch_ratio)


@dataclass(frozen=True)
class SIRConfig:
    channels: int
    in_channels: int
    expansion: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.expansion < 1:
            raise ShapeError(f"expansion must be >= 1, got {self.expansion}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.channels:
            raise ShapeError("in_channels may differ from channels only when stride == 2")

    @property
    def hidden_width(self) -> int:
        return self.expansion * self.channels


@dataclass(frozen=True)
class ProbeConfig:
    """DWR variant where every dilation branch sees the full region output."""

    channels: int
    in_channels: int
    branch_count: int = 3
    dilations: tuple[int, ...] = ()
    rr_expansion: float = 1.5
    stride: int = 1
    switches: NonlinearitySwitches = field(default_factory=NonlinearitySwitches)

    def __post_init__(self):
        if not self.dilations:
            object.__setattr__(self, "dilations", DEFAULT_DILATIONS.get(self.branch_count, (1, 3, 5)))
        if len(self.dilations) != self.branch_count:
            raise ShapeError("dilations length must equal branch_count")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.channels:
            raise ShapeError("in_channels may differ from channels only when stride == 2")
        rw = self.rr_expansion * self.channels
        if abs(rw - round(rw)) > 1e-9:
            raise ShapeError(f"rr_expansion {self.rr_expansion} * {self.channels} is not integral")

    @property
    def rr_width(self) -> int:
        return int(round(self.rr_expansion * self.channels))

    @property
    def concat_width(self) -> int:
        return self.branch_count * self.rr_width

    def branch_slices(self) -> list[tuple[int, int]]:
        """Input-axis partition of the merge weight, one slice per branch."""
        w = self.rr_width
        return [(i * w, (i + 1) * w) for i in range(self.branch_count)]


# ---------------------------------------------------------------------------
# Parameter declarations (single source for build / count / forward)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvDecl:
    name: str
    spec: ConvSpec


@dataclass(frozen=True)
class BnDecl:
    name: str
    channels: int


def dwr_decls(prefix: str, cfg: DWRConfig) -> list:
    sw = cfg.switches
    decls: list = [ConvDecl(f"{prefix}.rr.conv",
                            ConvSpec(cfg.in_channels, cfg.rr_width, 3,
                                     stride=cfg.stride, padding=1))]
    if sw.rr_bn:
        decls.append(BnDecl(f"{prefix}.rr.bn", cfg.rr_width))
    for i, (g, d) in enumerate(zip(cfg.group_widths, cfg.dilations)):
        decls.append(ConvDecl(f"{prefix}.sr.b{i}",
                              ConvSpec(g, g, 3, padding=d, dilation=d, groups=g)))
    if sw.sr_bn:
        decls.append(BnDecl(f"{prefix}.sr.bn", cfg.rr_width))
    decls.append(ConvDecl(f"{prefix}.merge",
                          ConvSpec(cfg.rr_width, cfg.channels, 1, has_bias=True)))
    if sw.bn_after_pointwise:
        decls.append(BnDecl(f"{prefix}.merge.bn", cfg.channels))
    return decls


def sir_decls(prefix: str, cfg: SIRConfig) -> list:
    return [
        ConvDecl(f"{prefix}.rr.conv",
                 ConvSpec(cfg.in_channels, cfg.hidden_width, 3,
                          stride=cfg.stride, padding=1)),
        BnDecl(f"{prefix}.rr.bn", cfg.hidden_width),
        ConvDecl(f"{prefix}.proj",
                 ConvSpec(cfg.hidden_width, cfg.channels, 1, has_bias=True)),
    ]


def probe_decls(prefix: str, cfg: ProbeConfig) -> list:
    sw = cfg.switches
    w = cfg.rr_width
    decls: list = [ConvDecl(f"{prefix}.rr.conv",
                            ConvSpec(cfg.in_channels, w, 3, stride=cfg.stride, padding=1))]
    if sw.rr_bn:
        decls.append(BnDecl(f"{prefix}.rr.bn", w))
    for i, d in enumerate(cfg.dilations):
        decls.append(ConvDecl(f"{prefix}.sr.b{i}",
                              ConvSpec(w, w, 3, padding=d, dilation=d, groups=w)))
    if sw.sr_bn:
        decls.append(BnDecl(f"{prefix}.sr.bn", cfg.concat_width))
    decls.append(ConvDecl(f"{prefix}.merge",
                          ConvSpec(cfg.concat_width, cfg.channels, 1, has_bias=True)))
    if sw.bn_after_pointwise:
        decls.append(BnDecl(f"{prefix}.merge.bn", cfg.channels))
    return decls


def stem_decls(prefix: str, stem_channels: int) -> list:
    s = stem_channels
    if s % 4:
        raise ShapeError(f"stem channels must be divisible by 4, got {s}")
    return [
        ConvDecl(f"{prefix}.conv1", ConvSpec(3, s // 2, 3, stride=2, padding=1)),
        BnDecl(f"{prefix}.conv1.bn", s // 2),
        ConvDecl(f"{prefix}.a1", ConvSpec(s // 2, s // 4, 1)),
        BnDecl(f"{prefix}.a1.bn", s // 4),
        ConvDecl(f"{prefix}.a2", ConvSpec(s // 4, s // 2, 3, stride=2, padding=1)),
        BnDecl(f"{prefix}.a2.bn", s // 2),
        ConvDecl(f"{prefix}.fuse", ConvSpec(s, s, 3, padding=1)),
        BnDecl(f"{prefix}.fuse.bn", s),
    ]


def seghead_decls(prefix: str, in_channels: int, head_width: int, num_classes: int) -> list:
    return [
        ConvDecl(f"{prefix}.conv", ConvSpec(in_channels, head_width, 3, padding=1)),
        BnDecl(f"{prefix}.conv.bn", head_width),
        ConvDecl(f"{prefix}.pred", ConvSpec(head_width, num_classes, 1, has_bias=True)),
    ]


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _conv(tape: Tape, pv: ParamVars, name: str, x: Var, spec: ConvSpec) -> Var:
    bias = pv(f"{name}.bias") if spec.has_bias else None
    return tape.conv2d(x, pv(f"{name}.weight"), bias, spec)


def _bn(tape: Tape, pv: ParamVars, name: str, x: Var, mode: str) -> Var:
    gamma, beta, state = pv.bn(name)
    return tape.batchnorm(x, gamma, beta, state, mode)


def dwr_forward(tape: Tape, pv: ParamVars, prefix: str, x: Var, cfg: DWRConfig,
                mode: str, capture: dict | None = None) -> Var:
    sw = cfg.switches
    if x.data.shape[1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: input has {x.data.shape[1]} channels, "
                         f"config wants {cfg.in_channels}")
    t = _conv(tape, pv, f"{prefix}.rr.conv",
              x, ConvSpec(cfg.in_channels, cfg.rr_width, 3, stride=cfg.stride, padding=1))
    if sw.rr_bn:
        t = _bn(tape, pv, f"{prefix}.rr.bn", t, mode)
    if sw.rr_relu:
        t = tape.relu(t)
    if capture is not None:
        capture[f"{prefix}.rr"] = t.data
    groups = tape.split(t, list(cfg.group_widths))
    branches = []
    for i, (g, gw, d) in enumerate(zip(groups, cfg.group_widths, cfg.dilations)):
        branches.append(_conv(tape, pv, f"{prefix}.sr.b{i}", g,
                              ConvSpec(gw, gw, 3, padding=d, dilation=d, groups=gw)))
    t = tape.concat(branches)
    if sw.sr_bn:
        t = _bn(tape, pv, f"{prefix}.sr.bn", t, mode)
    if sw.sr_relu_after_bn:
        t = tape.relu(t)
    if capture is not None:
        capture[f"{prefix}.sr"] = t.data
    t = _conv(tape, pv, f"{prefix}.merge",
              t, ConvSpec(cfg.rr_width, cfg.channels, 1, has_bias=True))
    if sw.bn_after_pointwise:
        t = _bn(tape, pv, f"{prefix}.merge.bn", t, mode)
    if cfg.stride == 1 and cfg.in_channels == cfg.channels:
        t = tape.add(x, t)
    return t


def sir_forward(tape: Tape, pv: ParamVars, prefix: str, x: Var, cfg: SIRConfig,
                mode: str, capture: dict | None = None) -> Var:
    if x.data.shape[1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: input has {x.data.shape[1]} channels, "
                         f"config wants {cfg.in_channels}")
    t = _conv(tape, pv, f"{prefix}.rr.conv",
              x, ConvSpec(cfg.in_channels, cfg.hidden_width, 3, stride=cfg.stride, padding=1))
    t = _bn(tape, pv, f"{prefix}.rr.bn", t, mode)
    t = tape.relu(t)
    if capture is not None:
        capture[f"{prefix}.rr"] = t.data
    t = _conv(tape, pv, f"{prefix}.proj",
              t, ConvSpec(cfg.hidden_width, cfg.channels, 1, has_bias=True))
    if cfg.stride == 1 and cfg.in_channels == cfg.channels:
        t = tape.add(x, t)
    return t


def probe_forward(tape: Tape, pv: ParamVars, prefix: str, x: Var, cfg: ProbeConfig,
                  mode: str, capture: dict | None = None) -> Var:
    sw = cfg.switches
    w = cfg.rr_width
    t = _conv(tape, pv, f"{prefix}.rr.conv",
              x, ConvSpec(cfg.in_channels, w, 3, stride=cfg.stride, padding=1))
    if sw.rr_bn:
        t = _bn(tape, pv, f"{prefix}.rr.bn", t, mode)
    if sw.rr_relu:
        t = tape.relu(t)
    if capture is not None:
        capture[f"{prefix}.rr"] = t.data
    branches = []
    for i, d in enumerate(cfg.dilations):
        branches.append(_conv(tape, pv, f"{prefix}.sr.b{i}", t,
                              ConvSpec(w, w, 3, padding=d, dilation=d, groups=w)))
    t = tape.concat(branches)
    if sw.sr_bn:
        t = _bn(tape, pv, f"{prefix}.sr.bn", t, mode)
    if sw.sr_relu_after_bn:
        t = tape.relu(t)
    if capture is not None:
        capture[f"{prefix}.sr"] = t.data
    t = _conv(tape, pv, f"{prefix}.merge",
              t, ConvSpec(cfg.concat_width, cfg.channels, 1, has_bias=True))
    if sw.bn_after_pointwise:
        t = _bn(tape, pv, f"{prefix}.merge.bn", t, mode)
    if cfg.stride == 1 and cfg.in_channels == cfg.channels:
        t = tape.add(x, t)
    return t


def stem_forward(tape: Tape, pv: ParamVars, prefix: str, x: Var, stem_channels: int,
                 mode: str) -> Var:
    """Initial 4x downsampling: strided conv, then a conv path and a pool path."""
    s = stem_channels
    n, c, h, w = x.data.shape
    if c != 3:
        raise ShapeError(f"stem expects 3 input channels, got {c}")
    if h % 4 or w % 4:
        raise ShapeError(f"stem input size {h}x{w} must be divisible by 4")
    t = _conv(tape, pv, f"{prefix}.conv1", x, ConvSpec(3, s // 2, 3, stride=2, padding=1))
    t = _bn(tape, pv, f"{prefix}.conv1.bn", t, mode)  # deliberately no activation
    a = _conv(tape, pv, f"{prefix}.a1", t, ConvSpec(s // 2, s // 4, 1))
    a = tape.relu(_bn(tape, pv, f"{prefix}.a1.bn", a, mode))
    a = _conv(tape, pv, f"{prefix}.a2", a, ConvSpec(s // 4, s // 2, 3, stride=2, padding=1))
    a = tape.relu(_bn(tape, pv, f"{prefix}.a2.bn", a, mode))
    b = tape.maxpool(t, 3, 2, 1)
    t = tape.concat([a, b])
    t = _conv(tape, pv, f"{prefix}.fuse", t, ConvSpec(s, s, 3, padding=1))
    return tape.relu(_bn(tape, pv, f"{prefix}.fuse.bn", t, mode))


def seghead_forward(tape: Tape, pv: ParamVars, prefix: str, x: Var, in_channels: int,
                    head_width: int, num_classes: int, out_h: int, out_w: int,
                    mode: str) -> Var:
    t = _conv(tape, pv, f"{prefix}.conv", x, ConvSpec(in_channels, head_width, 3, padding=1))
    t = tape.relu(_bn(tape, pv, f"{prefix}.conv.bn", t, mode))
    t = _conv(tape, pv, f"{prefix}.pred", t, ConvSpec(head_width, num_classes, 1, has_bias=True))
    return tape.upsample(t, out_h, out_w)


# ---------------------------------------------------------------------------
# Analytic MAC counts (convolutions only, BN/ReLU/pool/upsample excluded)
# ---------------------------------------------------------------------------

def conv_macs(spec: ConvSpec, in_h: int, in_w: int) -> int:
    oh, ow = spec.out_hw(in_h, in_w)
    return oh * ow * spec.out_channels * spec.kernel * spec.kernel * \
        (spec.in_channels // spec.groups)


def _seq_macs(decls, in_h, in_w):
    """MACs for blocks where the first conv sets the resolution for the rest."""
    items = []
    h, w = in_h, in_w
    first = True
    for d in decls:
        if isinstance(d, ConvDecl):
            items.append((d.name, conv_macs(d.spec, h, w)))
            if first:
                h, w = d.spec.out_hw(h, w)
                first = False
    return items, (h, w)


def dwr_macs(prefix: str, cfg: DWRConfig, in_h: int, in_w: int):
    return _seq_macs(dwr_decls(prefix, cfg), in_h, in_w)


def sir_macs(prefix: str, cfg: SIRConfig, in_h: int, in_w: int):
    return _seq_macs(sir_decls(prefix, cfg), in_h, in_w)


def probe_macs(prefix: str, cfg: ProbeConfig, in_h: int, in_w: int):
    return _seq_macs(probe_decls(prefix, cfg), in_h, in_w)


def stem_macs(prefix: str, stem_channels: int, in_h: int, in_w: int):
    s = stem_channels
    h2, w2 = in_h // 2, in_w // 2
    h4, w4 = in_h // 4, in_w // 4
    items = [
        (f"{prefix}.conv1", conv_macs(ConvSpec(3, s // 2, 3, stride=2, padding=1), in_h, in_w)),
        (f"{prefix}.a1", conv_macs(ConvSpec(s // 2, s // 4, 1), h2, w2)),
        (f"{prefix}.a2", conv_macs(ConvSpec(s // 4, s // 2, 3, stride=2, padding=1), h2, w2)),
        (f"{prefix}.fuse", conv_macs(ConvSpec(s, s, 3, padding=1), h4, w4)),
    ]
    return items, (h4, w4)


def seghead_macs(prefix: str, in_channels: int, head_width: int, num_classes: int,
                 in_h: int, in_w: int):
    items = [
        (f"{prefix}.conv", conv_macs(ConvSpec(in_channels, head_width, 3, padding=1), in_h, in_w)),
        (f"{prefix}.pred", conv_macs(ConvSpec(head_width, num_classes, 1), in_h, in_w)),
    ]
    return items, (in_h, in_w)
