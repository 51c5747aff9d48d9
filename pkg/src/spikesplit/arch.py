"""Declarative network architectures: shape inference, split points, FLOPs.

Architectures are data, loaded from versioned ``.arch`` config files (YAML).
Two are bundled: a 16-residual-block spiking ResNet50 sized for 32x32 inputs
and a 13-block depthwise-separable spiking MobileNetV1 sized for 224x224
inputs. Split-point candidates sit after each residual / depthwise block,
where the activation is guaranteed to be binary.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import yaml

__all__ = [
    "ConvPlan",
    "TdbnPlan",
    "LifPlan",
    "BlockSpec",
    "ArchitectureSpec",
    "build_arch",
    "parse_arch_file",
    "arch_from_dict",
    "enumerate_split_points",
    "prefix_flops",
    "ARCH_IDS",
]

ARCH_IDS = {"resnet50": 1, "mobilenetv1": 2}

SCHEMA_VERSION = 1


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"convolution output collapses to {out} (input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding})"
        )
    return out


@dataclass(frozen=True)
class ConvPlan:
    """Geometry of one convolution, with its inferred output spatial size."""

    role: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    depthwise: bool
    out_hw: tuple[int, int]

    @property
    def macs(self) -> int:
        cin = 1 if self.depthwise else self.in_channels
        kh, kw = self.kernel
        h, w = self.out_hw
        return cin * kh * kw * self.out_channels * h * w


@dataclass(frozen=True)
class TdbnPlan:
    channels: int


@dataclass(frozen=True)
class LifPlan:
    pass


@dataclass(frozen=True)
class BlockSpec:
    """One architectural block: its layer plans and inferred output shape."""

    kind: str  # "stem" | "rb" | "irb" | "head"
    layers: tuple
    output_shape: tuple[int, int, int]  # (C, H, W)
    has_shortcut: bool = False

    @property
    def conv_plans(self) -> tuple[ConvPlan, ...]:
        return tuple(l for l in self.layers if isinstance(l, ConvPlan))


@dataclass(frozen=True)
class ArchitectureSpec:
    """Immutable description of a network: stem, split-eligible blocks, head."""

    name: str
    arch_id: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    stem: BlockSpec
    blocks: tuple[BlockSpec, ...]
    head: BlockSpec
    stem_tdbn: bool = True

    @property
    def num_split_points(self) -> int:
        return len(self.blocks)

    def block_output_shape(self, split: int) -> tuple[int, int, int]:
        self._check_split(split)
        return self.blocks[split - 1].output_shape

    def _check_split(self, split: int):
        if not 1 <= split <= len(self.blocks):
            raise ValueError(
                f"split point {split} out of range 1..{len(self.blocks)} for {self.name}"
            )


def _plan_rb(cin: int, hw: tuple[int, int], width: int, cout: int, stride: int):
    """Residual block: three conv-tdbn-lif stages plus a projection shortcut
    whenever the shape changes; the final LIF fires on the summed current."""
    h, w = hw
    h2, w2 = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
    layers = [
        ConvPlan("conv1", cin, width, (1, 1), (1, 1), (0, 0), False, (h, w)),
        TdbnPlan(width),
        LifPlan(),
        ConvPlan("conv2", width, width, (3, 3), (stride, stride), (1, 1), False, (h2, w2)),
        TdbnPlan(width),
        LifPlan(),
        ConvPlan("conv3", width, cout, (1, 1), (1, 1), (0, 0), False, (h2, w2)),
        TdbnPlan(cout),
    ]
    has_shortcut = cin != cout or stride != 1
    if has_shortcut:
        layers.append(
            ConvPlan("shortcut", cin, cout, (1, 1), (stride, stride), (0, 0), False, (h2, w2))
        )
        layers.append(TdbnPlan(cout))
    layers.append(LifPlan())
    return BlockSpec("rb", tuple(layers), (cout, h2, w2), has_shortcut)


def _plan_irb(cin: int, hw: tuple[int, int], cout: int, stride: int):
    """Depthwise 3x3 followed by pointwise 1x1, each with tdBN and LIF."""
    h, w = hw
    h2, w2 = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
    layers = (
        ConvPlan("depthwise", cin, cin, (3, 3), (stride, stride), (1, 1), True, (h2, w2)),
        TdbnPlan(cin),
        LifPlan(),
        ConvPlan("pointwise", cin, cout, (1, 1), (1, 1), (0, 0), False, (h2, w2)),
        TdbnPlan(cout),
        LifPlan(),
    )
    return BlockSpec("irb", layers, (cout, h2, w2))


def arch_from_dict(cfg: dict) -> ArchitectureSpec:
    """Build an ArchitectureSpec from a parsed config mapping."""
    schema = cfg.get("schema")
    if schema != SCHEMA_VERSION:
        raise ValueError(f"unsupported architecture schema {schema!r}")
    name = cfg["name"]
    cin, h, w = (int(d) for d in cfg["input_shape"])
    num_classes = int(cfg["num_classes"])

    stem_cfg = cfg["stem"]
    k = int(stem_cfg.get("kernel", 3))
    s = int(stem_cfg.get("stride", 1))
    p = int(stem_cfg.get("padding", 1))
    cout = int(stem_cfg["out_channels"])
    stem_tdbn = bool(stem_cfg.get("tdbn", True))
    sh, sw = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
    stem_layers = [ConvPlan("stem", cin, cout, (k, k), (s, s), (p, p), False, (sh, sw))]
    if stem_tdbn:
        stem_layers.append(TdbnPlan(cout))
    stem_layers.append(LifPlan())
    stem = BlockSpec("stem", tuple(stem_layers), (cout, sh, sw))

    blocks = []
    c, hw = cout, (sh, sw)
    for entry in cfg["blocks"]:
        kind = entry["kind"]
        stride = int(entry.get("stride", 1))
        out_channels = int(entry["out_channels"])
        if kind == "rb":
            block = _plan_rb(c, hw, int(entry["width"]), out_channels, stride)
        elif kind == "irb":
            block = _plan_irb(c, hw, out_channels, stride)
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        blocks.append(block)
        c, hw = block.output_shape[0], block.output_shape[1:]

    head = BlockSpec("head", (), (num_classes, 1, 1))
    return ArchitectureSpec(
        name=name,
        arch_id=int(cfg.get("arch_id", 0)),
        input_shape=(cin, h, w),
        num_classes=num_classes,
        stem=stem,
        blocks=tuple(blocks),
        head=head,
        stem_tdbn=stem_tdbn,
    )


def parse_arch_file(path) -> ArchitectureSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return arch_from_dict(yaml.safe_load(fh))


def data_path(filename: str) -> Path:
    """Path of a bundled data file."""
    return Path(importlib.resources.files("spikesplit") / "data" / filename)


def build_arch(name: str) -> ArchitectureSpec:
    """Load one of the bundled architecture specs by name."""
    if name not in ARCH_IDS:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCH_IDS)}")
    return parse_arch_file(data_path(f"{name}.arch"))


def enumerate_split_points(arch: ArchitectureSpec) -> list[tuple[int, tuple[int, int, int]]]:
    """All candidate split points: (1-based index, feature shape after block)."""
    return [(i + 1, b.output_shape) for i, b in enumerate(arch.blocks)]


def prefix_flops(arch: ArchitectureSpec, split: int) -> int:
    """MAC count of every convolution the edge device runs up to ``split``.

    Covers the stem and blocks 1..split, shortcut convolutions included;
    normalization, pooling, the FC head, and the bottleneck encoder are not
    counted. One MAC per FLOP.
    """
    arch._check_split(split)
    total = sum(p.macs for p in arch.stem.conv_plans)
    for block in arch.blocks[:split]:
        total += sum(p.macs for p in block.conv_plans)
    return total
