"""Bottleneck compression unit: dimensioning, byte accounting, spike layers.

The encoder is a conv-tdBN-LIF stage that narrows channels and strides the
spatial dimensions down by floor(in/out) per axis; the decoder mirrors it
with a transposed convolution. Because both ends emit binary spikes, the
transmitted payload is 1 bit per element per timestep, versus 1 byte per
element for the dense 8-bit baseline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import torch

from . import layers as L
from .arch import ArchitectureSpec
from .spikes import LifParams, SurrogateParams, lif_run

__all__ = [
    "BottleneckConfig",
    "TransmissionReport",
    "make_bottleneck",
    "spike_payload_bytes",
    "baseline_payload_bytes",
    "compression_ratio",
    "exact_compression_ratio",
    "BottleneckModule",
    "build_bottleneck",
    "transmission_report",
    "compression_table",
    "load_compression_rows",
]

Shape3 = tuple[int, int, int]  # (channels, height, width)

_AXIS_NAMES = ("height", "width")


def _solve_encoder_axis(size: int, out: int, kernel: int, axis: str) -> tuple[int, int]:
    """Stride and padding mapping ``size`` -> ``out`` through one conv axis."""
    stride = size // out
    if stride < 1:
        raise ValueError(f"{axis}: output {out} exceeds input {size}")
    for padding in range(kernel):
        if (size + 2 * padding - kernel) // stride + 1 == out:
            return stride, padding
    raise ValueError(
        f"{axis}: no padding maps {size} -> {out} with kernel {kernel} "
        f"and stride {stride}"
    )


def _solve_decoder_axis(size_in: int, size_out: int, kernel: int, stride: int) -> tuple[int, int, bool]:
    """(padding, output_padding, crop) restoring ``size_out`` from ``size_in``."""
    base = (size_in - 1) * stride + kernel
    for padding in range(kernel):
        gap = base - 2 * padding - size_out
        if 0 <= -gap < stride:  # gap = -output_padding
            return padding, -gap, False
    # No exact fit: overshoot with zero padding and center-crop.
    if base < size_out:
        raise ValueError(
            f"transposed convolution cannot reach {size_out} from {size_in} "
            f"with kernel {kernel}, stride {stride}"
        )
    return 0, 0, True


@dataclass(frozen=True)
class BottleneckConfig:
    """Encoder/decoder dimensioning for one split point."""

    in_shape: Shape3
    out_shape: Shape3
    encoder_stride: tuple[int, int]
    encoder_padding: tuple[int, int]
    kernel: tuple[int, int]
    timesteps: int
    decoder_padding: tuple[int, int]
    decoder_output_padding: tuple[int, int]
    decoder_crop: bool

    def __post_init__(self):
        cin, hin, win = self.in_shape
        cout, hout, wout = self.out_shape
        if cout > cin or hout > hin or wout > win:
            raise ValueError(
                f"compressed shape {self.out_shape} exceeds input shape {self.in_shape}"
            )
        if min(self.encoder_stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.encoder_stride}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")


def make_bottleneck(in_shape: Shape3, out_shape: Shape3, timesteps: int, kernel=(3, 3)) -> BottleneckConfig:
    """Dimension an encoder/decoder pair for ``in_shape`` -> ``out_shape``.

    Strides follow the floor rule per spatial axis; padding is solved so the
    encoder output is exact. Raises naming the offending axis when the
    kernel/stride combination cannot realize the requested shape.
    """
    if min(in_shape) < 1 or min(out_shape) < 1:
        raise ValueError(f"shapes must be positive, got {in_shape} -> {out_shape}")
    kh, kw = kernel
    strides, paddings = [], []
    for (size, out, k, axis) in (
        (in_shape[1], out_shape[1], kh, "height"),
        (in_shape[2], out_shape[2], kw, "width"),
    ):
        s, p = _solve_encoder_axis(size, out, k, axis)
        strides.append(s)
        paddings.append(p)

    dec_pad, dec_opad, crops = [], [], []
    for (size_out, size_in, k, s) in (
        (in_shape[1], out_shape[1], kh, strides[0]),
        (in_shape[2], out_shape[2], kw, strides[1]),
    ):
        p, op, crop = _solve_decoder_axis(size_in, size_out, k, s)
        dec_pad.append(p)
        dec_opad.append(op)
        crops.append(crop)

    return BottleneckConfig(
        in_shape=tuple(in_shape),
        out_shape=tuple(out_shape),
        encoder_stride=tuple(strides),
        encoder_padding=tuple(paddings),
        kernel=(kh, kw),
        timesteps=timesteps,
        decoder_padding=tuple(dec_pad),
        decoder_output_padding=tuple(dec_opad),
        decoder_crop=any(crops),
    )


def spike_payload_bytes(config: BottleneckConfig) -> int:
    """Bytes of one batch-1 bit-packed compressed spike feature."""
    c, h, w = config.out_shape
    return -(-(c * h * w * config.timesteps) // 8)


def baseline_payload_bytes(config: BottleneckConfig, element_bytes: int = 1) -> int:
    """Bytes the dense baseline sends for the same compressed feature."""
    if element_bytes < 1:
        raise ValueError(f"element_bytes must be >= 1, got {element_bytes}")
    c, h, w = config.out_shape
    return c * h * w * element_bytes


def exact_compression_ratio(in_shape: Shape3, out_shape: Shape3) -> Fraction:
    """Element-count ratio between the split feature and its compressed form."""
    return Fraction(math.prod(in_shape), math.prod(out_shape))


def compression_ratio(in_shape: Shape3, out_shape: Shape3) -> int:
    """The element ratio rounded to an integer (timesteps cancel)."""
    return round(exact_compression_ratio(in_shape, out_shape))


@dataclass(frozen=True)
class TransmissionReport:
    """Byte accounting for one split point's compressed feature."""

    split_point: int
    timesteps: int
    in_shape: Shape3
    out_shape: Shape3
    baseline_payload_bytes: int
    spike_payload_bytes: int
    compression_ratio: int


def transmission_report(split_point: int, config: BottleneckConfig) -> TransmissionReport:
    return TransmissionReport(
        split_point=split_point,
        timesteps=config.timesteps,
        in_shape=config.in_shape,
        out_shape=config.out_shape,
        baseline_payload_bytes=baseline_payload_bytes(config),
        spike_payload_bytes=spike_payload_bytes(config),
        compression_ratio=compression_ratio(config.in_shape, config.out_shape),
    )


@dataclass
class BottleneckModule:
    """Instantiated encoder/decoder weights for one BottleneckConfig."""

    config: BottleneckConfig
    encoder: L.ConvSpec
    encoder_norm: L.TdbnParams
    decoder: L.DeconvSpec
    decoder_norm: L.TdbnParams

    def encode(self, spikes: torch.Tensor, lif: LifParams, sg: SurrogateParams,
               mode: str = "eval", spike_mode: str = "hard") -> torch.Tensor:
        cur = L.conv_forward(spikes, self.encoder)
        cur = L.tdbn_forward(cur, self.encoder_norm, mode)
        return lif_run(cur, lif, sg, spike_mode)

    def decode(self, spikes: torch.Tensor, lif: LifParams, sg: SurrogateParams,
               mode: str = "eval", spike_mode: str = "hard") -> torch.Tensor:
        cur = L.deconv_forward(spikes, self.decoder)
        cur = L.tdbn_forward(cur, self.decoder_norm, mode)
        return lif_run(cur, lif, sg, spike_mode)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {
            "bottleneck.encoder.weight": self.encoder.weights,
            "bottleneck.encoder_norm.weight": self.encoder_norm.weight,
            "bottleneck.encoder_norm.bias": self.encoder_norm.bias,
            "bottleneck.decoder.weight": self.decoder.weights,
            "bottleneck.decoder_norm.weight": self.decoder_norm.weight,
            "bottleneck.decoder_norm.bias": self.decoder_norm.bias,
        }
        for prefix, norm in (("encoder_norm", self.encoder_norm), ("decoder_norm", self.decoder_norm)):
            if norm.running_mean is not None:
                out[f"bottleneck.{prefix}.running_mean"] = norm.running_mean
                out[f"bottleneck.{prefix}.running_var"] = norm.running_var
        return out


def build_bottleneck(config: BottleneckConfig, generator: torch.Generator,
                     dtype=torch.float32, v_threshold: float = 1.0) -> BottleneckModule:
    """Instantiate seeded encoder/decoder weights for a config."""
    cin, hin, win = config.in_shape
    cout, hout, wout = config.out_shape
    encoder = L.ConvSpec(
        in_channels=cin,
        out_channels=cout,
        kernel=config.kernel,
        stride=config.encoder_stride,
        padding=config.encoder_padding,
    ).init_weights(generator, dtype)
    decoder = L.DeconvSpec(
        in_channels=cout,
        out_channels=cin,
        kernel=config.kernel,
        stride=config.encoder_stride,
        padding=(0, 0) if config.decoder_crop else config.decoder_padding,
        output_padding=(0, 0) if config.decoder_crop else config.decoder_output_padding,
        crop_to=(hin, win) if config.decoder_crop else None,
    )
    decoder.init_weights(generator, dtype)
    enc_norm = L.TdbnParams(channels=cout, v_threshold=v_threshold).init_stats(dtype)
    dec_norm = L.TdbnParams(channels=cin, v_threshold=v_threshold).init_stats(dtype)
    enc_norm.to_dtype(dtype)
    dec_norm.to_dtype(dtype)
    return BottleneckModule(config, encoder, enc_norm, decoder, dec_norm)


def parse_shape(text: str) -> Shape3:
    """Parse a 'CxHxW' shape string."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"expected a CxHxW shape, got {text!r}")
    return tuple(int(p) for p in parts)


def format_shape(shape: Shape3) -> str:
    return "x".join(str(d) for d in shape)


def load_compression_rows(path) -> list[dict]:
    """Read a split/original/compressed candidate table (CSV)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "split": int(row["split"]),
                    "timesteps": int(row.get("timesteps", 2)),
                    "original": parse_shape(row["original"]),
                    "compressed": parse_shape(row["compressed"]),
                    "accuracy_drop": float(row["accuracy_drop"])
                    if row.get("accuracy_drop") not in (None, "")
                    else None,
                }
            )
    rows.sort(key=lambda r: r["split"])
    return rows


def compression_table(arch: ArchitectureSpec, rows: list[dict], timesteps: int) -> list[TransmissionReport]:
    """Recompute byte counts and ratios for every candidate row.

    Each row's original shape is cross-checked against the architecture's
    inferred shape at that split point.
    """
    reports = []
    for row in rows:
        split = row["split"]
        declared = row["original"]
        inferred = arch.block_output_shape(split)
        if tuple(declared) != tuple(inferred):
            raise ValueError(
                f"{arch.name} split {split}: declared shape {declared} does not "
                f"match inferred shape {inferred}"
            )
        config = make_bottleneck(declared, row["compressed"], timesteps)
        reports.append(transmission_report(split, config))
    return reports
