"""Spiking layer primitives: convolution, tdBN, pooling, and the FC head.

Convolution and normalization act independently per timestep (the time axis
is folded into the batch), so all temporal coupling lives in the LIF state.
When the input is binary the convolution reduces to summing weights at
active positions, which is what accumulate-only energy counting relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .spikes import SpikeTensor, unpack

__all__ = [
    "ConvSpec",
    "DeconvSpec",
    "TdbnParams",
    "FcSpec",
    "conv_forward",
    "deconv_forward",
    "tdbn_forward",
    "avgpool_and_fc",
    "kaiming_uniform",
]


def _pair(x) -> tuple[int, int]:
    if isinstance(x, (tuple, list)):
        if len(x) != 2:
            raise ValueError(f"expected a pair, got {x}")
        return int(x[0]), int(x[1])
    return int(x), int(x)


def kaiming_uniform(shape, fan_in: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = (6.0 / fan_in) ** 0.5
    w = torch.empty(shape, dtype=torch.float32)
    w.uniform_(-bound, bound, generator=generator)
    return w.to(dtype)


@dataclass
class ConvSpec:
    """A 2-d convolution with explicit geometry and owned weights.

    Weight layout matches torch: (out_channels, in_channels / groups, kh, kw)
    with groups == in_channels for depthwise convolutions.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    depthwise: bool = False
    weights: torch.Tensor | None = None
    bias: torch.Tensor | None = None

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.depthwise and self.out_channels != self.in_channels:
            raise ValueError("depthwise convolution requires out_channels == in_channels")
        if self.weights is not None:
            expected = (
                self.out_channels,
                1 if self.depthwise else self.in_channels,
                *self.kernel,
            )
            if tuple(self.weights.shape) != expected:
                raise ValueError(
                    f"weight shape {tuple(self.weights.shape)} does not match {expected}"
                )

    @property
    def groups(self) -> int:
        return self.in_channels if self.depthwise else 1

    def init_weights(self, generator: torch.Generator, dtype=torch.float32, with_bias=False):
        fan_in = (1 if self.depthwise else self.in_channels) * self.kernel[0] * self.kernel[1]
        shape = (self.out_channels, 1 if self.depthwise else self.in_channels, *self.kernel)
        self.weights = kaiming_uniform(shape, fan_in, generator, dtype)
        if with_bias:
            self.bias = kaiming_uniform((self.out_channels,), fan_in, generator, dtype)
        return self


@dataclass
class DeconvSpec:
    """A transposed 2-d convolution used by the bottleneck decoder.

    ``crop_to`` center-crops the output to an exact spatial size when no
    (padding, output_padding) pair can produce it directly.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    output_padding: tuple[int, int] = (0, 0)
    crop_to: tuple[int, int] | None = None
    weights: torch.Tensor | None = None
    bias: torch.Tensor | None = None

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.output_padding = _pair(self.output_padding)

    def init_weights(self, generator: torch.Generator, dtype=torch.float32):
        # torch transposed-conv weight layout: (in_channels, out_channels, kh, kw)
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        shape = (self.in_channels, self.out_channels, *self.kernel)
        self.weights = kaiming_uniform(shape, fan_in, generator, dtype)
        return self


def _fold_time(x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
    if x.ndim != 5:
        raise ValueError(f"expected a (T, B, C, H, W) tensor, got {x.ndim}-d")
    t, b = x.shape[0], x.shape[1]
    return x.reshape(t * b, *x.shape[2:]), t, b


def conv_forward(x, spec: ConvSpec) -> torch.Tensor:
    """Cross-correlate each timestep of a spike or current tensor.

    Accepts a packed SpikeTensor or a plain (T, B, C, H, W) tensor.
    """
    if isinstance(x, SpikeTensor):
        x = unpack(x)
    if spec.weights is None:
        raise ValueError("convolution has no weights")
    if x.shape[2] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[2]} channels, convolution expects {spec.in_channels}"
        )
    folded, t, b = _fold_time(x)
    out = F.conv2d(
        folded,
        spec.weights.to(x.dtype),
        bias=None if spec.bias is None else spec.bias.to(x.dtype),
        stride=spec.stride,
        padding=spec.padding,
        groups=spec.groups,
    )
    return out.reshape(t, b, *out.shape[1:])


def deconv_forward(x: torch.Tensor, spec: DeconvSpec) -> torch.Tensor:
    """Transposed convolution per timestep, with optional center crop."""
    if spec.weights is None:
        raise ValueError("transposed convolution has no weights")
    if x.shape[2] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[2]} channels, deconvolution expects {spec.in_channels}"
        )
    folded, t, b = _fold_time(x)
    out = F.conv_transpose2d(
        folded,
        spec.weights.to(x.dtype),
        bias=None if spec.bias is None else spec.bias.to(x.dtype),
        stride=spec.stride,
        padding=spec.padding,
        output_padding=spec.output_padding,
    )
    if spec.crop_to is not None:
        th, tw = spec.crop_to
        h, w = out.shape[-2:]
        if h < th or w < tw:
            raise ValueError(f"deconvolution output {h}x{w} smaller than crop target {th}x{tw}")
        top, left = (h - th) // 2, (w - tw) // 2
        out = out[..., top : top + th, left : left + tw]
    return out.reshape(t, b, *out.shape[1:])


@dataclass
class TdbnParams:
    """Threshold-dependent batch normalization parameters for one layer.

    Normalizes per channel over the joint (time, batch, height, width) axes
    and rescales by alpha * v_threshold before the learned affine transform.
    Running statistics start uninitialized; eval mode requires them.
    """

    channels: int
    alpha: float = 1.0
    v_threshold: float = 1.0
    eps: float = 1e-5
    momentum: float = 0.1
    weight: torch.Tensor | None = None
    bias: torch.Tensor | None = None
    running_mean: torch.Tensor | None = None
    running_var: torch.Tensor | None = None
    num_batches_tracked: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight is None:
            self.weight = torch.ones(self.channels)
        if self.bias is None:
            self.bias = torch.zeros(self.channels)

    def init_stats(self, dtype=torch.float32):
        """Start running statistics at the identity normalization (0, 1)."""
        self.running_mean = torch.zeros(self.channels, dtype=dtype)
        self.running_var = torch.ones(self.channels, dtype=dtype)
        return self

    def to_dtype(self, dtype):
        self.weight = self.weight.to(dtype)
        self.bias = self.bias.to(dtype)
        if self.running_mean is not None:
            self.running_mean = self.running_mean.to(dtype)
            self.running_var = self.running_var.to(dtype)
        return self


def tdbn_forward(x: torch.Tensor, params: TdbnParams, mode: str = "eval") -> torch.Tensor:
    """Apply tdBN to a (T, B, C, H, W) current tensor.

    Train mode normalizes with statistics of the current tensor computed
    jointly over (T, B, H, W) and updates the running estimates with an
    exponential moving average; eval mode uses the running estimates.
    """
    if x.ndim != 5:
        raise ValueError(f"expected a (T, B, C, H, W) tensor, got {x.ndim}-d")
    if x.shape[2] != params.channels:
        raise ValueError(f"input has {x.shape[2]} channels, tdBN expects {params.channels}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    reduce_dims = (0, 1, 3, 4)
    if mode == "train":
        mean = x.mean(dim=reduce_dims)
        var = x.var(dim=reduce_dims, unbiased=False)
        with torch.no_grad():
            n = x.numel() // x.shape[2]
            unbiased = var.detach() * (n / max(n - 1, 1))
            if params.running_mean is None:
                params.init_stats(dtype=x.dtype)
            m = params.momentum
            params.running_mean.mul_(1 - m).add_(m * mean.detach())
            params.running_var.mul_(1 - m).add_(m * unbiased)
            params.num_batches_tracked += 1
    else:
        if params.running_mean is None or params.running_var is None:
            raise ValueError("eval-mode tdBN requires initialized running statistics")
        mean = params.running_mean.to(x.dtype)
        var = params.running_var.to(x.dtype)

    shape = (1, 1, params.channels, 1, 1)
    scale = params.alpha * params.v_threshold
    normed = scale * (x - mean.view(shape)) / torch.sqrt(var.view(shape) + params.eps)
    return params.weight.to(x.dtype).view(shape) * normed + params.bias.to(x.dtype).view(shape)


@dataclass
class FcSpec:
    """Fully connected readout: weights (n_classes, in_features)."""

    in_features: int
    out_features: int
    weights: torch.Tensor | None = None
    bias: torch.Tensor | None = None

    def init_weights(self, generator: torch.Generator, dtype=torch.float32):
        self.weights = kaiming_uniform(
            (self.out_features, self.in_features), self.in_features, generator, dtype
        )
        self.bias = torch.zeros(self.out_features, dtype=dtype)
        return self


def avgpool_and_fc(spikes: torch.Tensor, fc: FcSpec) -> torch.Tensor:
    """Aggregate final-block spikes into logits.

    Per timestep: global average pool over space, then the FC map; the
    per-timestep logits are averaged over the time axis.
    """
    if spikes.ndim != 5:
        raise ValueError(f"expected (T, B, C, H, W) spikes, got {spikes.ndim}-d")
    if fc.weights is None:
        raise ValueError("FC head has no weights")
    if spikes.shape[2] != fc.in_features:
        raise ValueError(
            f"input has {spikes.shape[2]} channels, FC head expects {fc.in_features}"
        )
    pooled = spikes.mean(dim=(3, 4))  # (T, B, C)
    logits_t = pooled @ fc.weights.to(spikes.dtype).t()
    if fc.bias is not None:
        logits_t = logits_t + fc.bias.to(spikes.dtype)
    return logits_t.mean(dim=0)
