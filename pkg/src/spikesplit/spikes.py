"""Binary spike tensors and leaky integrate-and-fire dynamics.

Spike activations live on a discrete time axis as (T, B, C, H, W) tensors
whose elements are exactly 0 or 1. For transmission they are bit-packed
into :class:`SpikeTensor` (8 spikes per byte). The neuron model is the
iterative LIF recursion

    v[t] = decay * v[t-1] * (1 - spike[t-1]) + current[t]
    spike[t] = 1 if v[t] > v_threshold else 0

with a hard reset realized through the ``(1 - spike)`` carry factor.
Training uses a rectangular surrogate in place of the spike derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LifParams",
    "LifState",
    "SurrogateParams",
    "SpikeTensor",
    "pack",
    "unpack",
    "lif_step",
    "lif_run",
    "encode_static",
    "surrogate_grad",
    "spike_fn",
    "relaxed_spike_fn",
]


@dataclass(frozen=True)
class LifParams:
    """Neuron constants: membrane decay in [0, 1] and a positive threshold."""

    decay: float = 0.5
    v_threshold: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {self.decay}")
        if self.v_threshold <= 0.0:
            raise ValueError(f"v_threshold must be positive, got {self.v_threshold}")


@dataclass(frozen=True)
class SurrogateParams:
    """Width of the rectangular surrogate window around the threshold."""

    width: float = 1.0

    def __post_init__(self):
        if self.width <= 0.0:
            raise ValueError(f"width must be positive, got {self.width}")


@dataclass
class LifState:
    """Per-neuron membrane potentials and the previous step's spikes."""

    v: torch.Tensor
    last_spike: torch.Tensor

    @classmethod
    def zeros(cls, shape, dtype=torch.float32, device=None) -> "LifState":
        return cls(
            v=torch.zeros(shape, dtype=dtype, device=device),
            last_spike=torch.zeros(shape, dtype=dtype, device=device),
        )


@dataclass(frozen=True)
class SpikeTensor:
    """Bit-packed binary activations of shape (T, B, C, H, W).

    Elements are flattened in row-major order; bit k of the stream lives in
    byte k // 8 at bit position k % 8 (LSB first). Trailing pad bits are 0,
    so the payload is always ceil(T*B*C*H*W / 8) bytes.
    """

    shape: tuple[int, int, int, int, int]
    payload: bytes

    def __post_init__(self):
        if len(self.shape) != 5:
            raise ValueError(f"shape must be (T, B, C, H, W), got {self.shape}")
        if any(d < 1 for d in self.shape):
            raise ValueError(f"all dimensions must be >= 1, got {self.shape}")
        expected = self.num_bytes_for(self.shape)
        if len(self.payload) != expected:
            raise ValueError(
                f"payload is {len(self.payload)} bytes, expected {expected} "
                f"for shape {self.shape}"
            )

    @property
    def num_elements(self) -> int:
        return math.prod(self.shape)

    @property
    def num_bytes(self) -> int:
        return len(self.payload)

    @staticmethod
    def num_bytes_for(shape) -> int:
        return -(-math.prod(shape) // 8)


def _as_numpy_bits(spikes) -> np.ndarray:
    if isinstance(spikes, torch.Tensor):
        arr = spikes.detach().cpu().numpy()
    else:
        arr = np.asarray(spikes)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("spike tensor contains values other than 0 and 1")
    return arr.astype(np.uint8)


def pack(spikes) -> SpikeTensor:
    """Bit-pack a binary (T, B, C, H, W) tensor into a SpikeTensor."""
    arr = _as_numpy_bits(spikes)
    if arr.ndim != 5:
        raise ValueError(f"expected a 5-d (T, B, C, H, W) tensor, got {arr.ndim}-d")
    payload = np.packbits(arr.reshape(-1), bitorder="little").tobytes()
    return SpikeTensor(shape=tuple(int(d) for d in arr.shape), payload=payload)


def unpack(packed: SpikeTensor, dtype=torch.float32) -> torch.Tensor:
    """Restore the binary tensor from its bit-packed form."""
    buf = np.frombuffer(packed.payload, dtype=np.uint8)
    bits = np.unpackbits(buf, count=packed.num_elements, bitorder="little")
    return torch.from_numpy(bits.reshape(packed.shape).copy()).to(dtype)


def surrogate_grad(v: torch.Tensor, params: LifParams, sg: SurrogateParams) -> torch.Tensor:
    """Rectangular spike pseudo-derivative: 1/width inside the window.

    Nonzero (and equal to 1/width) exactly where |v - v_threshold| <= width/2,
    so it integrates to 1 over the membrane potential axis.
    """
    inside = (v - params.v_threshold).abs() <= sg.width / 2
    return inside.to(v.dtype) / sg.width


class _HardSpike(torch.autograd.Function):
    """Heaviside spike with the rectangular window as its backward rule."""

    @staticmethod
    def forward(ctx, v, v_threshold, width):
        ctx.save_for_backward(v)
        ctx.v_threshold = v_threshold
        ctx.width = width
        return (v > v_threshold).to(v.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (v,) = ctx.saved_tensors
        window = surrogate_grad(
            v, LifParams(v_threshold=ctx.v_threshold), SurrogateParams(width=ctx.width)
        )
        return grad_output * window, None, None


def spike_fn(v: torch.Tensor, params: LifParams, sg: SurrogateParams) -> torch.Tensor:
    """Binary spikes 1[v > v_threshold], differentiable via the surrogate."""
    return _HardSpike.apply(v, params.v_threshold, sg.width)


def relaxed_spike_fn(v: torch.Tensor, params: LifParams, sg: SurrogateParams) -> torch.Tensor:
    """Piecewise-linear relaxation of the spike function.

    Ramps from 0 to 1 over the surrogate window, so its true derivative is
    the same rectangle used as the hard spike's backward rule. Used by the
    gradient-oracle tests where finite differences must be exact.
    """
    return torch.clamp((v - params.v_threshold) / sg.width + 0.5, 0.0, 1.0)


def lif_step(
    state: LifState, current: torch.Tensor, params: LifParams
) -> tuple[LifState, torch.Tensor]:
    """Advance the LIF recursion by one timestep.

    The carry from the previous step is zeroed where the neuron just spiked
    (hard reset); the new potential then integrates the synaptic input, and
    a spike is emitted where it strictly exceeds the threshold.
    """
    if state.v.shape != current.shape:
        raise ValueError(
            f"state shape {tuple(state.v.shape)} does not match "
            f"input shape {tuple(current.shape)}"
        )
    if not torch.isfinite(current).all():
        raise ValueError("synaptic input contains non-finite values")
    v = params.decay * state.v * (1.0 - state.last_spike) + current
    spikes = (v > params.v_threshold).to(v.dtype)
    return LifState(v=v, last_spike=spikes), spikes


def lif_run(
    current: torch.Tensor,
    params: LifParams,
    sg: SurrogateParams | None = None,
    spike_mode: str = "hard",
    state: LifState | None = None,
) -> torch.Tensor:
    """Run the LIF recursion over a (T, B, C, H, W) current tensor.

    In "hard" mode spikes are binary and gradients use the surrogate window;
    the reset factor (1 - spike) is treated as a constant (straight-through)
    so gradients flow through the decay and input paths only. In "relaxed"
    mode the piecewise-linear spike is used in the forward pass and the reset
    keeps its exact gradient, making backprop the true gradient of the
    relaxed dynamics.
    """
    if current.ndim != 5:
        raise ValueError(f"expected (T, B, C, H, W) current, got {current.ndim}-d")
    if not torch.isfinite(current).all():
        raise ValueError("synaptic input contains non-finite values")
    if sg is None:
        sg = SurrogateParams()
    if spike_mode not in ("hard", "relaxed"):
        raise ValueError(f"spike_mode must be 'hard' or 'relaxed', got {spike_mode!r}")

    if state is None:
        v = torch.zeros_like(current[0])
        o = torch.zeros_like(current[0])
    else:
        v, o = state.v, state.last_spike

    outputs = []
    for t in range(current.shape[0]):
        carry_gate = 1.0 - (o.detach() if spike_mode == "hard" else o)
        v = params.decay * v * carry_gate + current[t]
        if spike_mode == "hard":
            o = spike_fn(v, params, sg)
        else:
            o = relaxed_spike_fn(v, params, sg)
        outputs.append(o)
    return torch.stack(outputs, dim=0)


def encode_static(image: torch.Tensor, timesteps: int) -> torch.Tensor:
    """Replicate a static [0, 1] image along a leading time axis.

    The constant drive feeds the first convolution, which performs the
    actual conversion to spikes.
    """
    if image.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) image, got {image.ndim}-d")
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if image.numel() and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return image.unsqueeze(0).repeat(timesteps, 1, 1, 1, 1)
