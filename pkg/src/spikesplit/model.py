"""Runtime spiking networks built from declarative architecture specs.

A SpikingNetwork owns seeded weights for the stem, the residual or
depthwise-separable blocks, and the pooled FC head. With a bottleneck
attached at a split point, the forward pass is literally the composition
``run_cloud(run_edge(x))``, so monolithic and split execution share every
operation in the same order — the basis of bit-exact partition transparency.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import layers as L
from .arch import ArchitectureSpec, BlockSpec, ConvPlan, TdbnPlan
from .bottleneck import BottleneckModule
from .spikes import LifParams, SurrogateParams, encode_static, lif_run

__all__ = ["SpikingNetwork", "build_network"]


@dataclass
class _Stage:
    conv: L.ConvSpec
    norm: L.TdbnParams | None


@dataclass
class _Block:
    kind: str
    stages: list[_Stage]
    shortcut: _Stage | None = None


class SpikingNetwork:
    """Executable spiking network with optional bottleneck at a split point."""

    def __init__(
        self,
        arch: ArchitectureSpec,
        stem: _Block,
        blocks: list[_Block],
        head: L.FcSpec,
        lif: LifParams,
        surrogate: SurrogateParams,
        dtype=torch.float32,
    ):
        self.arch = arch
        self.stem = stem
        self.blocks = blocks
        self.head = head
        self.lif = lif
        self.surrogate = surrogate
        self.dtype = dtype
        self.bottleneck: BottleneckModule | None = None
        self.split_point: int | None = None
        self.training = False
        self.spike_mode = "hard"

    # -- mode handling -------------------------------------------------

    def train(self, flag: bool = True) -> "SpikingNetwork":
        self.training = flag
        return self

    def eval(self) -> "SpikingNetwork":
        return self.train(False)

    @property
    def _norm_mode(self) -> str:
        return "train" if self.training else "eval"

    # -- structure -----------------------------------------------------

    def attach_bottleneck(self, module: BottleneckModule, split_point: int) -> "SpikingNetwork":
        expected = self.arch.block_output_shape(split_point)
        if tuple(module.config.in_shape) != tuple(expected):
            raise ValueError(
                f"bottleneck input shape {module.config.in_shape} does not match "
                f"split {split_point} feature shape {expected}"
            )
        self.bottleneck = module
        self.split_point = split_point
        return self

    def detach_bottleneck(self) -> "SpikingNetwork":
        self.bottleneck = None
        self.split_point = None
        return self

    def _all_norms(self) -> list[L.TdbnParams]:
        norms = []
        for block in [self.stem, *self.blocks]:
            for stage in block.stages:
                if stage.norm is not None:
                    norms.append(stage.norm)
            if block.shortcut is not None and block.shortcut.norm is not None:
                norms.append(block.shortcut.norm)
        if self.bottleneck is not None:
            norms.extend([self.bottleneck.encoder_norm, self.bottleneck.decoder_norm])
        return norms

    def calibrate_norms(self, images: torch.Tensor, timesteps: int) -> "SpikingNetwork":
        """Set every layer's running statistics from one reference batch.

        Without this, an untrained network barely fires past the first few
        blocks (currents never reach threshold) and eval-mode activity is
        degenerate. One momentum-1 train pass pins the running statistics to
        the batch statistics, after which eval mode fires at realistic rates.
        Deterministic: the same weights and images always give the same stats.
        """
        norms = self._all_norms()
        saved = [(n.momentum, n.num_batches_tracked) for n in norms]
        for n in norms:
            n.momentum = 1.0
        was_training = self.training
        self.train(True)
        with torch.no_grad():
            self.forward(images, timesteps)
        self.train(was_training)
        for n, (momentum, tracked) in zip(norms, saved):
            n.momentum = momentum
            n.num_batches_tracked = tracked + 1
        return self

    # -- forward passes ------------------------------------------------

    def _run_stage(self, x: torch.Tensor, stage: _Stage, fire: bool = True,
                   records: list | None = None) -> torch.Tensor:
        cur = L.conv_forward(x, stage.conv)
        if stage.norm is not None:
            cur = L.tdbn_forward(cur, stage.norm, self._norm_mode)
        if not fire:
            return cur
        out = lif_run(cur, self.lif, self.surrogate, self.spike_mode)
        if records is not None:
            records.append(out)
        return out

    def _run_block(self, x: torch.Tensor, block: _Block, records: list | None = None) -> torch.Tensor:
        if block.kind == "rb":
            h = self._run_stage(x, block.stages[0], records=records)
            h = self._run_stage(h, block.stages[1], records=records)
            cur = self._run_stage(h, block.stages[2], fire=False)
            shortcut = x if block.shortcut is None else self._run_stage(x, block.shortcut, fire=False)
            out = lif_run(cur + shortcut, self.lif, self.surrogate, self.spike_mode)
            if records is not None:
                records.append(out)
            return out
        if block.kind in ("irb", "stem"):
            for stage in block.stages:
                x = self._run_stage(x, stage, records=records)
            return x
        raise ValueError(f"unknown block kind {block.kind!r}")

    def run_blocks(self, spikes: torch.Tensor, first: int, last: int,
                   records: list | None = None) -> torch.Tensor:
        """Run blocks ``first``..``last`` (1-based, inclusive) on spikes."""
        for block in self.blocks[first - 1 : last]:
            spikes = self._run_block(spikes, block, records)
        return spikes

    def run_edge(self, images: torch.Tensor, timesteps: int,
                 records: list | None = None) -> torch.Tensor:
        """Device side: stem, blocks up to the split, then the encoder."""
        if self.bottleneck is None or self.split_point is None:
            raise ValueError("no bottleneck attached; edge execution needs a split")
        current = encode_static(images.to(self.dtype), timesteps)
        spikes = self._run_block(current, self.stem, records)
        spikes = self.run_blocks(spikes, 1, self.split_point, records)
        return self.bottleneck.encode(
            spikes, self.lif, self.surrogate, self._norm_mode, self.spike_mode
        )

    def run_cloud(self, compressed: torch.Tensor) -> torch.Tensor:
        """Server side: decoder, remaining blocks, pooled FC head."""
        if self.bottleneck is None or self.split_point is None:
            raise ValueError("no bottleneck attached; cloud execution needs a split")
        spikes = self.bottleneck.decode(
            compressed, self.lif, self.surrogate, self._norm_mode, self.spike_mode
        )
        spikes = self.run_blocks(spikes, self.split_point + 1, len(self.blocks))
        return L.avgpool_and_fc(spikes, self.head)

    def forward(self, images: torch.Tensor, timesteps: int,
                records: list | None = None) -> torch.Tensor:
        """Full forward pass; routes through the bottleneck when attached."""
        if self.bottleneck is not None:
            return self.run_cloud(self.run_edge(images, timesteps, records))
        current = encode_static(images.to(self.dtype), timesteps)
        spikes = self._run_block(current, self.stem, records)
        spikes = self.run_blocks(spikes, 1, len(self.blocks), records)
        return L.avgpool_and_fc(spikes, self.head)

    def record_block_spikes(self, images: torch.Tensor, timesteps: int) -> list[list[torch.Tensor]]:
        """Forward pass collecting every LIF output, grouped per block.

        Group 0 is the stem; group i the i-th block. Feeds firing-rate
        measurement, which averages layer means over all layers before a
        split point.
        """
        groups: list[list[torch.Tensor]] = []
        with torch.no_grad():
            current = encode_static(images.to(self.dtype), timesteps)
            stem_records: list[torch.Tensor] = []
            x = self._run_block(current, self.stem, stem_records)
            groups.append(stem_records)
            for block in self.blocks:
                block_records: list[torch.Tensor] = []
                x = self._run_block(x, block, block_records)
                groups.append(block_records)
        return groups

    # -- parameter access ----------------------------------------------

    def _named_stage(self, prefix: str, stage: _Stage) -> dict[str, torch.Tensor]:
        out = {f"{prefix}.conv.weight": stage.conv.weights}
        if stage.conv.bias is not None:
            out[f"{prefix}.conv.bias"] = stage.conv.bias
        if stage.norm is not None:
            out[f"{prefix}.norm.weight"] = stage.norm.weight
            out[f"{prefix}.norm.bias"] = stage.norm.bias
            if stage.norm.running_mean is not None:
                out[f"{prefix}.norm.running_mean"] = stage.norm.running_mean
                out[f"{prefix}.norm.running_var"] = stage.norm.running_var
        return out

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """All weights and normalization statistics, deterministically named."""
        out: dict[str, torch.Tensor] = {}
        out.update(self._named_stage("stem", self.stem.stages[0]))
        for i, block in enumerate(self.blocks, start=1):
            for j, stage in enumerate(block.stages, start=1):
                out.update(self._named_stage(f"block{i:02d}.stage{j}", stage))
            if block.shortcut is not None:
                out.update(self._named_stage(f"block{i:02d}.shortcut", block.shortcut))
        out["head.fc.weight"] = self.head.weights
        out["head.fc.bias"] = self.head.bias
        if self.bottleneck is not None:
            out.update(self.bottleneck.named_tensors())
        return out

    def parameters(self) -> list[torch.Tensor]:
        """Trainable tensors (weights and normalization affine terms)."""
        return [
            t
            for name, t in self.named_tensors().items()
            if "running_" not in name
        ]

    def requires_grad_(self, flag: bool = True) -> "SpikingNetwork":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self


def _build_stage(plan: ConvPlan, norm_channels: int | None, generator, dtype, v_threshold) -> _Stage:
    conv = L.ConvSpec(
        in_channels=plan.in_channels,
        out_channels=plan.out_channels,
        kernel=plan.kernel,
        stride=plan.stride,
        padding=plan.padding,
        depthwise=plan.depthwise,
    ).init_weights(generator, dtype)
    norm = None
    if norm_channels is not None:
        norm = L.TdbnParams(channels=norm_channels, v_threshold=v_threshold)
        norm.init_stats(dtype)
        norm.to_dtype(dtype)
    return _Stage(conv=conv, norm=norm)


def _build_block(spec: BlockSpec, generator, dtype, v_threshold) -> _Block:
    plans = spec.conv_plans
    if spec.kind == "stem":
        has_norm = any(isinstance(l, TdbnPlan) for l in spec.layers)
        norm_ch = plans[0].out_channels if has_norm else None
        return _Block("stem", [_build_stage(plans[0], norm_ch, generator, dtype, v_threshold)])
    if spec.kind == "rb":
        main = [p for p in plans if p.role != "shortcut"]
        stages = [
            _build_stage(p, p.out_channels, generator, dtype, v_threshold) for p in main
        ]
        shortcut = None
        for p in plans:
            if p.role == "shortcut":
                shortcut = _build_stage(p, p.out_channels, generator, dtype, v_threshold)
        return _Block("rb", stages, shortcut)
    if spec.kind == "irb":
        stages = [
            _build_stage(p, p.out_channels, generator, dtype, v_threshold) for p in plans
        ]
        return _Block("irb", stages)
    raise ValueError(f"cannot build block of kind {spec.kind!r}")


def build_network(
    arch: ArchitectureSpec,
    seed: int = 0,
    lif: LifParams | None = None,
    surrogate: SurrogateParams | None = None,
    dtype=torch.float32,
) -> SpikingNetwork:
    """Instantiate a network with seeded fan-in-uniform weights.

    The same (arch, seed) pair always yields bit-identical weights, which is
    how the edge and cloud halves of a demo session agree without shipping a
    checkpoint.
    """
    lif = lif or LifParams()
    surrogate = surrogate or SurrogateParams()
    generator = torch.Generator().manual_seed(seed)

    stem = _build_block(arch.stem, generator, dtype, lif.v_threshold)
    blocks = [_build_block(b, generator, dtype, lif.v_threshold) for b in arch.blocks]
    head = L.FcSpec(
        in_features=arch.blocks[-1].output_shape[0], out_features=arch.num_classes
    ).init_weights(generator, dtype)
    return SpikingNetwork(arch, stem, blocks, head, lif, surrogate, dtype)
