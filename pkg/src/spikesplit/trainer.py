"""Surrogate-gradient training: BPTT via autograd and two-step fine-tuning.

Step one trains the plain spiking network; step two inserts the bottleneck
at the chosen split point and fine-tunes everything jointly. Time unrolling
is full (timesteps stay small), gradients cross the spike nonlinearity
through the rectangular surrogate window, and the reset path is treated as
constant. A synthetic two-class task of oriented Gaussian blobs keeps the
whole procedure desk-sized while remaining linearly separable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .arch import ARCH_IDS, arch_from_dict, build_arch
from .bottleneck import build_bottleneck, make_bottleneck
from .checkpoint import Checkpoint, apply_checkpoint, checkpoint_from_network
from .model import SpikingNetwork, build_network

__all__ = [
    "ToyTaskSpec",
    "TrainingDivergedError",
    "EpochMetrics",
    "TrainingMetrics",
    "TwoStepResult",
    "make_blob_dataset",
    "load_cifar_batches",
    "toy_arch",
    "build_toy_network",
    "backward",
    "train",
    "train_two_step",
    "evaluate",
    "evaluate_checkpoint",
    "network_from_checkpoint",
    "accuracy_drop",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyTaskSpec:
    """Synthetic two-class task: horizontally vs vertically oriented blobs."""

    input_shape: tuple[int, int, int] = (1, 12, 12)
    n_classes: int = 2
    n_train: int = 256
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    cosine_decay: bool = True
    timesteps: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("timesteps, epochs, and batch_size must be >= 1")


def make_blob_dataset(task: ToyTaskSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic image set: class 0 blobs stretch along x, class 1 along y.

    Centers are fixed, so the classes are linearly separable on raw pixels.
    """
    rng = np.random.default_rng(task.seed)
    c, h, w = task.input_shape
    n = task.n_train
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    images = np.zeros((n, c, h, w), dtype=np.float32)
    labels = rng.integers(0, task.n_classes, size=n)
    for i in range(n):
        sy, sx = (1.0, 2.6) if labels[i] == 0 else (2.6, 1.0)
        blob = 0.9 * np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2) / 2)
        noise = rng.uniform(0.0, 0.1, size=(h, w))
        images[i, :] = np.clip(blob + noise, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def load_cifar_batches(paths) -> tuple[torch.Tensor, torch.Tensor]:
    """Read standard CIFAR binary batch files.

    Records are <label bytes><3072 pixel bytes> with pixels stored plane by
    plane (R, G, B) in row-major order; one label byte per record is the
    ten-class layout, two bytes the hundred-class layout (coarse then fine,
    and the fine label is returned). Pixels are scaled to [0, 1].
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        record_sizes = [n for n in (3073, 3074) if len(raw) and len(raw) % n == 0]
        if len(record_sizes) != 1:
            raise ValueError(
                f"{path}: {len(raw)} bytes is not a whole number of CIFAR records"
            )
        record = record_sizes[0]
        label_bytes = record - 3072
        data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(data[:, label_bytes - 1].astype(np.int64))
        pixels = data[:, label_bytes:].reshape(-1, 3, 32, 32)
        images.append(pixels.astype(np.float32) / 255.0)
    return (
        torch.from_numpy(np.concatenate(images)),
        torch.from_numpy(np.concatenate(labels)),
    )


_TOY_ARCH = {
    "schema": 1,
    "name": "toy",
    "arch_id": 3,
    "input_shape": [1, 12, 12],
    "num_classes": 2,
    "stem": {"out_channels": 8, "kernel": 3, "stride": 1, "padding": 1, "tdbn": True},
    "blocks": [
        {"kind": "rb", "width": 4, "out_channels": 16, "stride": 2},
        {"kind": "rb", "width": 4, "out_channels": 16, "stride": 1},
    ],
}


def toy_arch():
    return arch_from_dict(_TOY_ARCH)


def build_toy_network(task: ToyTaskSpec, dtype=torch.float32) -> SpikingNetwork:
    net = build_network(toy_arch(), seed=task.seed, dtype=dtype)
    net.requires_grad_(True)
    return net


def backward(
    network: SpikingNetwork,
    images: torch.Tensor,
    labels: torch.Tensor,
    timesteps: int = 2,
) -> tuple[dict[str, torch.Tensor], float]:
    """Cross-entropy BPTT through the unrolled network.

    Returns the per-tensor gradients and the loss value. The forward pass
    must run with gradient recording enabled; call ``requires_grad_`` on the
    network first.
    """
    params = {
        name: t for name, t in network.named_tensors().items() if t.requires_grad
    }
    if not params:
        raise ValueError(
            "no recorded state: network parameters do not require gradients"
        )
    for t in params.values():
        if t.grad is not None:
            t.grad = None
    logits = network.forward(images, timesteps)
    loss = F.cross_entropy(logits, labels)
    loss.backward()
    grads = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for name, t in params.items()
    }
    return grads, float(loss.detach())


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainingMetrics:
    step: int
    epochs: list[EpochMetrics] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy if self.epochs else 0.0


def evaluate(network: SpikingNetwork, images: torch.Tensor, labels: torch.Tensor,
             timesteps: int = 2) -> float:
    """Top-1 accuracy in eval mode."""
    was_training = network.training
    network.eval()
    with torch.no_grad():
        logits = network.forward(images, timesteps)
        acc = float((logits.argmax(dim=1) == labels).float().mean())
    network.train(was_training)
    return acc


def accuracy_drop(reference_accuracy: float, accuracy: float) -> float:
    """Accuracy lost relative to a reference, in percentage points."""
    return (reference_accuracy - accuracy) * 100.0


def network_from_checkpoint(ckpt: Checkpoint) -> SpikingNetwork:
    """Rebuild a runnable network from checkpoint metadata and tensors."""
    name = ckpt.metadata.get("architecture")
    if name == "toy":
        spec = toy_arch()
    elif name in ARCH_IDS:
        spec = build_arch(name)
    else:
        raise ValueError(f"checkpoint names unknown architecture {name!r}")
    net = build_network(spec, seed=0)
    if "split_point" in ckpt.metadata:
        split = int(ckpt.metadata["split_point"])
        out_shape = tuple(ckpt.metadata["compressed_shape"])
        timesteps = int(ckpt.metadata.get("bottleneck_timesteps", 2))
        config = make_bottleneck(spec.blocks[split - 1].output_shape, out_shape, timesteps)
        module = build_bottleneck(config, torch.Generator().manual_seed(0),
                                  v_threshold=net.lif.v_threshold)
        net.attach_bottleneck(module, split)
    apply_checkpoint(net, ckpt)
    return net.eval()


def evaluate_checkpoint(
    ckpt: Checkpoint,
    images: torch.Tensor,
    labels: torch.Tensor,
    timesteps: int = 2,
    reference: Checkpoint | None = None,
) -> tuple[float, float | None]:
    """Top-1 accuracy of a checkpoint, plus the drop versus a reference.

    The drop (reference minus current, percentage points) is the quantity
    the split planner consumes. Checkpoints of different architectures do
    not compare.
    """
    if reference is not None:
        mine = ckpt.metadata.get("architecture")
        theirs = reference.metadata.get("architecture")
        if mine != theirs:
            raise ValueError(
                f"architecture mismatch: checkpoint is {mine!r}, reference is {theirs!r}"
            )
    accuracy = evaluate(network_from_checkpoint(ckpt), images, labels, timesteps)
    if reference is None:
        return accuracy, None
    ref_accuracy = evaluate(network_from_checkpoint(reference), images, labels, timesteps)
    return accuracy, accuracy_drop(ref_accuracy, accuracy)


def train(
    network: SpikingNetwork,
    images: torch.Tensor,
    labels: torch.Tensor,
    task: ToyTaskSpec,
    step: int = 1,
    epochs: int | None = None,
) -> TrainingMetrics:
    """SGD-with-momentum training loop with optional cosine decay."""
    epochs = task.epochs if epochs is None else epochs
    network.requires_grad_(True)
    params = [t for t in network.parameters() if t.requires_grad]
    optimizer = torch.optim.SGD(params, lr=task.learning_rate, momentum=task.momentum)
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
        if task.cosine_decay
        else None
    )
    # One fixed batch order keeps the trajectory a pure function of the
    # weights: with a zero learning rate every epoch repeats exactly.
    order_rng = np.random.default_rng(task.seed + 1000 * step)
    n = images.shape[0]
    order = order_rng.permutation(n)
    metrics = TrainingMetrics(step=step)
    for epoch in range(1, epochs + 1):
        network.train(True)
        epoch_loss = 0.0
        batches = 0
        correct = 0
        for start in range(0, n, task.batch_size):
            idx = torch.from_numpy(order[start : start + task.batch_size])
            optimizer.zero_grad(set_to_none=True)
            try:
                logits = network.forward(images[idx], task.timesteps)
                loss = F.cross_entropy(logits, labels[idx])
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDivergedError(
                        f"step {step}: non-finite activations at epoch {epoch}: {exc}"
                    ) from exc
                raise
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"step {step}: loss became non-finite at epoch {epoch}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            correct += int((logits.argmax(dim=1) == labels[idx]).sum())
            batches += 1
        if scheduler is not None:
            scheduler.step()
        metrics.epochs.append(EpochMetrics(epoch, epoch_loss / batches, correct / n))
    return metrics


@dataclass
class TwoStepResult:
    checkpoint: Checkpoint
    step1: TrainingMetrics
    step2: TrainingMetrics
    step1_accuracy: float
    step2_accuracy: float


def train_two_step(
    task: ToyTaskSpec,
    split_point: int = 1,
    compressed_shape: tuple[int, int, int] | None = None,
    network: SpikingNetwork | None = None,
) -> TwoStepResult:
    """Train the plain network, then insert the bottleneck and fine-tune.

    ``compressed_shape`` defaults to the split feature shape itself (ratio 1).
    Joint fine-tuning updates both the compression unit and the backbone.
    """
    images, labels = make_blob_dataset(task)
    net = network if network is not None else build_toy_network(task)

    step1 = train(net, images, labels, task, step=1)
    step1_acc = evaluate(net, images, labels, task.timesteps)

    in_shape = net.arch.block_output_shape(split_point)
    out_shape = compressed_shape or in_shape
    config = make_bottleneck(in_shape, out_shape, task.timesteps)
    generator = torch.Generator().manual_seed(task.seed + 7)
    module = build_bottleneck(config, generator, dtype=net.dtype,
                              v_threshold=net.lif.v_threshold)
    net.attach_bottleneck(module, split_point)
    net.requires_grad_(True)

    step2 = train(net, images, labels, task, step=2)
    step2_acc = evaluate(net, images, labels, task.timesteps)

    ckpt = checkpoint_from_network(net, metadata={"task_seed": task.seed})
    return TwoStepResult(
        checkpoint=ckpt,
        step1=step1,
        step2=step2,
        step1_accuracy=step1_acc,
        step2_accuracy=step2_acc,
    )
