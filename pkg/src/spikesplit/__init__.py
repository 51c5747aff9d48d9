"""spikesplit: edge-cloud split inference for spiking neural networks.

Binary spike features are bit-packed (8 activations per byte), compressed
through a conv-tdBN-LIF bottleneck at a chosen split point, shipped over a
checksummed TCP frame protocol, and decoded on the server — with byte
accounting, energy estimation, and a drop-budgeted split planner around it.
"""

__version__ = "0.1.0"

from .arch import ArchitectureSpec, build_arch, enumerate_split_points, prefix_flops
from .bottleneck import (
    BottleneckConfig,
    baseline_payload_bytes,
    compression_ratio,
    make_bottleneck,
    spike_payload_bytes,
)
from .energy import HardwareProfile, energy_report, measure_firing_rate, syops
from .model import SpikingNetwork, build_network
from .planner import CandidateConfig, SplitPlan, plan_network, select_per_point
from .spikes import (
    LifParams,
    LifState,
    SpikeTensor,
    SurrogateParams,
    encode_static,
    lif_run,
    lif_step,
    pack,
    surrogate_grad,
    unpack,
)
from .wire import EdgeClient, SpikeFrame, SpikeServer, deserialize, edge_infer, serialize, serve

__all__ = [
    "__version__",
    "ArchitectureSpec",
    "build_arch",
    "enumerate_split_points",
    "prefix_flops",
    "BottleneckConfig",
    "make_bottleneck",
    "spike_payload_bytes",
    "baseline_payload_bytes",
    "compression_ratio",
    "HardwareProfile",
    "measure_firing_rate",
    "syops",
    "energy_report",
    "SpikingNetwork",
    "build_network",
    "CandidateConfig",
    "SplitPlan",
    "select_per_point",
    "plan_network",
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
    "SpikeFrame",
    "serialize",
    "deserialize",
    "EdgeClient",
    "SpikeServer",
    "edge_infer",
    "serve",
]
