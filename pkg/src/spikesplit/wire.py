"""Co-inference wire protocol: spike frames over TCP, client and server.

Frame layout (all integers little-endian):

    magic    4 bytes  b"SPKF"
    version  u8
    arch_id  u16      0 in responses marks an error frame
    split    u8
    T        u8
    c, h, w  u16 each
    len      u32      payload byte count
    payload  len bytes
    crc32    u32      over header + payload

Requests carry bit-packed spikes (payload length must equal
ceil(c*h*w*T / 8)); responses reuse the same header with float32 logits,
or an error code + message when arch_id is 0. The length field makes the
stream self-delimiting, so concatenated frames parse unambiguously.
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch

from .spikes import SpikeTensor, pack, unpack

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_LEN",
    "ErrorCode",
    "WireError",
    "BadMagicError",
    "VersionMismatchError",
    "LengthMismatchError",
    "ChecksumError",
    "ProtocolError",
    "ConnectionLostError",
    "SpikeFrame",
    "serialize",
    "deserialize",
    "spikes_to_frame",
    "frame_to_spikes",
    "logits_to_frame",
    "frame_to_logits",
    "error_to_frame",
    "SessionStats",
    "EdgeClient",
    "edge_infer",
    "SpikeServer",
    "serve",
    "parse_endpoint",
    "default_endpoint",
    "ENDPOINT_ENV_VAR",
]

MAGIC = b"SPKF"
VERSION = 1
HEADER_LEN = 19
CHECKSUM_LEN = 4
_HEADER_FMT = "<BHBBHHHI"  # after the 4-byte magic

ENDPOINT_ENV_VAR = "SPIKESPLIT_ENDPOINT"
_DEFAULT_ENDPOINT = "127.0.0.1:7463"


class ErrorCode(IntEnum):
    BAD_MAGIC = 1
    BAD_VERSION = 2
    LENGTH_MISMATCH = 3
    CHECKSUM_FAILED = 4
    UNKNOWN_ARCH = 5
    UNKNOWN_SPLIT = 6
    BAD_DIMS = 7
    INTERNAL = 8


class WireError(Exception):
    code: ErrorCode = ErrorCode.INTERNAL
    retryable = False


class BadMagicError(WireError):
    code = ErrorCode.BAD_MAGIC


class VersionMismatchError(WireError):
    code = ErrorCode.BAD_VERSION


class LengthMismatchError(WireError):
    code = ErrorCode.LENGTH_MISMATCH


class ChecksumError(WireError):
    code = ErrorCode.CHECKSUM_FAILED


class ProtocolError(WireError):
    """Error frame received from the peer."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"peer reported {ErrorCode(code).name}: {message}")
        self.code = ErrorCode(code)


class ConnectionLostError(WireError):
    retryable = True


@dataclass(frozen=True)
class SpikeFrame:
    """One protocol frame; requests hold packed spikes, responses logits."""

    arch_id: int
    split_point: int
    timesteps: int
    dims: tuple[int, int, int]  # (c, h, w)
    payload: bytes
    version: int = VERSION


def serialize(frame: SpikeFrame) -> bytes:
    header = MAGIC + struct.pack(
        _HEADER_FMT,
        frame.version,
        frame.arch_id,
        frame.split_point,
        frame.timesteps,
        frame.dims[0],
        frame.dims[1],
        frame.dims[2],
        len(frame.payload),
    )
    body = header + frame.payload
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> SpikeFrame:
    """Parse one complete frame; the buffer must hold exactly one frame."""
    if len(data) < HEADER_LEN + CHECKSUM_LEN:
        raise LengthMismatchError(f"frame of {len(data)} bytes is shorter than the minimum")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, arch_id, split, timesteps, c, h, w, plen = struct.unpack(
        _HEADER_FMT, data[4:HEADER_LEN]
    )
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    if len(data) != HEADER_LEN + plen + CHECKSUM_LEN:
        raise LengthMismatchError(
            f"header declares {plen} payload bytes but frame has "
            f"{len(data) - HEADER_LEN - CHECKSUM_LEN}"
        )
    body = data[: HEADER_LEN + plen]
    (crc,) = struct.unpack("<I", data[HEADER_LEN + plen :])
    if crc != zlib.crc32(body):
        raise ChecksumError("checksum mismatch")
    return SpikeFrame(
        arch_id=arch_id,
        split_point=split,
        timesteps=timesteps,
        dims=(c, h, w),
        payload=data[HEADER_LEN : HEADER_LEN + plen],
        version=version,
    )


def spikes_to_frame(spikes: torch.Tensor, arch_id: int, split_point: int) -> SpikeFrame:
    """Pack a batch-1 (T, 1, C, H, W) spike tensor into a request frame."""
    if spikes.ndim != 5 or spikes.shape[1] != 1:
        raise ValueError(f"expected a (T, 1, C, H, W) spike tensor, got {tuple(spikes.shape)}")
    packed = pack(spikes)
    t, _, c, h, w = packed.shape
    return SpikeFrame(
        arch_id=arch_id,
        split_point=split_point,
        timesteps=t,
        dims=(c, h, w),
        payload=packed.payload,
    )


def frame_to_spikes(frame: SpikeFrame, dtype=torch.float32) -> torch.Tensor:
    """Unpack a request frame back into a (T, 1, C, H, W) spike tensor."""
    c, h, w = frame.dims
    shape = (frame.timesteps, 1, c, h, w)
    expected = SpikeTensor.num_bytes_for(shape)
    if len(frame.payload) != expected:
        raise LengthMismatchError(
            f"spike payload is {len(frame.payload)} bytes, dims require {expected}"
        )
    return unpack(SpikeTensor(shape=shape, payload=frame.payload), dtype)


def logits_to_frame(logits: torch.Tensor, request: SpikeFrame) -> SpikeFrame:
    vec = logits.detach().cpu().to(torch.float32).reshape(-1).numpy().astype("<f4")
    return SpikeFrame(
        arch_id=request.arch_id,
        split_point=request.split_point,
        timesteps=request.timesteps,
        dims=(len(vec), 1, 1),
        payload=vec.tobytes(),
    )


def frame_to_logits(frame: SpikeFrame) -> torch.Tensor:
    if frame.arch_id == 0:
        code, message = _parse_error_payload(frame.payload)
        raise ProtocolError(code, message)
    n = frame.dims[0]
    if len(frame.payload) != 4 * n:
        raise LengthMismatchError(
            f"logits payload is {len(frame.payload)} bytes, expected {4 * n}"
        )
    vec = np.frombuffer(frame.payload, dtype="<f4").copy()
    return torch.from_numpy(vec)


def error_to_frame(code: ErrorCode, message: str) -> SpikeFrame:
    payload = struct.pack("<H", int(code)) + message.encode("utf-8")
    return SpikeFrame(arch_id=0, split_point=0, timesteps=0, dims=(0, 0, 0), payload=payload)


def _parse_error_payload(payload: bytes) -> tuple[ErrorCode, str]:
    if len(payload) < 2:
        return ErrorCode.INTERNAL, "malformed error frame"
    (code,) = struct.unpack("<H", payload[:2])
    return ErrorCode(code), payload[2:].decode("utf-8", errors="replace")


# -- socket framing ------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionLostError(f"connection closed after {got}/{n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> SpikeFrame:
    header = _recv_exact(sock, HEADER_LEN)
    if header[:4] != MAGIC:
        raise BadMagicError(f"bad magic {header[:4]!r}")
    plen = struct.unpack("<I", header[HEADER_LEN - 4 :])[0]
    rest = _recv_exact(sock, plen + CHECKSUM_LEN)
    return deserialize(header + rest)


def write_frame(sock: socket.socket, frame: SpikeFrame) -> int:
    data = serialize(frame)
    try:
        sock.sendall(data)
    except OSError as exc:
        raise ConnectionLostError(str(exc)) from exc
    return len(data)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def default_endpoint() -> str:
    return os.environ.get(ENDPOINT_ENV_VAR, _DEFAULT_ENDPOINT)


@dataclass
class SessionStats:
    """Per-session transmission accounting."""

    frames_sent: int = 0
    payload_bytes_total: int = 0
    header_overhead_bytes: int = 0
    round_trips: int = 0

    def record(self, frame: SpikeFrame):
        self.frames_sent += 1
        self.payload_bytes_total += len(frame.payload)
        self.header_overhead_bytes += HEADER_LEN + CHECKSUM_LEN


# -- client ---------------------------------------------------------------


class EdgeClient:
    """Synchronous request/response client for the edge side of a split."""

    def __init__(self, network, endpoint: str, timesteps: int = 2):
        if network.bottleneck is None:
            raise ValueError("edge client needs a network with an attached bottleneck")
        self.network = network
        self.endpoint = endpoint
        self.timesteps = timesteps
        self.stats = SessionStats()
        self._sock: socket.socket | None = None

    def connect(self) -> "EdgeClient":
        host, port = parse_endpoint(self.endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=30)
        except OSError as exc:
            raise ConnectionLostError(f"cannot connect to {self.endpoint}: {exc}") from exc
        return self

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def infer(self, image: torch.Tensor) -> torch.Tensor:
        """Run the prefix+encoder locally, ship spikes, return cloud logits."""
        if self._sock is None:
            raise ConnectionLostError("client is not connected")
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.shape[0] != 1:
            raise ValueError("wire inference is batch-1 only")
        compressed = self.network.run_edge(image, self.timesteps)
        frame = spikes_to_frame(
            compressed, self.network.arch.arch_id, self.network.split_point
        )
        write_frame(self._sock, frame)
        self.stats.record(frame)
        response = read_frame(self._sock)
        self.stats.round_trips += 1
        return frame_to_logits(response)


def edge_infer(image: torch.Tensor, network, endpoint: str, timesteps: int = 2):
    """One-shot loopback-style inference; returns (logits, session stats)."""
    with EdgeClient(network, endpoint, timesteps) as client:
        logits = client.infer(image)
        return logits, client.stats


# -- server ---------------------------------------------------------------


class _RequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: SpikeServer = self.server  # type: ignore[assignment]
        while True:
            try:
                frame = read_frame(self.request)
            except ConnectionLostError:
                return
            except WireError as exc:
                # Framing is broken; report and drop the connection.
                try:
                    write_frame(self.request, error_to_frame(exc.code, str(exc)))
                except WireError:
                    pass
                return
            try:
                response = server.answer(frame)
            except WireError as exc:
                response = error_to_frame(exc.code, str(exc))
            except Exception as exc:  # pragma: no cover - defensive
                response = error_to_frame(ErrorCode.INTERNAL, str(exc))
            try:
                write_frame(self.request, response)
            except WireError:
                return


class SpikeServer(socketserver.ThreadingTCPServer):
    """Serves decoder + suffix inference for one (architecture, split) pair.

    Connections are handled concurrently, one in-flight request each; the
    actual tensor computation is serialized so results are independent of
    connection interleaving.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, network, endpoint: str):
        if network.bottleneck is None:
            raise ValueError("server needs a network with an attached bottleneck")
        self.network = network
        self._infer_lock = threading.Lock()
        host, port = parse_endpoint(endpoint)
        super().__init__((host, port), _RequestHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def answer(self, frame: SpikeFrame) -> SpikeFrame:
        net = self.network
        if frame.arch_id != net.arch.arch_id:
            raise ProtocolError(
                ErrorCode.UNKNOWN_ARCH,
                f"server holds arch {net.arch.arch_id}, frame declares {frame.arch_id}",
            )
        if frame.split_point != net.split_point:
            raise ProtocolError(
                ErrorCode.UNKNOWN_SPLIT,
                f"server is split at {net.split_point}, frame declares {frame.split_point}",
            )
        expected = tuple(net.bottleneck.config.out_shape)
        if tuple(frame.dims) != expected:
            raise ProtocolError(
                ErrorCode.BAD_DIMS,
                f"split {frame.split_point} expects dims {expected}, got {tuple(frame.dims)}",
            )
        spikes = frame_to_spikes(frame, dtype=net.dtype)
        with self._infer_lock, torch.no_grad():
            logits = net.run_cloud(spikes)
        return logits_to_frame(logits[0], frame)

    def start(self) -> "SpikeServer":
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        self._thread = thread
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve(network, endpoint: str) -> SpikeServer:
    """Start a background co-inference server; caller stops it."""
    return SpikeServer(network, endpoint).start()
