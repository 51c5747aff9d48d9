import socket
import struct
import threading

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spikesplit import wire
from spikesplit.bottleneck import build_bottleneck, make_bottleneck, spike_payload_bytes
from spikesplit.model import build_network
from spikesplit.trainer import toy_arch
from spikesplit.wire import (
    BadMagicError,
    ChecksumError,
    EdgeClient,
    ErrorCode,
    LengthMismatchError,
    ProtocolError,
    SpikeFrame,
    VersionMismatchError,
    deserialize,
    edge_infer,
    error_to_frame,
    frame_to_logits,
    frame_to_spikes,
    logits_to_frame,
    serialize,
    serve,
    spikes_to_frame,
)


def random_spike_frame(seed=0, shape=(2, 1, 4, 3, 3)):
    g = torch.Generator().manual_seed(seed)
    spikes = (torch.rand(shape, generator=g) > 0.5).float()
    return spikes, spikes_to_frame(spikes, arch_id=1, split_point=5)


@pytest.fixture(scope="module")
def split_toy_network():
    net = build_network(toy_arch(), seed=11)
    cfg = make_bottleneck(net.arch.block_output_shape(1), (8, 6, 6), 2)
    module = build_bottleneck(cfg, torch.Generator().manual_seed(3))
    net.attach_bottleneck(module, 1)
    g = torch.Generator().manual_seed(99)
    net.calibrate_norms(torch.rand((8, 1, 12, 12), generator=g), 2)
    return net.eval()


@pytest.fixture()
def toy_server(split_toy_network):
    server = serve(split_toy_network, "127.0.0.1:0")
    yield server
    server.stop()


class TestFrameCodec:
    def test_round_trip(self):
        _, frame = random_spike_frame()
        assert deserialize(serialize(frame)) == frame

    def test_layout_is_fixed_overhead(self):
        _, frame = random_spike_frame()
        data = serialize(frame)
        assert len(data) == wire.HEADER_LEN + len(frame.payload) + 4
        assert data[:4] == wire.MAGIC

    def test_final_split_frame_payload_is_32_bytes(self):
        g = torch.Generator().manual_seed(1)
        spikes = (torch.rand((2, 1, 8, 4, 4), generator=g) > 0.5).float()
        frame = spikes_to_frame(spikes, arch_id=1, split_point=16)
        assert len(frame.payload) == 32

    def test_bad_magic(self):
        _, frame = random_spike_frame()
        data = bytearray(serialize(frame))
        data[0] ^= 0xFF
        with pytest.raises(BadMagicError):
            deserialize(bytes(data))

    def test_version_mismatch(self):
        _, frame = random_spike_frame()
        data = bytearray(serialize(frame))
        data[4] = 99
        with pytest.raises(VersionMismatchError):
            deserialize(bytes(data))

    def test_length_mismatch(self):
        _, frame = random_spike_frame()
        data = serialize(frame)
        with pytest.raises(LengthMismatchError):
            deserialize(data[:-3])

    @pytest.mark.parametrize("bit", [0, 1, 7, 13, 35])
    def test_any_payload_bit_flip_fails_checksum(self, bit):
        _, frame = random_spike_frame()
        data = bytearray(serialize(frame))
        offset = wire.HEADER_LEN + bit // 8
        data[offset] ^= 1 << (bit % 8)
        with pytest.raises(ChecksumError):
            deserialize(bytes(data))

    def test_error_codes_are_distinct(self):
        codes = {
            BadMagicError.code,
            VersionMismatchError.code,
            LengthMismatchError.code,
            ChecksumError.code,
        }
        assert len(codes) == 4

    def test_concatenated_frames_parse_unambiguously(self):
        frames = [random_spike_frame(seed=s)[1] for s in range(4)]
        stream = b"".join(serialize(f) for f in frames)
        parsed = []
        offset = 0
        while offset < len(stream):
            plen = struct.unpack(
                "<I", stream[offset + wire.HEADER_LEN - 4 : offset + wire.HEADER_LEN]
            )[0]
            end = offset + wire.HEADER_LEN + plen + 4
            parsed.append(deserialize(stream[offset:end]))
            offset = end
        assert parsed == frames

    @given(
        seed=st.integers(0, 2**31 - 1),
        t=st.integers(1, 4),
        c=st.integers(1, 16),
        h=st.integers(1, 8),
        w=st.integers(1, 8),
    )
    @settings(max_examples=60)
    def test_round_trip_random_frames(self, seed, t, c, h, w):
        g = torch.Generator().manual_seed(seed)
        spikes = (torch.rand((t, 1, c, h, w), generator=g) > 0.5).float()
        frame = spikes_to_frame(spikes, arch_id=2, split_point=3)
        decoded = deserialize(serialize(frame))
        assert decoded == frame
        assert torch.equal(frame_to_spikes(decoded), spikes)

    def test_spike_payload_length_validated(self):
        frame = SpikeFrame(arch_id=1, split_point=1, timesteps=2,
                           dims=(4, 4, 4), payload=b"\x00")
        with pytest.raises(LengthMismatchError):
            frame_to_spikes(frame)

    def test_logits_frames(self):
        logits = torch.tensor([0.5, -1.5, 2.25])
        _, request = random_spike_frame()
        frame = logits_to_frame(logits, request)
        assert frame.dims == (3, 1, 1)
        assert torch.equal(frame_to_logits(frame), logits)

    def test_error_frame_raises_on_decode(self):
        frame = error_to_frame(ErrorCode.BAD_DIMS, "wrong dims")
        with pytest.raises(ProtocolError, match="wrong dims") as err:
            frame_to_logits(frame)
        assert err.value.code == ErrorCode.BAD_DIMS


class TestLoopback:
    def test_partition_transparency_on_toy_network(self, split_toy_network, toy_server):
        g = torch.Generator().manual_seed(21)
        image = torch.rand((1, 1, 12, 12), generator=g)
        with torch.no_grad():
            mono = split_toy_network.forward(image, 2)
        logits, stats = edge_infer(image, split_toy_network, toy_server.endpoint, 2)
        assert torch.equal(logits, mono[0])
        assert stats.frames_sent == 1
        assert stats.round_trips == 1
        assert stats.payload_bytes_total == spike_payload_bytes(
            split_toy_network.bottleneck.config
        )

    def test_sequential_inferences_accumulate_stats(self, split_toy_network, toy_server):
        per_frame = spike_payload_bytes(split_toy_network.bottleneck.config)
        with EdgeClient(split_toy_network, toy_server.endpoint, 2) as client:
            g = torch.Generator().manual_seed(5)
            for _ in range(10):
                client.infer(torch.rand((1, 1, 12, 12), generator=g))
        assert client.stats.frames_sent == 10
        assert client.stats.round_trips == 10
        assert client.stats.payload_bytes_total == 10 * per_frame
        assert client.stats.header_overhead_bytes == 10 * (wire.HEADER_LEN + 4)

    def test_concurrent_clients_match_single_client_results(self, split_toy_network, toy_server):
        g = torch.Generator().manual_seed(6)
        images = [torch.rand((1, 1, 12, 12), generator=g) for _ in range(2)]
        expected = [
            edge_infer(img, split_toy_network, toy_server.endpoint, 2)[0]
            for img in images
        ]
        results: dict[int, torch.Tensor] = {}

        def worker(i):
            logits, _ = edge_infer(images[i], split_toy_network, toy_server.endpoint, 2)
            results[i] = logits

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(2):
            assert torch.equal(results[i], expected[i])

    def test_wrong_dims_get_error_frame_and_connection_survives(self, split_toy_network, toy_server):
        host, port = wire.parse_endpoint(toy_server.endpoint)
        with socket.create_connection((host, port), timeout=10) as sock:
            bad = SpikeFrame(
                arch_id=split_toy_network.arch.arch_id,
                split_point=1,
                timesteps=2,
                dims=(4, 6, 6),
                payload=bytes(wire.SpikeTensor.num_bytes_for((2, 1, 4, 6, 6))),
            )
            wire.write_frame(sock, bad)
            response = wire.read_frame(sock)
            with pytest.raises(ProtocolError) as err:
                frame_to_logits(response)
            assert err.value.code == ErrorCode.BAD_DIMS
            # same connection still answers a valid request
            g = torch.Generator().manual_seed(9)
            spikes = (torch.rand((2, 1, 8, 6, 6), generator=g) > 0.5).float()
            good = spikes_to_frame(spikes, split_toy_network.arch.arch_id, 1)
            wire.write_frame(sock, good)
            logits = frame_to_logits(wire.read_frame(sock))
            assert logits.shape == (2,)

    def test_unknown_arch_and_split_are_protocol_errors(self, split_toy_network, toy_server):
        host, port = wire.parse_endpoint(toy_server.endpoint)
        g = torch.Generator().manual_seed(10)
        spikes = (torch.rand((2, 1, 8, 6, 6), generator=g) > 0.5).float()
        for arch_id, split, code in (
            (99, 1, ErrorCode.UNKNOWN_ARCH),
            (split_toy_network.arch.arch_id, 2, ErrorCode.UNKNOWN_SPLIT),
        ):
            with socket.create_connection((host, port), timeout=10) as sock:
                wire.write_frame(sock, spikes_to_frame(spikes, arch_id, split))
                with pytest.raises(ProtocolError) as err:
                    frame_to_logits(wire.read_frame(sock))
                assert err.value.code == code

    def test_malformed_stream_gets_error_response(self, toy_server):
        host, port = wire.parse_endpoint(toy_server.endpoint)
        with socket.create_connection((host, port), timeout=10) as sock:
            sock.sendall(b"GARBAGEGARBAGEGARBAGEGARBAGE")
            response = wire.read_frame(sock)
            with pytest.raises(ProtocolError) as err:
                frame_to_logits(response)
            assert err.value.code == ErrorCode.BAD_MAGIC

    def test_connection_refused_is_retryable(self, split_toy_network):
        with pytest.raises(wire.ConnectionLostError) as err:
            edge_infer(torch.rand(1, 1, 12, 12), split_toy_network, "127.0.0.1:9", 2)
        assert err.value.retryable

    def test_env_var_endpoint(self, monkeypatch):
        monkeypatch.setenv(wire.ENDPOINT_ENV_VAR, "example.org:4242")
        assert wire.default_endpoint() == "example.org:4242"

    def test_parse_endpoint_rejects_garbage(self):
        with pytest.raises(ValueError):
            wire.parse_endpoint("no-port")
