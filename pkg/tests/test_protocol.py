"""Binary framing, transports and exchange-order checks."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from splitfield import protocol as P
from splitfield.protocol import Control, CutGradientsBatch, EmbeddingsBatch, PointsBatch
from splitfield.transport import TraceWriter, iter_trace, memory_pair, tcp_accept, tcp_connect, tcp_listen, wire_size


def f32(rng, *shape):
    return rng.normal(size=shape).astype(np.float32).astype(np.float64)


def random_message(rng):
    kind = rng.integers(0, 5)
    t = int(rng.integers(0, 2**32))
    if kind == 0:
        nr, npnt = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        return PointsBatch(t, f32(rng, nr, npnt, 3), f32(rng, nr, 3), f32(rng, nr, npnt))
    if kind in (1, 2):
        cls = EmbeddingsBatch if kind == 1 else CutGradientsBatch
        return cls(t, f32(rng, int(rng.integers(0, 9)), int(rng.integers(1, 7))))
    if kind == 3:
        return Control("config", {"seed": int(rng.integers(100)), "lr": float(rng.uniform()), "tag": "x"})
    return Control(["start", "stop"][int(rng.integers(2))])


class TestCodec:
    """Encoding is exact for f32-representable payloads."""

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**63 - 1))
    def test_round_trip_property(self, seed):
        msg = random_message(np.random.default_rng(seed))
        assert P.decode_message(P.encode_message(msg)) == msg

    def test_frame_layout(self):
        msg = EmbeddingsBatch(7, np.array([[1.5, -2.0]]))
        data = P.encode_message(msg)
        assert data[:5] == bytes([P.TAG_EMBEDDINGS]) + struct.pack("<I", 16)
        assert struct.unpack("<II2f", data[5:]) == (7, 2, 1.5, -2.0)
        assert len(data) == wire_size(msg)

    def test_frame_sizes(self):
        pts = PointsBatch(0, np.zeros((4, 5, 3)), np.zeros((4, 3)), np.zeros((4, 5)))
        assert len(P.encode_message(pts)) == P.points_frame_size(4, 5) == 5 + 12 + 4 * (60 + 12 + 20)
        assert P.iteration_wire_bytes(4, 5, 6) == P.points_frame_size(4, 5) + 2 * (5 + 8 + 4 * 120)

    def test_stop_is_header_only(self):
        data = P.encode_message(Control("stop"))
        assert data == bytes([P.TAG_STOP, 0, 0, 0, 0])

    def test_embedding_payload_size(self):
        msg = EmbeddingsBatch(3, np.zeros((64 * 32, 64)))
        data = P.encode_message(msg)
        # 64 rays x 32 samples x 64 channels of f32, after the (t, d) words
        assert len(data) - P.HEADER_SIZE - 8 == 524_288
        assert len(data) == P.embeddings_frame_size(64, 32, 64)

    def test_gradients_keep_their_tag(self):
        back = P.decode_message(P.encode_message(CutGradientsBatch(1, np.ones((2, 2)))))
        assert type(back) is CutGradientsBatch
        assert back != EmbeddingsBatch(1, np.ones((2, 2)))

    def test_quantize_is_f32(self):
        x = np.array([[0.1, 1 / 3]])
        assert_array_equal(P.quantize(EmbeddingsBatch(0, x)).values, x.astype(np.float32))

    def test_read_frames(self, rng):
        msgs = [random_message(rng) for _ in range(20)]
        assert list(P.read_frames(b"".join(P.encode_message(m) for m in msgs))) == msgs


class TestCodecErrors:
    """Malformed input raises typed errors."""

    def test_truncated(self):
        data = P.encode_message(EmbeddingsBatch(0, np.ones((3, 2))))
        with pytest.raises(P.TruncatedFrameError):
            P.decode_message(data[:-1])
        with pytest.raises(P.TruncatedFrameError):
            P.decode_message(data[:3])

    def test_unknown_tag(self):
        with pytest.raises(P.UnknownTagError):
            P.decode_message(bytes([0x7F]) + struct.pack("<I", 0))
        with pytest.raises(P.UnknownTagError):
            P.decode_message(bytes([0xFF]) + struct.pack("<I", 0))

    def test_oversized_length(self):
        with pytest.raises(P.LengthOverflowError):
            P.decode_message(bytes([P.TAG_POINTS]) + struct.pack("<I", 2**31))

    def test_points_length_mismatch(self):
        payload = struct.pack("<III", 0, 2, 2) + b"\0" * 8
        with pytest.raises(P.LengthOverflowError):
            P.decode_message(bytes([P.TAG_POINTS]) + struct.pack("<I", len(payload)) + payload)

    def test_trailing_bytes(self):
        with pytest.raises(P.CodecError):
            P.decode_message(P.encode_message(Control("stop")) + b"x")

    def test_ragged_embeddings(self):
        payload = struct.pack("<II", 0, 3) + b"\0" * 8
        with pytest.raises(P.CodecError):
            P.decode_message(bytes([P.TAG_EMBEDDINGS]) + struct.pack("<I", len(payload)) + payload)

    def test_bad_config_json(self):
        with pytest.raises(P.CodecError):
            P.decode_message(bytes([P.TAG_CONFIG]) + struct.pack("<I", 2) + b"{x")

    def test_unencodable(self):
        with pytest.raises(P.CodecError):
            P.encode_message("hello")
        with pytest.raises(P.CodecError):
            P.encode_message(Control("pause"))


class TestTransports:
    """Memory and TCP channels deliver the same messages and count bytes."""

    @pytest.mark.parametrize("codec", [False, True])
    def test_memory_pair(self, rng, codec):
        a, b = memory_pair(codec=codec)
        msg = EmbeddingsBatch(3, f32(rng, 4, 2))
        a.send(msg)
        assert b.recv(timeout=1) == msg
        assert a.bytes_sent == b.bytes_received == wire_size(msg)

    def test_memory_close_raises(self):
        a, b = memory_pair()
        a.close()
        with pytest.raises(ConnectionError):
            b.recv(timeout=1)

    def test_memory_timeout(self):
        _, b = memory_pair()
        with pytest.raises(TimeoutError):
            b.recv(timeout=0.01)

    def test_tcp_round_trip(self, rng):
        listener = tcp_listen()
        host, port = listener.getsockname()
        client = tcp_connect(host, port)
        server = tcp_accept(listener, timeout=5)
        try:
            msgs = [random_message(rng) for _ in range(30)]
            for m in msgs:
                client.send(m)
            assert [server.recv(timeout=5) for _ in msgs] == msgs
            assert client.bytes_sent == server.bytes_received == sum(wire_size(m) for m in msgs)
            client.close()
            with pytest.raises(ConnectionError):
                server.recv(timeout=5)
        finally:
            server.close()
            listener.close()


class TestTrace:
    """Trace files replay the observed exchanges."""

    def test_write_and_iterate(self, tmp_path, rng):
        path = tmp_path / "t.bin"
        w = TraceWriter(path, lambda: {"seed": 3})
        rows = []
        for t in range(3):
            p = PointsBatch(t, f32(rng, 2, 2, 3), f32(rng, 2, 3), f32(rng, 2, 2))
            e, g = EmbeddingsBatch(t, f32(rng, 4, 2)), CutGradientsBatch(t, f32(rng, 4, 2))
            w(p, e, g)
            rows.append((p, e, g))
        w.close()
        cfg, ex = iter_trace(path)
        assert cfg == {"seed": 3}
        assert list(ex) == rows

    def test_empty_trace_has_header(self, tmp_path):
        w = TraceWriter(tmp_path / "t.bin", {"a": 1})
        w.close()
        cfg, ex = iter_trace(tmp_path / "t.bin")
        assert cfg == {"a": 1} and list(ex) == []

    def test_rejects_headerless(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(P.encode_message(Control("stop")))
        with pytest.raises(ValueError):
            iter_trace(tmp_path / "t.bin")
