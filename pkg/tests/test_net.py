import socket
import struct
import time

import numpy as np
import pytest

from privatar import net
from privatar.linalg import covariance
from privatar.pipeline import offload_latents, reconstruct
from privatar.privacy import NoiseCalibration, calibrate_damp
from privatar.rng import RngStream

# HELLO, session 1, frame 0: B=4, ids 2..15, d=256, codec 0x0123456789abcdef,
# calibration 0xfedcba9876543210, 16x16x3 planes (captured on first build)
GOLDEN_HELLO = (
    "5056545201010100000000000000000000000000000031000000040e0002030405060708090a0b0c0d0e0f"
    "00010000efcdab89674523011032547698badcfe100000001000000003000000")


def _golden_config():
    return net.SessionConfig(4, tuple(range(2, 16)), 256, 0x0123456789ABCDEF,
                             0xFEDCBA9876543210, 16, 16, 3)


def test_golden_hello():
    buf = net.encode_frame(net.Envelope(net.HELLO, 1, 0, _golden_config().to_bytes()))
    assert buf.hex() == GOLDEN_HELLO
    env = net.decode_frame(buf)
    assert net.SessionConfig.from_bytes(env.payload) == _golden_config()


@pytest.mark.parametrize("msg_type", sorted(net.MSG_NAMES))
def test_roundtrip_every_type(msg_type):
    env = net.Envelope(msg_type, 2 ** 64 - 1, 12345, bytes(range(7)))
    assert net.decode_frame(net.encode_frame(env)) == env


def test_decode_rejections():
    good = net.encode_frame(net.Envelope(net.ACK, 1, 2, b"xy"))
    with pytest.raises(net.ProtocolError):
        net.decode_frame(b"XVTR" + good[4:])
    with pytest.raises(net.ProtocolError):
        net.decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(net.ProtocolError):
        net.decode_frame(good[:5] + b"\x63" + good[6:])
    with pytest.raises(net.ProtocolError):
        net.decode_frame(good[:-1])
    with pytest.raises(net.ProtocolError):
        net.decode_frame(good[:10])
    oversize = good[:22] + struct.pack("<I", net.MAX_PAYLOAD + 1)
    with pytest.raises(net.ProtocolError):
        net.decode_frame(oversize)
    with pytest.raises(net.ProtocolError):
        net.encode_frame(net.Envelope(99))


def test_session_config_validation():
    with pytest.raises(ValueError):
        net.SessionConfig(4, (3, 2), 8, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        net.SessionConfig(4, (2, 16), 8, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        net.SessionConfig(4, (2, 3), 8, 0, 1, 4, 4)
    with pytest.raises(net.ProtocolError):
        net.SessionConfig.from_bytes(_golden_config().to_bytes()[:-1])


@pytest.fixture
def noisy_system(small_system, small_corpus):
    Z = offload_latents(small_system, small_corpus.textures)
    return small_system.with_calibration(calibrate_damp(covariance(Z), 0.1, backend="lapack"))


@pytest.fixture
def host(small_system):
    seen = []
    h = net.serve(("127.0.0.1", 0), [small_system.offload_codec], recorder=seen.append,
                  idle_timeout=2.0)
    h.seen = seen
    yield h
    h.shutdown()


def _raw_session(host, system, messages):
    """Send raw envelopes after a valid HELLO; return the replies."""
    cfg = net.SessionConfig.for_system(system, 1)
    with socket.create_connection(host.address, timeout=5) as s:
        net.send_frame(s, net.Envelope(net.HELLO, 5, 0, cfg.to_bytes()))
        assert net.read_frame(s).msg_type == net.ACK
        replies = []
        for env in messages:
            net.send_frame(s, env)
            replies.append(net.read_frame(s))
        return replies


def test_loopback_bit_identical(host, noisy_system, small_corpus):
    texs = small_corpus.textures[:10]
    out, log = net.client_session(host.address, texs, noisy_system, RngStream(4))
    ref = [reconstruct(noisy_system, t, i, RngStream(4)) for i, t in enumerate(texs)]
    assert all(np.array_equal(a, b) for a, b in zip(out, ref))
    assert [e.frame_id for e in log] == list(range(10))
    assert all(e.roundtrip_s >= 0 for e in log)


def test_zero_noise_matches_local_pipeline(host, small_system, small_corpus):
    texs = small_corpus.textures[:4]
    out, _ = net.client_session(host.address, texs, small_system, RngStream(0))
    for i, (o, t) in enumerate(zip(out, texs)):
        assert np.max(np.abs(o - reconstruct(small_system, t, i, RngStream(0)))) <= 1e-4


def test_frame_ids_echoed(host, small_system):
    d = small_system.offload_codec.latent_dim
    z = np.zeros(d, dtype="<f4").tobytes()
    replies = _raw_session(host, small_system, [net.Envelope(net.OFFLOAD_LATENT, 5, fid, z)
                                                for fid in (3, 7, 100)])
    assert [r.frame_id for r in replies] == [3, 7, 100]
    assert all(r.msg_type == net.RETURN_COMPONENTS for r in replies)
    assert len(replies[0].payload) == small_system.plan.m * 8 * 8 * 3 * 4


@pytest.mark.parametrize("second,code", [(3, net.ERR_OUT_OF_ORDER), (2, net.ERR_OUT_OF_ORDER)])
def test_out_of_order_and_duplicate(host, small_system, second, code):
    z = np.zeros(small_system.offload_codec.latent_dim, dtype="<f4").tobytes()
    replies = _raw_session(host, small_system, [net.Envelope(net.OFFLOAD_LATENT, 5, 3, z),
                                                net.Envelope(net.OFFLOAD_LATENT, 5, second, z)])
    assert replies[1].msg_type == net.ERROR and net.parse_error(replies[1].payload)[0] == code


def test_length_mismatch(host, small_system):
    replies = _raw_session(host, small_system, [net.Envelope(net.OFFLOAD_LATENT, 5, 0, b"\0" * 12)])
    assert net.parse_error(replies[0].payload)[0] == net.ERR_LENGTH_MISMATCH


def test_wrong_hash_gets_error(host, small_system):
    cfg = net.SessionConfig.for_system(small_system, 1)
    bad = net.SessionConfig(cfg.B, cfg.offloaded_ids, cfg.latent_dim, cfg.codec_hash ^ 1, 1,
                            cfg.plane_height, cfg.plane_width)
    with socket.create_connection(host.address, timeout=5) as s:
        net.send_frame(s, net.Envelope(net.HELLO, 1, 0, bad.to_bytes()))
        reply = net.read_frame(s)
    assert reply.msg_type == net.ERROR
    assert net.parse_error(reply.payload)[0] == net.ERR_HASH_MISMATCH


def test_latent_before_hello_rejected(host):
    with socket.create_connection(host.address, timeout=5) as s:
        net.send_frame(s, net.Envelope(net.OFFLOAD_LATENT, 1, 0, b""))
        reply = net.read_frame(s)
    assert net.parse_error(reply.payload)[0] == net.ERR_BAD_MESSAGE


def test_host_error_aborts_with_partial_log(host, small_system, small_corpus):
    # fault injection: a duplicated frame id makes the host reply ERROR on frame 3
    with pytest.raises(net.OffloadError) as info:
        net.client_session(host.address, small_corpus.textures[:4], small_system, RngStream(0),
                           frame_ids=[0, 1, 1, 2])
    assert info.value.code == net.ERR_OUT_OF_ORDER
    assert [e.frame_id for e in info.value.log] == [0, 1]


def test_client_timeout(small_system, small_corpus):
    # a listener that accepts but never answers
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    try:
        t0 = time.perf_counter()
        with pytest.raises(net.OffloadError):
            net.client_session(srv.getsockname(), small_corpus.textures[:1], small_system,
                               RngStream(0), timeout=0.3)
        assert time.perf_counter() - t0 < 3.0
    finally:
        srv.close()


def test_idle_timeout_closes_session(small_system):
    h = net.serve(("127.0.0.1", 0), [small_system.offload_codec], idle_timeout=0.2)
    try:
        with socket.create_connection(h.address, timeout=5) as s:
            time.sleep(0.5)
            assert s.recv(1) == b""
    finally:
        h.shutdown()


def test_host_sees_only_noisy_offloaded_latents(host, noisy_system, small_corpus):
    texs = small_corpus.textures[:6]
    net.client_session(host.address, texs, noisy_system, RngStream(2))
    clean = offload_latents(noisy_system, texs).astype(np.float32)
    d = noisy_system.offload_codec.latent_dim
    latents = [e for e in host.seen if e.msg_type == net.OFFLOAD_LATENT]
    assert len(latents) == 6
    assert {e.msg_type for e in host.seen} <= {net.HELLO, net.OFFLOAD_LATENT, net.BYE}
    for env, z in zip(latents, clean):
        assert len(env.payload) == 4 * d
        assert not np.array_equal(np.frombuffer(env.payload, "<f4"), z)


def test_zero_calibration_hash_is_nonzero():
    assert NoiseCalibration.zero(4).content_hash != 0
